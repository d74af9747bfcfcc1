# hybrid/__init__.py
# hybridtrain v0.1.0 — hybrid sync/async training engine with a discrete-event cluster simulator

__version__ = "0.1.0"
