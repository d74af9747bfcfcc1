# validation_script.py
# v0.1.0 — end-to-end smoke suite: runs hybridtrain.py subcommands, checks exit codes + METRICS

from __future__ import annotations
import subprocess
import re
import sys
import tempfile
from typing import List, Tuple, Dict

KEYVAL = re.compile(r"^-\s*([a-zA-Z0-9_.\-]+):\s*(.+?)\s*$")

TINY_HEP = ["--config", "config/hep_mini.json",
            "--set", "model.input_shape=[3, 16, 16]", "--set", "model.filters=4",
            "--set", "data.n=200", "--set", "iterations=12", "--set", "logging.level=\"WARNING\""]
TINY_CLIMATE = ["--config", "config/climate_mini.json",
                "--set", "model.input_shape=[4, 32, 32]", "--set", "model.filters=4",
                "--set", "data.n=40", "--set", "iterations=6", "--set", "logging.level=\"WARNING\""]
SMALL_SWEEP = ["--set", "sweep.nodes=[1, 2, 4]", "--set", "sweep.groups=[1, 2]", "--window", "4"]

# Each case: (name, argv, expected_exit, required metrics; "*" = present, ">0" = positive number)
CASES: List[Tuple[str, List[str], int, Dict[str, str]]] = [
    ("gen_data_hep",          ["gen-data", *TINY_HEP],                               0, {"samples": "200"}),
    ("train_sync",            ["train", *TINY_HEP],                                  0, {"sync.updates": "12", "sync.max_staleness": "0"}),
    ("train_hybrid_4",        ["train", *TINY_HEP, "--set", "cluster.groups=4"],     0, {"hybrid-4.updates": "12", "hybrid-4.max_staleness": ">0"}),
    ("train_climate",         ["train", *TINY_CLIMATE],                              0, {"sync.updates": "6", "sync.final_loss": "*"}),
    ("train_with_window",     ["train", *TINY_HEP, "--window", "4"],                 0, {"sync.peak_flops_per_s": ">0", "sync.sustained_flops_per_s": ">0"}),
    ("sweep_strong_small",    ["sweep-strong", *TINY_HEP, *SMALL_SWEEP],             0, {"rows": "5", "sync.n1.speedup": "1.0"}),
    ("sweep_weak_small",      ["sweep-weak", *TINY_HEP, *SMALL_SWEEP],               0, {"hybrid-2.n4.efficiency": ">0"}),
    ("report_after_sweep",    ["report", "--window", "4"],                           0, {"runs": "5", "strong.rows": "5", "time_to_loss.reached": "0"}),
    ("report_empty_dir",      ["report", "--window", "4"],                           1, {}),
    ("unknown_key_rejected",  ["train", *TINY_HEP, "--set", "cluster.grups=2"],      1, {}),
    ("sweep_needs_window",    ["sweep-strong", *TINY_HEP],                           1, {}),
    ("too_few_nodes",         ["train", *TINY_HEP, "--set", "cluster.total_nodes=7",
                               "--set", "cluster.groups=2"],                         1, {}),
]

# report cases re-read the output directory of an earlier case
SHARED_OUT: Dict[str, str] = {"report_after_sweep": "sweep_strong_small"}

def parse_metrics(stdout: str) -> Dict[str, str]:
    """
    Parse the METRICS block emitted by hybridtrain.py
    Returns flat dict: key -> value (values are kept as strings for simple equality checks)
    """
    metrics: Dict[str, str] = {}
    in_metrics = False
    for line in stdout.splitlines():
        if line.strip() == "METRICS:":
            in_metrics = True
            continue
        if not in_metrics:
            continue
        m = KEYVAL.match(line.strip())
        if m:
            metrics[m.group(1)] = m.group(2)
    return metrics

def _check(value: str, expected: str) -> bool:
    if expected == "*":
        return True
    if expected == ">0":
        try:
            return float(value) > 0
        except ValueError:
            return False
    return value == expected

def run_case(argv: List[str], expected_exit: int, expect_keys: Dict[str, str], out_dir: str) -> Tuple[bool, str]:
    proc = subprocess.run([sys.executable, "hybridtrain.py", *argv, "--out", out_dir],
                          capture_output=True, text=True)
    if proc.returncode != expected_exit:
        tail = proc.stderr.strip().splitlines()[-1:] or [""]
        return False, f"exit {proc.returncode}, expected {expected_exit} ({tail[0]})"
    if expected_exit != 0:
        return True, "ok"

    metrics = parse_metrics(proc.stdout)
    for k, v in expect_keys.items():
        if k not in metrics:
            return False, f"metric `{k}` missing"
        if not _check(metrics[k], v):
            return False, f"metric `{k}` mismatch: got `{metrics[k]}`, expected `{v}`"
    return True, "ok"

def main() -> int:
    print("--- Running Validation Suite for HybridTrain v0.1.0 ---\n")
    print(f"--- Testing Suite: {len(CASES)} CLI smoke cases ---")
    total = 0
    passed = 0
    fails: List[Tuple[str, str]] = []

    with tempfile.TemporaryDirectory(prefix="hybridtrain-") as tmp:
        for name, argv, code, keys in CASES:
            total += 1
            ok, reason = run_case(argv, code, keys, f"{tmp}/{SHARED_OUT.get(name, name)}")
            print(f"  {name:24} -> {'PASS' if ok else 'FAIL '} ({reason})")
            if ok: passed += 1
            else:  fails.append((name, reason))

    print("\n--- Validation Summary ---")
    print(f"Total Tests Run: {total}")
    print(f"Passed: {passed}")
    print(f"Failed: {total - passed}\n")

    if fails:
        print("--- Detailed Results ---")
        print("Test Name                | Reason")
        print("-" * 64)
        for name, reason in fails:
            print(f"{name:24} | {reason}")
        print("\n❌ FAILURE: One or more tests failed.")
        return 1

    print("✅ SUCCESS: All tests passed.")
    return 0

if __name__ == "__main__":
    raise SystemExit(main())
