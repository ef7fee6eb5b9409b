"""Run the acceptance suite and collect its PASS/FAIL lines into one summary file."""
import argparse
import re
import subprocess
import sys
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true", help="skip the slow criteria")
    ap.add_argument("--out", default="results/acceptance.txt")
    args = ap.parse_args()
    root = Path(__file__).resolve().parent.parent
    cmd = [sys.executable, "-m", "pytest", str(root / "tests" / "test_acceptance.py"), "-q"]
    if args.quick:
        cmd += ["-m", "not slow"]
    proc = subprocess.run(cmd, capture_output=True, text=True, cwd=root)
    lines = [l for l in proc.stdout.splitlines() if re.match(r"criterion \d+: ", l)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(proc.stdout.strip().splitlines()[-1])
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
