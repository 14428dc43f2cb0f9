"""Run the acceptance suite and print one pass/fail line per criterion.

    python scripts/run_acceptance.py            # all criteria (about 15 minutes on one core)
    python scripts/run_acceptance.py --fast     # skip the multi-minute ones
"""
import argparse
import sys
from pathlib import Path

import pytest

SLOW = ("theory_matches_simulation", "generated_density", "hellinger_decreases", "collapse_chain")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fast", action="store_true", help="skip the slow criteria 3, 4, 5 and 10")
    args = ap.parse_args()
    tests = Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py"
    argv = [str(tests), "-q", "-p", "no:cacheprovider"]
    if args.fast:
        argv += ["-k", " and ".join(f"not {s}" for s in SLOW)]
    return int(pytest.main(argv))


if __name__ == "__main__":
    sys.exit(main())
