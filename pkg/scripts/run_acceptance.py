#!/usr/bin/env python3
"""Run the nine acceptance criteria and print one PASS/FAIL line each."""
import argparse
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("-k", help="pytest -k expression, e.g. 'criterion_3 or criterion_7'")
    args = p.parse_args()
    argv = [str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"]
    if args.k:
        argv += ["-k", args.k]
    return pytest.main(argv)


if __name__ == "__main__":
    sys.exit(main())
