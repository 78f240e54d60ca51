"""Run the acceptance gate and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py            # all nine criteria
    python3 scripts/run_acceptance.py 1 2 3 8    # a subset
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent


def main(argv: list[str]) -> int:
    args = [str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"]
    if argv:
        args += ["-k", " or ".join(f"criterion_{n}_" for n in argv)]
    return int(pytest.main(args))


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
