"""Rebuild every half-step plan from the final reference plan and report the log-domain error.

Extra arguments are passed to ``tailsink validate-orbit``; see ``--help``.
"""

import sys

from tailsink.cli import main

if __name__ == "__main__":
    sys.exit(main(["validate-orbit", *sys.argv[1:]]))
