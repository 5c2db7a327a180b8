"""Analytic R=2 backward against finite differences of the same stopped surrogate.

Extra arguments are passed to ``tailsink validate-exactness``; see ``--help``.
"""

import sys

from tailsink.cli import main

if __name__ == "__main__":
    sys.exit(main(["validate-exactness", *sys.argv[1:]]))
