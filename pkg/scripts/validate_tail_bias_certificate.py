"""Bias-certificate rows over tail depths plus the certified tail-depth selector.

Extra arguments are passed to ``tailsink validate-bias``; see ``--help``.
"""

import sys

from tailsink.cli import main

if __name__ == "__main__":
    sys.exit(main(["validate-bias", *sys.argv[1:]]))
