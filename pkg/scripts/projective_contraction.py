"""Projective contraction certificates on random positive blocks and synthetic instances.

Extra arguments are passed to ``tailsink contraction``; see ``--help``.
"""

import sys

from tailsink.cli import main

if __name__ == "__main__":
    sys.exit(main(["contraction", *sys.argv[1:]]))
