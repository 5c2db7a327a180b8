"""Time the direct four-plan and one-reference R=2 backward modes side by side.

Extra arguments are passed to ``tailsink bench-adjoint``; see ``--help``.
"""

import sys

from tailsink.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench-adjoint", *sys.argv[1:]]))
