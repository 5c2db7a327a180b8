"""Print the analytic storage ledger of the two R=2 backward schedules.

Extra arguments are passed to ``tailsink memory-ledger``; see ``--help``.
"""

import sys

from tailsink.cli import main

if __name__ == "__main__":
    sys.exit(main(["memory-ledger", *sys.argv[1:]]))
