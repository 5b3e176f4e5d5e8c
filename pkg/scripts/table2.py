"""Four-task variant of the baseline comparison.

Extra flags are passed through to `ucil matrix`, e.g. `--seeds 0 1 --workers 4`.
"""
import sys

from ucil import cli

if __name__ == "__main__":
    sys.exit(cli.main(["matrix", "--table", "table2", "--out", "runs/table2"] + sys.argv[1:]))
