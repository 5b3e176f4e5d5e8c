"""Ablation sweep over the three UCIL switches at the desk memory size.

Extra flags are passed through to `ucil matrix`, e.g. `--seeds 0 1 --workers 4`.
"""
import sys

from ucil import cli

if __name__ == "__main__":
    sys.exit(cli.main(["matrix", "--table", "table3", "--out", "runs/table3"] + sys.argv[1:]))
