"""Baseline comparison: finetune, joint, EWC, LwF, NR and UCIL at three rehearsal sizes.

Extra flags are passed through to `ucil matrix`, e.g. `--seeds 0 1 --workers 4`.
"""
import sys

from ucil import cli

if __name__ == "__main__":
    sys.exit(cli.main(["matrix", "--table", "table1", "--out", "runs/table1"] + sys.argv[1:]))
