"""Write the default synthetic corpus to disk so runs can share it via --corpus."""
import sys

from ucil import cli

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "data/synth"
    sys.exit(cli.main(["synth", "--out", out] + sys.argv[2:]))
