"""Run an ablation from a JSON config and print the comparison table.

    python scripts/run_ablation.py configs/smoke.json --output-dir runs/smoke
"""

import argparse
import sys

from densattn.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", nargs="?", default="configs/smoke.json")
    p.add_argument("--output-dir")
    p.add_argument("--epochs", type=int)
    args = p.parse_args()
    argv = ["ablate", "--config", args.config]
    if args.output_dir:
        argv += ["--output-dir", args.output_dir]
    if args.epochs is not None:
        argv += ["--epochs", str(args.epochs)]
    sys.exit(main(argv))
