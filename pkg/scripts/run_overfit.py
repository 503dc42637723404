"""Overfit sanity: every topology should fit a 50-conversation signal-rich corpus.

    python scripts/run_overfit.py
"""

import argparse
import logging

from emodyn.experiments import TOPOLOGIES, overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--conversations", type=int, default=50)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for topology, fusion in TOPOLOGIES:
        r = overfit(topology, fusion, args.conversations, args.max_epochs)
        print(f"{r.name:<18} epochs {r.epochs:3d}  train accuracy {r.train_accuracy:.3f}  {r.seconds:6.1f}s")


if __name__ == "__main__":
    main()
