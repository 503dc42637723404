"""Context ablation on the uninformative-target synthetic corpus.

Trains target-only, intra-only, inter-only and intra+inter models for each
seed and prints mean +- std test weighted F1 per variant.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out ablation.json
"""

import argparse
import json
import logging

from emodyn.experiments import AblationSetup, ablation_gaps, ablation_seed, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=AblationSetup().train.epochs)
    ap.add_argument("--fusion", default="gate", choices=["concat", "gate", "attention"])
    ap.add_argument("--out", help="write per-seed scores and the summary as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    setup = AblationSetup(fusion=args.fusion)
    setup.train.epochs = args.epochs
    per_seed = [ablation_seed(s, setup) for s in args.seeds]
    summary = summarize(per_seed)
    for name, (mean, std) in summary.items():
        print(f"{name:>7}: {100 * mean:6.2f} ± {100 * std:5.2f} weighted F1")
    for name, gap in ablation_gaps({k: m for k, (m, _) in summary.items()}).items():
        print(f"{name:>15}: {100 * gap:+6.2f} points")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"seeds": args.seeds, "per_seed": per_seed, "summary": summary}, fh, indent=2)


if __name__ == "__main__":
    main()
