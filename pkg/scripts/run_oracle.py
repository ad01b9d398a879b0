"""Oracle-gap study: train one model, then report test-split mAP at each IoU
with model scores and with ground-truth ranking and/or class labels.

    python scripts/run_oracle.py --seed 0 --weights 1,1,1,1
"""

import argparse
import json
import sys

from tal_mutreg.experiments import build_corpus, oracle_gap, train_model
from tal_mutreg.trainer import TrainConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--weights", default="1,1,1,1", help="cls,reg,intra,inter")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", help="write the table as JSON")
    args = ap.parse_args(argv)

    weights = tuple(float(w) for w in args.weights.split(","))
    corpus = build_corpus()
    trained = train_model(corpus, weights, args.seed, train_cfg=TrainConfig(epochs=args.epochs, switch_epoch=min(10, args.epochs)))
    table = oracle_gap(corpus, trained.params)
    ious = list(next(iter(table.values())))
    print(f"{'scores':<8}" + "".join(f"  mAP@{t:.1f}" for t in ious))
    for mode, row in table.items():
        print(f"{'model' if mode == 'none' else mode:<8}" + "".join(f"  {row[t]:8.4f}" for t in ious))
    if args.out:
        with open(args.out, "w") as f:
            json.dump({m: {f"{t:.2f}": v for t, v in r.items()} for m, r in table.items()}, f, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
