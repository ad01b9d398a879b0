"""Loss-term ablation: AR@10 on the synthetic test split for the baseline,
intra-only, inter-only and full loss configurations over several seeds.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out ablation.json
"""

import argparse
import json
import statistics
import sys

from tal_mutreg.experiments import ABLATIONS, run_ablation
from tal_mutreg.trainer import TrainConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--an", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--configs", nargs="+", choices=list(ABLATIONS), default=list(ABLATIONS))
    ap.add_argument("--out", help="write per-seed results as JSON")
    args = ap.parse_args(argv)

    train_cfg = TrainConfig(epochs=args.epochs, switch_epoch=min(10, args.epochs))
    res = run_ablation(
        args.seeds,
        {k: ABLATIONS[k] for k in args.configs},
        an=args.an,
        train_cfg=train_cfg,
        log=lambda m: print(m, flush=True),
    )
    print(f"\n{'config':<11} {'weights':<22} median AR@{args.an}   per-seed")
    for name in args.configs:
        vals = res.per_seed[name]
        print(f"{name:<11} {str(ABLATIONS[name]):<22} {statistics.median(vals):.4f}        {' '.join(f'{v:.4f}' for v in vals)}")
    print(f"total {res.seconds:.0f}s")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"an": args.an, "seeds": args.seeds, "per_seed": res.per_seed, "seconds": res.seconds}, f, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
