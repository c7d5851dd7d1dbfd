"""Routing-collapse study: entropy vs switch balancing on a TinyResNet BlockMoE.

    python3 scripts/collapse.py --seeds 5 --out results/collapse
"""
import argparse
import json
from dataclasses import asdict
from pathlib import Path

import torch

from moe_robust.diagnostics import write_table
from moe_robust.experiments import CollapseProtocol, collapse_study, median_entropy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--top-k", type=int, default=2)
    ap.add_argument("--coeff", type=float, default=0.01)
    ap.add_argument("--separation", type=float, default=1.0)
    ap.add_argument("--adversarial", action="store_true")
    ap.add_argument("--out", default="results/collapse")
    args = ap.parse_args()
    torch.set_num_threads(1)

    proto = CollapseProtocol(top_k=args.top_k, balance_coeff=args.coeff, separation=args.separation,
                             epochs=args.epochs, adversarial=args.adversarial)

    def show(r):
        print(f"{r.loss:8s} seed {r.seed}  H(P)={r.entropy:.3f}  counts={r.counts}  dead={r.dead}  "
              f"acc {r.train_accuracy:.2f}/{r.eval_accuracy:.2f}  {r.seconds:.0f}s", flush=True)

    runs = collapse_study(proto, seeds=range(args.seeds), progress=show)
    rows = [{"loss": r.loss, "seed": r.seed, "entropy": r.entropy, "counts": r.counts, "dead": r.dead,
             "train_accuracy": r.train_accuracy, "eval_accuracy": r.eval_accuracy} for rs in runs.values() for r in rs]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_table(args.out, "collapse", rows)
    for loss, rs in runs.items():
        print(f"{loss}: median H(P) {median_entropy(rs):.3f}, runs with a dead expert "
              f"{sum(bool(r.dead) for r in rs)}/{len(rs)}")
    print(json.dumps(asdict(proto)))


if __name__ == "__main__":
    main()
