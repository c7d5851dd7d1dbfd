"""Adversarial-training benefit: TinyResNet with and without one BlockMoE,
trained normally and with PGD-7, scored by PGD-20 accuracy.

    CIFAR100_ROOT=/data/cifar-100-binary python3 scripts/adversarial_benefit.py --data cifar100
    python3 scripts/adversarial_benefit.py --data synthetic
"""
import argparse
from pathlib import Path

import torch

from moe_robust.data import load_cifar100, make_synthetic, subset
from moe_robust.diagnostics import write_table
from moe_robust.experiments import BenefitProtocol, benefit_study


def cifar_subset(root=None, classes=10, per_class=500, seed=0):
    keep = list(range(classes))
    tr = subset(load_cifar100(root, "train").relabel(keep), per_class, seed)
    te = load_cifar100(root, "test").relabel(keep)
    return tr, te


def synthetic(classes=10, per_class=50, shape=(3, 16, 16), separation=0.4):
    tr = make_synthetic(classes, per_class, shape, 0, separation)
    te = make_synthetic(classes, 20, shape, 0, separation, split="test")
    return tr, te


def verdict(results):
    adv_beats_normal = all(
        r.robust[a, "adversarial"] > r.robust[a, "normal"] for r in results for a in ("baseline", "moe"))
    moe_wins = sum(r.robust["moe", "adversarial"] >= r.robust["baseline", "adversarial"] for r in results)
    return adv_beats_normal, moe_wins


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", choices=["cifar100", "synthetic"], default="cifar100")
    ap.add_argument("--root", default=None)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="results/adversarial_benefit")
    args = ap.parse_args()
    torch.set_num_threads(1)

    if args.data == "cifar100":
        tr, te = cifar_subset(args.root)
        proto = BenefitProtocol(epochs=args.epochs)
    else:
        tr, te = synthetic()
        proto = BenefitProtocol(epochs=args.epochs, shape=(3, 16, 16))

    def show(seed, arch, regime, clean, robust):
        print(f"seed {seed}  {arch:8s} {regime:11s} clean {clean:.3f}  pgd20 {robust:.3f}", flush=True)

    results = benefit_study(proto, tr, te, range(args.seeds), progress=show)
    rows = [{"seed": r.seed, "arch": a, "regime": g, "clean": r.clean[a, g], "pgd20": r.robust[a, g]}
            for r in results for (a, g) in r.clean]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_table(args.out, "adversarial_benefit", rows)
    ok, wins = verdict(results)
    print(f"adversarial > normal in every seed and arch: {ok}; adversarial MoE >= baseline in {wins}/{len(results)}")


if __name__ == "__main__":
    main()
