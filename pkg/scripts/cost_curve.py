"""Parameter and FLOP counts of ResNet-18 + BlockMoE for N in {2..32}, k in {1, N/2, N}.

    python3 scripts/cost_curve.py --out results/cost
"""
import argparse

from moe_robust.diagnostics import cost_curve, cost_rows, write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="resnet18")
    ap.add_argument("--kind", choices=["block", "conv"], default="block")
    ap.add_argument("--out", default="results/cost")
    args = ap.parse_args()
    rows = cost_curve(args.arch, args.kind, [2, 4, 8, 16, 32], ["1", "N/2", "N"])
    write_table(args.out, "cost", cost_rows(rows))
    print(f"{'N':>3} {'k':>3} {'params':>12} {'MFLOPs':>10}")
    for r in rows:
        print(f"{r.n_experts:>3} {r.k:>3} {r.parameters:>12,} {r.flops_per_input / 1e6:>10.1f}")


if __name__ == "__main__":
    main()
