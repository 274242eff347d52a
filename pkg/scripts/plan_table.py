"""Largest MoE per GPU count for TED and the tensor-degree-1 baseline.

Prints the planner table, then the same sweep with base sizes treated as
continuous (max_base_model) for comparison.
"""

import argparse

from tedsim.cost import max_base_model, planner_table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--memory", type=float, default=16e9)
    ap.add_argument("--gpus", type=int, nargs="+", default=[32, 64, 128, 256, 512])
    ap.add_argument("--tensor-max", type=int, default=6)
    ap.add_argument("--experts-max", type=int, default=128)
    ap.add_argument("--what-if", action="store_true", help="ignore divisibility rules")
    args = ap.parse_args()

    rows = planner_table(args.memory, args.gpus, args.tensor_max, args.experts_max, strict=not args.what_if)
    print(f"{'G':>5} {'framework':>9} {'T':>3} {'E':>4} {'base':>8} {'total':>9} {'bytes':>8} {'ratio':>6}")
    for r in rows:
        print(
            f"{r['G']:>5} {r['framework']:>9} {r['G_tensor']:>3} {r['E']:>4} {r['NP_base'] / 1e9:>7.1f}B "
            f"{r['total_params'] / 1e9:>8.1f}B {r['bytes_bound'] / 1e9:>7.2f}G {r['ratio']:>6.3f}"
        )

    print("\ncontinuous base size, E = experts-max")
    for G in args.gpus:
        ted = max_base_model(args.memory, G, args.tensor_max, args.experts_max)
        base = max_base_model(args.memory, G, 1, args.experts_max)
        print(f"{G:>5}  ted {ted / 1e9:6.2f}B  baseline {base / 1e9:6.2f}B  ratio {ted / base:.3f}")


if __name__ == "__main__":
    main()
