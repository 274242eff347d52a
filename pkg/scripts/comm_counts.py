"""Collective counts and bytes per phase for one MoE layer, across the dtd/cac/ckpt flags."""

import argparse
import itertools
import warnings

from tedsim.fabric import Op, Phase
from tedsim.moe import Flags, MoeModelConfig
from tedsim.topology import derive_config
from tedsim.train import simulate

COMPUTE = (Phase.FORWARD, Phase.RECOMPUTE, Phase.BACKWARD)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--world-size", type=int, default=8)
    ap.add_argument("--tensor-parallel", type=int, default=2)
    ap.add_argument("--experts", type=int, default=2)
    ap.add_argument("--tokens", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=16)
    args = ap.parse_args()

    cfg = derive_config(args.world_size, args.tensor_parallel, args.experts)
    model = MoeModelConfig(layers=1, hidden=args.hidden, experts=args.experts, tokens=args.tokens, seed=0)
    print(f"{'dtd':>4}{'cac':>4}{'ckpt':>5} | {'a2a':>4}{'ar':>4}{'ag':>4} | {'a2a bytes':>10}{'ar bytes':>10}{'ag bytes':>10}")
    for dtd, ckpt, cac in itertools.product((False, True), repeat=3):
        if cac and not ckpt:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            led = simulate(model, cfg, Flags(dtd, cac, ckpt), optimize=False).ledger
        calls = [sum(led.calls(phase=ph, op=op) for ph in COMPUTE) for op in Op]
        nbytes = [led.payload_bytes(phase=list(COMPUTE), op=op) for op in Op]
        print(
            f"{int(dtd):>4}{int(cac):>4}{int(ckpt):>5} | {calls[2]:>4}{calls[0]:>4}{calls[1]:>4} | "
            f"{nbytes[2]:>10}{nbytes[0]:>10}{nbytes[1]:>10}"
        )


if __name__ == "__main__":
    main()
