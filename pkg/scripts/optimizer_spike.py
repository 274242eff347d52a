"""Transient up-cast memory of one optimizer step vs tile size.

Uses the expert-heavy layout where each expert's optimizer state lives on a
single rank, so a whole expert is up-cast at once unless tiled.
"""

import argparse

import numpy as np

from tedsim.zero import DEFAULT_TILE_SIZE, OptimizerShard, TileConfig, optimizer_step_tiled


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--params", type=int, default=5_000_000)
    ap.add_argument("--tiles", type=int, nargs="+", default=[100_000, 500_000, DEFAULT_TILE_SIZE, 10_000_000])
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    flat, grads = rng.standard_normal(args.params), rng.standard_normal(args.params)
    ref = optimizer_step_tiled(OptimizerShard.from_flat(0, 0, flat.size, flat), grads, None)
    print(f"untiled: {4 * args.params / 1e6:.1f} MB")
    for ts in args.tiles:
        shard = OptimizerShard.from_flat(0, 0, flat.size, flat)
        out = optimizer_step_tiled(shard, grads, TileConfig(ts))
        same = "bitwise equal" if np.array_equal(out, ref) else "DIFFERS"
        print(f"ts={ts:>10}: {shard.last_tiles:>3} tiles, peak {shard.peak_upcast_bytes / 1e6:7.1f} MB, {same}")


if __name__ == "__main__":
    main()
