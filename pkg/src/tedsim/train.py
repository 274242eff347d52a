"""End-to-end simulated training: every rank on its own thread, one shared fabric."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tedsim.fabric import Fabric, Phase, run_ranks
from tedsim.moe import (
    Flags,
    MoeModelConfig,
    TedRank,
    check_flags,
    init_params,
    make_batch,
    make_group_handles,
    serial_reference_step,
)
from tedsim.topology import TedConfig, build_groups
from tedsim.zero import AdamWHyper, MemoryLedger, TileConfig, ZeroOptimizer, replicated_adamw


@dataclass
class SimResult:
    cfg: TedConfig
    model: MoeModelConfig
    flags: Flags
    losses: list[float]
    ranks: list[TedRank]
    fabric: Fabric
    outputs: list[np.ndarray] = field(default_factory=list)
    memory: list[MemoryLedger] = field(default_factory=list)
    grads: list[dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def ledger(self):
        return self.fabric.ledger


def simulate(
    model: MoeModelConfig,
    cfg: TedConfig,
    flags: Flags = Flags(),
    *,
    steps: int = 1,
    optimize: bool = True,
    tile: TileConfig | None = TileConfig(),
    hyper: AdamWHyper = AdamWHyper(),
    trace: bool = False,
    timeout: float = 60.0,
) -> SimResult:
    """Run ``steps`` iterations of forward, backward, grad sync and (optionally) the ZeRO step.

    ``grads`` in the result are each rank's synchronized gradients from the
    last step, captured before the optimizer update.
    """
    check_flags(flags, model, cfg)
    fabric = Fabric(cfg.world_size, timeout=timeout)
    handles = make_group_handles(fabric, build_groups(cfg))
    ranks = [
        TedRank(fabric, model, cfg, handles[r], r, flags, trace={} if trace else None) for r in range(cfg.world_size)
    ]
    opts = [
        ZeroOptimizer(r, ranks[r].nonexpert_params(), ranks[r].expert_params(), handles[r].nonexp_data, handles[r].exp_data, hyper, tile)
        for r in range(cfg.world_size)
    ] if optimize else []

    losses: list[float] = []
    outputs: list[np.ndarray] = []
    grads: list[dict] = []
    n = model.tokens
    for step in range(steps):
        batch = make_batch(model, cfg.data_nonexp, step)

        def work(r: int):
            rk = ranks[r]
            rk.zero_grad()
            c = cfg.column(r)
            loss, out = rk.forward_backward(batch[c * n : (c + 1) * n])
            rk.grad_sync()
            snap = {k: p.grad.copy() for k, p in rk.params.items()}
            if optimize:
                opts[r].step(fabric.bind(r, Phase.OPTIM))
            return loss, out, snap

        results = run_ranks(fabric, work)
        # Tensor ranks hold identical partial losses; count each shard once, in column order.
        leaders = [r for r in range(cfg.world_size) if cfg.coords(r)[0] == 0]
        total = 0.0
        for r in sorted(leaders, key=cfg.column):
            total += results[r][0]
        losses.append(total)
        outputs = [res[1] for res in results]
        grads = [res[2] for res in results]

    memory = [opts[r].memory(ranks[r].mem_peak) for r in range(cfg.world_size)] if optimize else []
    return SimResult(cfg, model, flags, losses, ranks, fabric, outputs, memory, grads)


def assemble_full(model: MoeModelConfig, cfg: TedConfig, per_rank: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Stitch rank shards back into full serial-layout tensors (checking replicas agree)."""
    full_params = init_params(model)
    out: dict[str, np.ndarray] = {}
    for name, proto in full_params.items():
        buf = np.full(proto.value.shape, np.nan)
        for r, shards in enumerate(per_rank):
            if name not in shards:
                continue
            t, e, _ = cfg.coords(r)
            kind = proto.partition.kind
            if kind == "none" or cfg.tensor == 1:
                view = buf
            else:
                from tedsim.tensor import Partition

                view = Partition(kind, t, cfg.tensor).take(buf)
            view[...] = shards[name]
        out[name] = buf
    return out


def max_abs_diff_vs_serial(sim: SimResult, serial_grads: dict[str, np.ndarray]) -> float:
    """Largest |parallel - serial| over every shard of every gradient on every rank."""
    from tedsim.tensor import Partition

    worst = 0.0
    for r, shards in enumerate(sim.grads):
        t = sim.cfg.coords(r)[0]
        for name, g in shards.items():
            part = sim.ranks[r].params[name].partition
            ref = Partition(part.kind, t if part.kind != "none" else 0, part.parts).take(serial_grads[name])
            worst = max(worst, float(np.max(np.abs(g - ref), initial=0.0)))
    return worst


def serial_train(model: MoeModelConfig, shards: int, steps: int = 1, hyper: AdamWHyper = AdamWHyper()):
    """Serial reference for multi-step training with a replicated (unsharded) AdamW."""
    params = init_params(model)
    names = list(params)
    state = None
    losses = []
    for step in range(steps):
        res = serial_reference_step(model, make_batch(model, shards, step), params)
        losses.append(res.loss)
        flat_p = np.concatenate([params[k].value.ravel() for k in names])
        flat_g = np.concatenate([res.grads[k].ravel() for k in names])
        new, state = replicated_adamw(flat_p, flat_g, state, hyper)
        off = 0
        for k in names:
            size = params[k].value.size
            params[k].value = new[off : off + size].reshape(params[k].value.shape)
            off += size
    return losses, params
