"""ZeRO stage-1 AdamW with tiled gradient up-casting.

Arithmetic is float64 throughout. Byte accounting follows mixed-precision
training: parameters and gradients count 2 bytes per element, the master copy
and both moments 4 bytes each, and the up-cast gradient buffer 4 bytes per
element it can hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tedsim.fabric import Group, Phase, RankComm
from tedsim.tensor import Parameter

PARAM_BYTES = 2
GRAD_BYTES = 2
OPTIM_STATE_BYTES = 12  # master + two moments, 4 bytes each
UPCAST_BYTES = 4

DEFAULT_TILE_SIZE = 1_800_000


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TileConfig:
    ts: int = DEFAULT_TILE_SIZE

    def __post_init__(self) -> None:
        if self.ts < 1:
            raise ValueError(f"tile size must be >= 1, got {self.ts}")


def shard_ranges(total: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous near-equal ranges; the first ``total % parts`` get one extra element."""
    if parts < 1:
        raise ValueError("cannot shard over an empty group")
    base, rem = divmod(total, parts)
    out, lo = [], 0
    for i in range(parts):
        hi = lo + base + (1 if i < rem else 0)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass
class OptimizerShard:
    owner: int
    lo: int
    hi: int
    master: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    peak_upcast_bytes: int = 0
    last_tiles: int = 0

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @classmethod
    def from_flat(cls, owner: int, lo: int, hi: int, flat_params: np.ndarray) -> "OptimizerShard":
        n = hi - lo
        return cls(owner, lo, hi, flat_params[lo:hi].copy(), np.zeros(n), np.zeros(n))


def build_shards(flat_params: np.ndarray, group: Group) -> list[OptimizerShard]:
    if group.size < 1:
        raise ValueError("empty data-parallel group")
    return [
        OptimizerShard.from_flat(owner, lo, hi, flat_params)
        for owner, (lo, hi) in zip(group.members, shard_ranges(flat_params.size, group.size))
    ]


def _adamw_(p, m, v, g, step: int, hp: AdamWHyper) -> None:
    b1, b2 = hp.betas
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    p *= 1 - hp.lr * hp.weight_decay
    p -= hp.lr * (m / c1) / (np.sqrt(v / c2) + hp.eps)


def optimizer_step_tiled(
    shard: OptimizerShard,
    grads: np.ndarray,
    tile: TileConfig | None = None,
    hyper: AdamWHyper = AdamWHyper(),
    buffer: np.ndarray | None = None,
) -> np.ndarray:
    """AdamW over the shard, one tile at a time, through a reused up-cast buffer.

    ``grads`` is the full flat gradient (the shard reads its own range). With
    ``tile=None`` the whole shard is up-cast at once. Returns the updated
    parameter values for the owned range.
    """
    if grads is None or grads.size < shard.hi:
        raise ValueError("missing gradients for the owned range")
    n = shard.size
    ts = n if tile is None else min(tile.ts, n)
    if buffer is None:
        buffer = np.empty(max(ts, 0))
    elif buffer.size < ts:
        raise ValueError(f"up-cast buffer of {buffer.size} elements is smaller than tile {ts}")
    shard.step += 1
    shard.last_tiles = 0
    for lo in range(0, n, max(ts, 1)):
        shard.last_tiles += 1
        hi = min(lo + ts, n)
        g = buffer[: hi - lo]
        g[:] = grads[shard.lo + lo : shard.lo + hi]
        _adamw_(shard.master[lo:hi], shard.m[lo:hi], shard.v[lo:hi], g, shard.step, hyper)
    shard.peak_upcast_bytes = max(shard.peak_upcast_bytes, UPCAST_BYTES * ts)
    return shard.master.copy()


def allgather_updated_params(comm: RankComm, group: Group, shard_values: np.ndarray) -> np.ndarray:
    if group.size == 1:
        return shard_values
    return np.concatenate(comm.all_gather_v(group, shard_values), axis=0)


@dataclass
class MemoryLedger:
    rank: int
    params: int
    grads: int
    optim_states: int
    upcast: int = 0
    cac_stash: int = 0
    checkpoints: int = 0
    activations: int = 0
    by_phase: dict[str, int] = field(default_factory=dict)

    @property
    def persistent(self) -> int:
        return self.params + self.grads + self.optim_states

    @property
    def transient_peak(self) -> int:
        return max(self.by_phase.values(), default=0)

    @property
    def peak_phase(self) -> str | None:
        if not self.by_phase:
            return None
        return max(self.by_phase, key=lambda k: (self.by_phase[k], k))

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "persistent_bytes": {"params": self.params, "grads": self.grads, "optim_states": self.optim_states},
            "transient_peak_bytes": {
                "upcast": self.upcast,
                "cac_stash": self.cac_stash,
                "checkpoints": self.checkpoints,
                "activations": self.activations,
            },
            "by_phase": dict(self.by_phase),
            "peak_phase": self.peak_phase,
        }


class ZeroOptimizer:
    """One rank's ZeRO-1 state: a shard of the non-expert and of the expert parameter space."""

    def __init__(
        self,
        rank: int,
        nonexpert: list[Parameter],
        expert: list[Parameter],
        nonexp_group: Group,
        exp_group: Group,
        hyper: AdamWHyper = AdamWHyper(),
        tile: TileConfig | None = TileConfig(),
    ) -> None:
        self.rank = rank
        self.hyper = hyper
        self.tile = tile
        self.spaces = []
        for params, group in ((nonexpert, nonexp_group), (expert, exp_group)):
            flat = _flat(params, "value")
            lo, hi = shard_ranges(flat.size, group.size)[group.index(rank)]
            self.spaces.append((params, group, OptimizerShard.from_flat(rank, lo, hi, flat)))
        owned = [s.size for _, _, s in self.spaces]
        # Untiled: everything owned is up-cast at once. Tiled: one buffer reused by every tile.
        self.buffer = np.empty(sum(owned) if tile is None else min(tile.ts, max(owned, default=0)))
        self.peak_upcast_bytes = 0

    @property
    def owned(self) -> int:
        return sum(s.size for _, _, s in self.spaces)

    def step(self, comm: RankComm) -> None:
        if comm.phase != Phase.OPTIM:
            raise ValueError("optimizer communication must be tagged with the optim phase")
        off = 0
        for params, group, shard in self.spaces:
            grads = _flat(params, "grad")
            if self.tile is None:
                buf = self.buffer[off : off + shard.size]
                off += shard.size
                updated = optimizer_step_tiled(shard, grads, None, self.hyper, buf)
            else:
                updated = optimizer_step_tiled(shard, grads, self.tile, self.hyper, self.buffer)
            full = allgather_updated_params(comm, group, updated)
            _unflat(full, params)
        self.peak_upcast_bytes = max(self.peak_upcast_bytes, UPCAST_BYTES * self.buffer.size)

    def memory(self, extra: dict | None = None) -> MemoryLedger:
        local = sum(p.value.size for params, _, _ in self.spaces for p in params)
        led = MemoryLedger(
            rank=self.rank,
            params=PARAM_BYTES * local,
            grads=GRAD_BYTES * local,
            optim_states=OPTIM_STATE_BYTES * self.owned,
            upcast=self.peak_upcast_bytes,
        )
        extra = extra or {}
        led.cac_stash = extra.get("cac_stash", 0)
        led.checkpoints = extra.get("checkpoints", 0)
        led.activations = extra.get("activations", 0)
        fwd = led.cac_stash + led.checkpoints + led.activations
        led.by_phase = {"forward": fwd, "backward": fwd, "optim": led.upcast}
        return led


def replicated_adamw(flat_params: np.ndarray, flat_grads: np.ndarray, state: dict | None, hyper: AdamWHyper = AdamWHyper()):
    """Plain unsharded AdamW on a flat vector; returns (new params, state). Reference for ZeRO."""
    if state is None:
        state = {"m": np.zeros_like(flat_params), "v": np.zeros_like(flat_params), "step": 0}
    p = flat_params.copy()
    state["step"] += 1
    _adamw_(p, state["m"], state["v"], flat_grads.copy(), state["step"], hyper)
    return p, state


def _flat(params: list[Parameter], attr: str) -> np.ndarray:
    arrays = [getattr(p, attr).ravel() for p in params]
    return np.concatenate(arrays) if arrays else np.zeros(0)


def _unflat(flat: np.ndarray, params: list[Parameter]) -> None:
    off = 0
    for p in params:
        n = p.value.size
        p.value = flat[off : off + n].reshape(p.value.shape).copy()
        off += n
