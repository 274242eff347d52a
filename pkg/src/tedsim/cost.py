"""Closed-form parameter, memory and communication models.

Memory bounds cover model states only (parameters, gradients, optimizer
states) under ZeRO stage-1 mixed precision: ``(4 + 12/G_data)`` bytes per
parameter held by a GPU. All byte math is exact (``Fraction``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

from tedsim.fabric import COUNT_WIDTH, GroupKind, InvalidConfigError, Op, Phase, Width
from tedsim.moe import Flags, MoeModelConfig, local_param_counts
from tedsim.topology import TedConfig, derive_config

# Base-model sizes of the GPT-3 family used for the MoE experiments.
GPT3_BASE_SIZES = (1_300_000_000, 2_700_000_000, 6_700_000_000, 13_000_000_000)


@dataclass(frozen=True)
class ModelSpec:
    np_base: int
    experts: int

    def __post_init__(self) -> None:
        if self.np_base <= 0:
            raise InvalidConfigError(f"base model must have parameters, got {self.np_base}")
        if self.experts < 1:
            raise InvalidConfigError(f"need at least one expert, got {self.experts}")


def expert_params(spec: ModelSpec) -> Fraction:
    """Half the layers carry E copies of a feed-forward block (2/3 of the base)."""
    return Fraction(spec.experts * spec.np_base, 3)


def nonexpert_params(spec: ModelSpec) -> Fraction:
    return Fraction(2 * spec.np_base, 3)


def total_params(spec: ModelSpec) -> Fraction:
    return expert_params(spec) + nonexpert_params(spec)


def zero_stage1_bytes(np_nonexp_gpu, np_exp_gpu, g_data_nonexp: int, g_data_exp: int) -> Fraction:
    """Per-GPU model-state bytes with separate data-parallel degrees for the two parameter kinds."""
    return (4 + Fraction(12, g_data_nonexp)) * Fraction(np_nonexp_gpu) + (4 + Fraction(12, g_data_exp)) * Fraction(
        np_exp_gpu
    )


@dataclass(frozen=True)
class MemoryEstimate:
    bytes: Fraction
    nonexpert_term: Fraction
    expert_term: Fraction
    closed_form: Fraction


def memory_lower_bound(spec: ModelSpec, world_size: int, tensor: int) -> MemoryEstimate:
    cfg = derive_config(world_size, tensor, spec.experts)
    np_ne_gpu = nonexpert_params(spec) / cfg.tensor
    np_e_gpu = expert_params(spec) / (cfg.tensor * spec.experts)
    ne = (4 + Fraction(12, cfg.data_nonexp)) * np_ne_gpu
    ex = (4 + Fraction(12, cfg.data_exp)) * np_e_gpu
    closed = 4 * spec.np_base * (Fraction(1, cfg.tensor) + Fraction(spec.experts + 2, world_size))
    return MemoryEstimate(ne + ex, ne, ex, closed)


def max_base_model(mem_bytes, world_size: int | None, tensor: int, experts: int, *, asymptotic: bool = False) -> int:
    """Largest base model whose model states fit in ``mem_bytes`` per GPU."""
    if mem_bytes <= 0 or tensor < 1 or experts < 1:
        raise InvalidConfigError("memory, tensor degree and experts must be positive")
    m = Fraction(mem_bytes)
    if asymptotic:
        return math.floor(Fraction(tensor, 4) * m)
    if not world_size or world_size < 1:
        raise InvalidConfigError("finite bound needs a positive GPU count")
    return math.floor(m / (4 * (Fraction(1, tensor) + Fraction(experts + 2, world_size))))


@dataclass(frozen=True)
class PlanResult:
    framework: str
    world_size: int
    tensor: int | None
    experts: int | None
    np_base: int | None
    total_params: int | None
    bytes_bound: int | None

    @property
    def fits(self) -> bool:
        return self.np_base is not None


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _best(framework, mem, G, tensors, e_min, e_max, candidates, strict) -> PlanResult:
    best = None
    for T in tensors:
        if strict and G % T:
            continue
        if strict:
            e_options = [e for e in _divisors(G // T) if e_min <= e <= e_max]
        else:
            e_options = range(e_min, e_max + 1)
        for np_base in candidates:
            for E in e_options:
                bound = 4 * np_base * (Fraction(1, T) + Fraction(E + 2, G))
                if bound > mem:
                    continue
                total = Fraction(np_base * (E + 2), 3)
                key = (total, -T, -E)
                if best is None or key > best[0]:
                    best = (key, T, E, np_base, total, bound)
    if best is None:
        return PlanResult(framework, G, None, None, None, None, None)
    _, T, E, np_base, total, bound = best
    return PlanResult(framework, G, T, E, np_base, math.floor(total), math.ceil(bound))


def plan_largest_model(
    mem_bytes,
    world_size: int,
    tensor_max: int = 6,
    experts_max: int = 128,
    candidates: Sequence[int] = GPT3_BASE_SIZES,
    *,
    experts_min: int = 4,
    strict: bool = True,
) -> dict:
    """Largest MoE (by total parameters) that fits, for TED and for a tensor-degree-1 baseline.

    ``strict`` keeps the simulator's divisibility rules (G_tensor | G and
    E | G/G_tensor); ``strict=False`` is a what-if mode that drops them.
    """
    candidates = sorted(candidates)
    mem = Fraction(mem_bytes)
    ted = _best("ted", mem, world_size, range(1, tensor_max + 1), experts_min, experts_max, candidates, strict)
    base = _best("baseline", mem, world_size, [1], experts_min, experts_max, candidates, strict)
    ratio = None
    if ted.fits and base.fits:
        ratio = float(Fraction(ted.np_base * (ted.experts + 2), base.np_base * (base.experts + 2)))
    return {"ted": ted, "baseline": base, "ratio": ratio}


PLAN_COLUMNS = ("G", "framework", "G_tensor", "E", "NP_base", "total_params", "bytes_bound", "ratio")


def planner_table(mem_bytes, gpu_counts: Sequence[int], tensor_max: int = 6, experts_max: int = 128, **kw) -> list[dict]:
    rows = []
    for G in gpu_counts:
        plan = plan_largest_model(mem_bytes, G, tensor_max, experts_max, **kw)
        for key in ("ted", "baseline"):
            r: PlanResult = plan[key]
            rows.append(
                {
                    "G": G,
                    "framework": r.framework,
                    "G_tensor": r.tensor,
                    "E": r.experts,
                    "NP_base": r.np_base,
                    "total_params": r.total_params,
                    "bytes_bound": r.bytes_bound,
                    "ratio": plan["ratio"],
                }
            )
    return rows


# -- communication volume ------------------------------------------------------


def predict_comm_volume(
    model: MoeModelConfig,
    cfg: TedConfig,
    flags: Flags = Flags(),
    steps: int = 1,
    *,
    optimize: bool = True,
) -> list[dict]:
    """Ledger records (same schema and order as ``CommLedger.records``) predicted in closed form.

    Every rank sends ``tokens`` rows of width ``hidden`` into each tensor
    all-reduce and, without token dropping, into each all-to-all; with it,
    ``tokens / G_tensor`` rows. The per-rank row counts at the experts vary
    with routing but their sum over ranks does not, so the totals are exact.
    """
    from tedsim.fabric import CommLedger, LedgerEntry

    G, T, E = cfg.world_size, cfg.tensor, cfg.experts
    n, h = model.tokens, model.hidden
    w = int(Width.HALF)
    dtd = flags.dtd and T > 1 and E > 1
    rows_a2a = n // T if dtd else n
    ledger = CommLedger()

    def add(phase, kind, op, calls, payload, meta=0):
        if calls == 0:
            return
        entry = ledger.entries.setdefault((phase, kind, op), LedgerEntry())
        entry.rank_calls[0] += calls
        entry.payload_bytes += payload
        entry.metadata_bytes += meta

    passes = [Phase.FORWARD, Phase.BACKWARD]
    if flags.ckpt and not flags.cac_active:
        passes.append(Phase.RECOMPUTE)
    for _ in range(steps):
        for phase in passes:
            for l in range(model.layers):
                if T > 1:
                    add(phase, GroupKind.TENSOR, Op.ALL_REDUCE, 2, 2 * G * n * h * w)
                if not model.is_moe_layer(l):
                    continue
                if E > 1:
                    add(phase, GroupKind.EXPERT, Op.ALL_TO_ALL, 2, 2 * G * rows_a2a * h * w, 2 * G * E * COUNT_WIDTH)
                if dtd:
                    # One variable-count gather (after dispatch) and one fixed-size gather (after return).
                    add(phase, GroupKind.TENSOR, Op.ALL_GATHER, 2, 2 * G * (n // T) * h * w, G * T * COUNT_WIDTH)
        ne, ex = local_param_counts(model, T)
        for count, kind, deg in ((ne, GroupKind.DATA_NONEXP, cfg.data_nonexp), (ex, GroupKind.DATA_EXP, cfg.data_exp)):
            if deg == 1 or count == 0:
                continue
            add(Phase.GRAD_SYNC, kind, Op.ALL_REDUCE, 1, G * count * w)
            if optimize:
                add(Phase.OPTIM, kind, Op.ALL_GATHER, 1, (G // deg) * count * w, G * deg * COUNT_WIDTH)
    return ledger.records()


def plan_row_dict(r: PlanResult) -> dict:
    return asdict(r)
