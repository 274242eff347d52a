"""Invariant checks shared by the CLI ``verify`` mode and the test-suite."""

from __future__ import annotations

import itertools
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from tedsim.cost import predict_comm_volume, zero_stage1_bytes
from tedsim.fabric import Fabric, Phase, run_ranks
from tedsim.moe import Flags, MoeModelConfig, TedRank, local_param_counts, make_batch, make_group_handles, serial_reference_step
from tedsim.topology import TedConfig, build_groups, derive_config
from tedsim.train import max_abs_diff_vs_serial, simulate
from tedsim.zero import TileConfig, replicated_adamw

SERIAL_TOL = 1e-9
TOGGLE_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def token_roundtrip(model: MoeModelConfig, cfg: TedConfig, flags: Flags = Flags(), seed: int = 0) -> list[str]:
    """Push token ids through dispatch and return on a fresh fabric.

    Returns a list of violations: experts receiving the wrong multiset of
    tokens, or tokens not landing back at their original position.
    """
    fabric = Fabric(cfg.world_size, timeout=30.0)
    handles = make_group_handles(fabric, build_groups(cfg))
    n = model.tokens
    rng = np.random.Generator(np.random.PCG64(seed))
    routing = rng.integers(0, cfg.experts, size=cfg.data_nonexp * n)
    token_ids = np.arange(cfg.data_nonexp * n, dtype=np.float64)

    def work(r: int):
        rk = TedRank(fabric, model, cfg, handles[r], r, flags, params={})
        comm = fabric.bind(r, Phase.FORWARD)
        c = cfg.column(r)
        ids = routing[c * n : (c + 1) * n]
        rows = token_ids[c * n : (c + 1) * n, None]
        plan = rk._plan(ids)
        at_expert = rk._to_experts(comm, rows, plan)
        back = rk._to_sources(comm, at_expert, plan)
        return at_expert[:, 0], back[:, 0]

    results = run_ranks(fabric, work)
    problems = []
    for r, (at_expert, back) in enumerate(results):
        t, e, d = cfg.coords(r)
        cols = [cfg.column(cfg.rank_of(t, j, d)) for j in range(cfg.experts)]
        expected = [tok for c in cols for tok in range(c * n, (c + 1) * n) if routing[tok] == e]
        if Counter(at_expert.astype(int).tolist()) != Counter(expected):
            problems.append(f"rank {r}: expert {e} received the wrong tokens")
        c = cfg.column(r)
        if not np.array_equal(back, token_ids[c * n : (c + 1) * n]):
            problems.append(f"rank {r}: tokens did not return to their original positions")
    return problems


def _grads_diff(a, b) -> float:
    worst = 0.0
    for ga, gb in zip(a.grads, b.grads):
        for k in ga:
            worst = max(worst, float(np.max(np.abs(ga[k] - gb[k]), initial=0.0)))
    return worst


def _params_equal(a, b) -> bool:
    return all(
        np.array_equal(pa.value, pb.value)
        for ra, rb in zip(a.ranks, b.ranks)
        for pa, pb in zip(ra.params.values(), rb.params.values())
    )


def check_config(model: MoeModelConfig, cfg: TedConfig, flags: Flags = Flags()) -> list[CheckResult]:
    tag = f"G={cfg.world_size} T={cfg.tensor} E={cfg.experts} L={model.layers} h={model.hidden} n={model.tokens}"
    out: list[CheckResult] = []
    serial = serial_reference_step(model, make_batch(model, cfg.data_nonexp, 0))

    base = simulate(model, cfg, flags)
    d_grad = max_abs_diff_vs_serial(base, serial.grads)
    d_loss = abs(base.losses[0] - serial.loss)
    out.append(CheckResult(f"serial equivalence [{tag}]", max(d_grad, d_loss) <= SERIAL_TOL, f"max abs diff {max(d_grad, d_loss):.3g}"))

    for name in ("dtd", "cac", "ckpt"):
        toggled = Flags(**{**flags.__dict__, name: not getattr(flags, name)})
        if name == "cac" and not toggled.ckpt:
            toggled = Flags(**{**toggled.__dict__, "ckpt": True})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            other = simulate(model, cfg, toggled)
        diff = max(_grads_diff(base, other), abs(base.losses[0] - other.losses[0]))
        out.append(CheckResult(f"{name} toggle equivalence [{tag}]", diff <= TOGGLE_TOL, f"max abs diff {diff:.3g}"))

    for dtd, cac, ckpt in itertools.product((False, True), repeat=3):
        fl = Flags(dtd=dtd, cac=cac, ckpt=ckpt)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sim = simulate(model, cfg, fl)
        ok = sim.ledger.records() == predict_comm_volume(model, cfg, fl)
        out.append(CheckResult(f"ledger == prediction dtd={int(dtd)} cac={int(cac)} ckpt={int(ckpt)} [{tag}]", ok))

    if flags.cac and not flags.ckpt:
        plain = simulate(model, cfg, Flags(dtd=flags.dtd, corrupt_drop=flags.corrupt_drop))
        same = plain.losses == base.losses and plain.ledger.records() == base.ledger.records()
        out.append(CheckResult(f"cac without ckpt is a no-op [{tag}]", same and _grads_diff(base, plain) == 0.0))

    problems = token_roundtrip(model, cfg, flags)
    out.append(CheckResult(f"token conservation [{tag}]", not problems, "; ".join(problems[:3])))

    untiled = simulate(model, cfg, flags, tile=None)
    tiled = simulate(model, cfg, flags, tile=TileConfig(7))
    out.append(CheckResult(f"tiled == untiled optimizer [{tag}]", _params_equal(untiled, tiled)))

    ok = True
    for rk, grads in zip(base.ranks, base.grads):
        for params in (rk.nonexpert_params(), rk.expert_params()):
            if not params:
                continue
            p0 = np.concatenate([base_value(model, cfg, rk.rank, p.name).ravel() for p in params])
            g = np.concatenate([grads[p.name].ravel() for p in params])
            ref, _ = replicated_adamw(p0, g, None)
            got = np.concatenate([p.value.ravel() for p in params])
            ok &= bool(np.array_equal(ref, got))
    out.append(CheckResult(f"sharded == replicated optimizer [{tag}]", ok))

    ne, ex = local_param_counts(model, cfg.tensor)
    eq4 = zero_stage1_bytes(ne, ex, cfg.data_nonexp, cfg.data_exp)
    mean = sum(m.persistent for m in base.memory) / len(base.memory)
    out.append(CheckResult(f"persistent bytes == model-state formula [{tag}]", mean == eq4, f"{mean} vs {eq4}"))
    return out


_INIT_CACHE: dict = {}


def base_value(model: MoeModelConfig, cfg: TedConfig, rank: int, name: str) -> np.ndarray:
    from tedsim.moe import init_params

    key = (model, cfg, rank)
    if key not in _INIT_CACHE:
        _INIT_CACHE.clear()
        _INIT_CACHE[key] = init_params(model, cfg, rank)
    return _INIT_CACHE[key][name].value


def valid_configs(worlds=(1, 2, 4, 8), experts=(1, 2, 4)) -> list[TedConfig]:
    out = []
    for G in worlds:
        for T in range(1, G + 1):
            for E in experts:
                if G % T == 0 and (G // T) % E == 0:
                    out.append(derive_config(G, T, E))
    return out


def builtin_sweep(layers: int = 2, hidden: int = 8, tokens: int = 8, seed: int = 0) -> list[CheckResult]:
    results = []
    for cfg in valid_configs():
        model = MoeModelConfig(layers=layers, hidden=hidden, experts=cfg.experts, tokens=tokens, seed=seed)
        results.extend(check_config(model, cfg))
    return results
