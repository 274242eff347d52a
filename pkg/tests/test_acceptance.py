"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import itertools
import random
import sys
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest

from tedsim.cost import (
    ModelSpec,
    expert_params,
    max_base_model,
    memory_lower_bound,
    nonexpert_params,
    plan_largest_model,
    predict_comm_volume,
    total_params,
    zero_stage1_bytes,
)
from tedsim.fabric import GroupKind, Op, Phase
from tedsim.moe import Flags, MoeModelConfig, init_params, local_param_counts, make_batch, serial_reference_step
from tedsim.topology import derive_config
from tedsim.train import max_abs_diff_vs_serial, simulate
from tedsim.verify import valid_configs
from tedsim.zero import DEFAULT_TILE_SIZE, OptimizerShard, TileConfig, optimizer_step_tiled, replicated_adamw

COMPUTE = (Phase.FORWARD, Phase.RECOMPUTE, Phase.BACKWARD)


def report(num, title, ok, detail, capsys=None):
    line = f"criterion {num} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


def sweep_models():
    for cfg in valid_configs():
        for L, h, n in itertools.product((1, 2), (8, 16), (8, 16)):
            yield cfg, MoeModelConfig(layers=L, hidden=h, experts=cfg.experts, tokens=n, seed=L * 100 + h + n)


def _compute_calls(led, op):
    return sum(led.calls(phase=ph, op=op) for ph in COMPUTE)


def _compute_bytes(led):
    return sum(led.payload_bytes(phase=ph, op=op) for ph in COMPUTE for op in (Op.ALL_TO_ALL, Op.ALL_REDUCE))


def criterion_1():
    t0 = time.perf_counter()
    model = MoeModelConfig(layers=1, hidden=8, experts=2, tokens=8, seed=0)
    cfg = derive_config(4, 2, 2)
    plain = simulate(model, cfg, Flags(ckpt=True)).ledger
    cac = simulate(model, cfg, Flags(ckpt=True, cac=True)).ledger
    counts = (
        _compute_calls(plain, Op.ALL_TO_ALL),
        _compute_calls(plain, Op.ALL_REDUCE),
        _compute_calls(cac, Op.ALL_TO_ALL),
        _compute_calls(cac, Op.ALL_REDUCE),
    )
    cut = 1 - Fraction(_compute_bytes(cac), _compute_bytes(plain))
    dt = time.perf_counter() - t0
    ok = counts == (6, 6, 4, 4) and cut == Fraction(1, 3) and dt < 1
    return ok, f"a2a/ar without cac {counts[:2]}, with cac {counts[2:]}, byte cut {cut}, {dt:.2f}s"


def criterion_2():
    t0 = time.perf_counter()
    details, ok = [], True
    for T in (2, 4):
        model = MoeModelConfig(layers=2, hidden=8, experts=2, tokens=8, seed=T)
        cfg = derive_config(4 * T, T, 2)
        off = simulate(model, cfg, Flags(), optimize=False).ledger
        on = simulate(model, cfg, Flags(dtd=True), optimize=False).ledger
        a2a_off = off.payload_bytes(op=Op.ALL_TO_ALL)
        a2a_on = on.payload_bytes(op=Op.ALL_TO_ALL)
        gather = on.payload_bytes(kind=GroupKind.TENSOR, op=Op.ALL_GATHER)
        ok &= a2a_on * T == a2a_off and gather > 0 and off.payload_bytes(kind=GroupKind.TENSOR, op=Op.ALL_GATHER) == 0
        details.append(f"T={T}: {a2a_off}->{a2a_on} B, gathers {gather} B")
    dt = time.perf_counter() - t0
    return ok and dt < 1, "; ".join(details) + f", {dt:.2f}s"


def criterion_3():
    t0 = time.perf_counter()
    worst_serial = worst_toggle = 0.0
    n = 0
    toggles = ((Flags(), Flags(dtd=True)), (Flags(), Flags(ckpt=True)), (Flags(ckpt=True), Flags(ckpt=True, cac=True)))
    for cfg, model in sweep_models():
        n += 1
        ref = serial_reference_step(model, make_batch(model, cfg.data_nonexp, 0))
        runs = {}
        for fl in {f for pair in toggles for f in pair}:
            runs[fl] = simulate(model, cfg, fl, optimize=False)
        base = runs[Flags()]
        worst_serial = max(worst_serial, abs(base.losses[0] - ref.loss), max_abs_diff_vs_serial(base, ref.grads))
        for a, b in toggles:
            ra, rb = runs[a], runs[b]
            d = abs(ra.losses[0] - rb.losses[0])
            for ga, gb in zip(ra.grads, rb.grads):
                d = max(d, max(float(np.max(np.abs(ga[k] - gb[k]))) for k in ga))
            worst_toggle = max(worst_toggle, d)
    dt = time.perf_counter() - t0
    ok = worst_serial <= 1e-9 and worst_toggle <= 1e-12 and dt < 60
    return ok, f"{n} configs, serial {worst_serial:.2e}, toggles {worst_toggle:.2e}, {dt:.1f}s"


def criterion_4():
    t0 = time.perf_counter()
    ok = True
    peaks = []
    for G, T, E in ((4, 2, 2), (8, 1, 2), (2, 1, 1)):
        cfg = derive_config(G, T, E)
        m = MoeModelConfig(layers=2, hidden=16, experts=E, tokens=8, seed=4)
        untiled = simulate(m, cfg, tile=None)
        for ts in (1, 7, DEFAULT_TILE_SIZE):
            tiled = simulate(m, cfg, tile=TileConfig(ts))
            for ra, rb in zip(untiled.ranks, tiled.ranks):
                ok &= all(np.array_equal(a.value, b.value) for a, b in zip(ra.params.values(), rb.params.values()))
            for mem in tiled.memory:
                # ts is capped at the rank's owned shard size
                capped = min(ts, mem.optim_states // 12)
                peaks.append(mem.upcast - 4 * capped)
                ok &= mem.upcast <= 4 * capped + 1024
        for rk, grads in zip(untiled.ranks, untiled.grads):
            start = init_params(m, cfg, rk.rank)
            for params in (rk.nonexpert_params(), rk.expert_params()):
                if params:
                    p0 = np.concatenate([start[p.name].value.ravel() for p in params])
                    g = np.concatenate([grads[p.name].ravel() for p in params])
                    ok &= np.array_equal(replicated_adamw(p0, g, None)[0], np.concatenate([p.value.ravel() for p in params]))
    rng = np.random.default_rng(0)
    flat, g = rng.standard_normal(50_000), rng.standard_normal(50_000)
    untiled = optimizer_step_tiled(OptimizerShard.from_flat(0, 0, flat.size, flat), g, None)
    for ts in (1, 7, DEFAULT_TILE_SIZE):
        shard = OptimizerShard.from_flat(0, 0, flat.size, flat)
        ok &= np.array_equal(optimizer_step_tiled(shard, g, TileConfig(ts)), untiled)
        peaks.append(shard.peak_upcast_bytes - 4 * min(ts, flat.size))
        ok &= shard.peak_upcast_bytes <= 4 * min(ts, flat.size) + 1024
    dt = time.perf_counter() - t0
    return ok and dt < 5, f"worst upcast excess {max(peaks)} B, {dt:.2f}s"


def criterion_5():
    t0 = time.perf_counter()
    rng = random.Random(5)
    worst = Fraction(0)
    checked = 0
    while checked < 500:
        G, T, E = 2 ** rng.randint(0, 12), 2 ** rng.randint(0, 4), 2 ** rng.randint(0, 8)
        if G % T or (G // T) % E:
            continue
        est = memory_lower_bound(ModelSpec(rng.randint(10**6, 10**11), E), G, T)
        worst = max(worst, abs(est.bytes - est.closed_form) / est.closed_form)
        checked += 1
    ok = worst <= Fraction(1, 10**12)
    for G, T, E in ((4, 2, 2), (8, 2, 4), (8, 1, 2), (8, 4, 1)):
        cfg = derive_config(G, T, E)
        m = MoeModelConfig(layers=2, hidden=8, experts=E, tokens=8)
        mem = simulate(m, cfg).memory
        ne, ex = local_param_counts(m, T)
        ok &= sum(x.persistent for x in mem) == G * zero_stage1_bytes(ne, ex, cfg.data_nonexp, cfg.data_exp)
    spec = ModelSpec(1_300_000_000, 16)
    base = memory_lower_bound(spec, 64, 1).bytes
    deepspeed = (4 + Fraction(12, 64)) * nonexpert_params(spec) + (4 + Fraction(12, 4)) * expert_params(spec) / 16
    ok &= base == deepspeed
    big = max_base_model(16e9, None, 6, 128, asymptotic=True)
    one = max_base_model(16e9, None, 1, 128, asymptotic=True)
    ok &= big == 24_000_000_000 and big == 6 * one
    dt = time.perf_counter() - t0
    return ok and dt < 1, f"max rel err {float(worst):.1e}, asymptotic {big:.3e} = {big // one}x, {dt:.2f}s"


def criterion_6():
    a = float(total_params(ModelSpec(6_700_000_000, 16)))
    b = float(total_params(ModelSpec(1_300_000_000, 4)))
    ok = abs(a - 40e9) / 40e9 <= 0.01 and abs(b - 2.6e9) / 2.6e9 <= 0.01
    return ok, f"{a / 1e9:.2f}B and {b / 1e9:.2f}B"


def criterion_7():
    t0 = time.perf_counter()
    n = bad = 0
    for cfg, model in sweep_models():
        for dtd, cac, ckpt in itertools.product((False, True), repeat=3):
            fl = Flags(dtd=dtd, cac=cac, ckpt=ckpt)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sim = simulate(model, cfg, fl)
            n += 1
            bad += sim.ledger.records() != predict_comm_volume(model, cfg, fl)
    return bad == 0, f"{n - bad}/{n} runs byte-exact, {time.perf_counter() - t0:.1f}s"


def criterion_8():
    gpus = (32, 64, 128, 256, 512)
    ratios = [plan_largest_model(16e9, G, tensor_max=6, experts_max=128)["ratio"] for G in gpus]
    ok = all(r is not None for r in ratios) and all(a <= b for a, b in zip(ratios, ratios[1:]))
    return ok, "ratios " + ", ".join(f"G={G}: {r:.3f}" for G, r in zip(gpus, ratios))


CRITERIA = {
    1: ("collective counts with and without cac", criterion_1),
    2: ("dtd cuts all-to-all bytes by G_tensor", criterion_2),
    3: ("parallel equals serial, toggles are free", criterion_3),
    4: ("optimizer tiling and sharding are exact", criterion_4),
    5: ("memory model consistency", criterion_5),
    6: ("headline parameter totals", criterion_6),
    7: ("predicted ledger equals measured ledger", criterion_7),
    8: ("planner ratio nondecreasing in G", criterion_8),
}


@pytest.mark.parametrize("num", sorted(CRITERIA))
def test_criterion(num, capsys):
    title, fn = CRITERIA[num]
    ok, detail = fn()
    assert report(num, title, ok, detail, capsys), detail


if __name__ == "__main__":
    results = [report(k, t, *fn()) for k, (t, fn) in sorted(CRITERIA.items())]
    sys.exit(0 if all(results) else 1)
