import random
from fractions import Fraction

import pytest

from tedsim.cost import (
    ModelSpec,
    expert_params,
    max_base_model,
    memory_lower_bound,
    nonexpert_params,
    plan_largest_model,
    planner_table,
    predict_comm_volume,
    total_params,
    zero_stage1_bytes,
)
from tedsim.fabric import InvalidConfigError
from tedsim.moe import Flags, MoeModelConfig
from tedsim.topology import derive_config
from tedsim.train import simulate


def test_headline_parameter_totals():
    big = ModelSpec(6_700_000_000, 16)
    assert abs(float(expert_params(big)) - 35.73e9) / 35.73e9 < 1e-3
    assert abs(float(total_params(big)) - 40.2e9) < 1e6
    assert abs(float(total_params(ModelSpec(1_300_000_000, 4))) - 2.6e9) < 1e6
    assert expert_params(ModelSpec(7, 3)) == 7
    assert nonexpert_params(ModelSpec(3, 1)) == 2
    assert abs(float(nonexpert_params(ModelSpec(6_700_000_000, 1))) - 4.467e9) < 1e6
    with pytest.raises(InvalidConfigError):
        ModelSpec(1, 0)
    with pytest.raises(InvalidConfigError):
        ModelSpec(0, 2)


def test_total_is_base_times_experts_plus_two_over_three():
    rng = random.Random(0)
    for _ in range(200):
        spec = ModelSpec(rng.randint(1, 10**12), rng.randint(1, 512))
        assert total_params(spec) == Fraction(spec.np_base * (spec.experts + 2), 3)


def test_bound_example():
    est = memory_lower_bound(ModelSpec(6_700_000_000, 16), 128, 4)
    assert est.closed_form == 4 * 6_700_000_000 * (Fraction(1, 4) + Fraction(18, 128))
    assert abs(float(est.bytes) - 10.47e9) < 0.01e9


def test_two_term_equals_closed_form_sweep():
    rng = random.Random(1)
    n = 0
    while n < 300:
        G = 2 ** rng.randint(0, 12)
        T = 2 ** rng.randint(0, 4)
        E = 2 ** rng.randint(0, 8)
        if G % T or (G // T) % E:
            continue
        spec = ModelSpec(rng.randint(10**6, 10**11), E)
        est = memory_lower_bound(spec, G, T)
        assert est.bytes == est.closed_form
        n += 1


def test_tensor_one_is_baseline_bound():
    spec = ModelSpec(1_300_000_000, 8)
    est = memory_lower_bound(spec, 64, 1)
    ne = (4 + Fraction(12, 64)) * nonexpert_params(spec)
    ex = (4 + Fraction(12, 8)) * expert_params(spec) / 8
    assert est.bytes == ne + ex


def test_large_world_limit():
    spec = ModelSpec(10**9, 4)
    limit = 4 * spec.np_base / Fraction(2)
    gaps = [memory_lower_bound(spec, 2**k * 8, 2).bytes - limit for k in range(2, 20)]
    assert all(g > 0 for g in gaps) and gaps == sorted(gaps, reverse=True)
    assert gaps[-1] / limit < 1e-4


def test_zero_stage1_bytes_terms():
    assert zero_stage1_bytes(100, 0, 4, 1) == 4 * 100 + 12 * 100 / Fraction(4)
    assert zero_stage1_bytes(0, 10, 1, 1) == 160


def test_asymptotic_and_finite_capacity():
    assert max_base_model(16e9, None, 6, 128, asymptotic=True) == 24_000_000_000
    assert max_base_model(16e9, None, 1, 128, asymptotic=True) == 4_000_000_000
    finite = max_base_model(16e9, 512, 6, 128)
    assert finite < 24_000_000_000
    for T in (2, 4, 8):
        big = max_base_model(16e9, 2**30, T, 4) / max_base_model(16e9, 2**30, 1, 4)
        assert abs(big - T) < 1e-6
    with pytest.raises(InvalidConfigError):
        max_base_model(0, 8, 1, 1)
    with pytest.raises(InvalidConfigError):
        max_base_model(16e9, None, 1, 1)


def test_capacity_monotone_in_world_and_tensor():
    prev = 0
    for G in (8, 16, 64, 512, 4096):
        cur = max_base_model(16e9, G, 4, 8)
        assert cur >= prev
        prev = cur
    vals = [max_base_model(16e9, 512, T, 8) for T in (1, 2, 4, 8)]
    assert vals == sorted(vals)


def test_planner_tensor_cap_one_is_identity():
    for row in planner_table(16e9, [32, 64, 128, 256, 512], tensor_max=1):
        assert row["ratio"] == 1.0
    plan = plan_largest_model(16e9, 64, tensor_max=1)
    assert plan["ted"].np_base == plan["baseline"].np_base


def test_planner_respects_memory_and_divisibility():
    for G in (32, 64, 128, 256, 512):
        plan = plan_largest_model(16e9, G)
        for r in (plan["ted"], plan["baseline"]):
            assert r.fits and r.bytes_bound <= 16e9
            derive_config(G, r.tensor, r.experts)
        assert plan["ted"].total_params >= plan["baseline"].total_params
    assert not plan_largest_model(1e6, 32)["ted"].fits


def test_continuous_relaxation_ratio_increases():
    # without discrete base sizes or divisibility, the capacity ratio grows with G
    rs = [Fraction(max_base_model(16e9, G, 6, 128)) / max_base_model(16e9, G, 1, 128) for G in (32, 64, 128, 256, 512)]
    assert rs == sorted(rs)


def _a2a(records, **sel):
    return sum(r["payload_bytes"] for r in records if all(r[k] == v for k, v in sel.items()))


def test_predicted_counts_for_checkpointed_moe_layer():
    model = MoeModelConfig(layers=1, hidden=8, experts=2, tokens=8)
    cfg = derive_config(4, 2, 2)
    recs = predict_comm_volume(model, cfg, Flags(ckpt=True), optimize=False)
    compute = [r for r in recs if r["phase"] in ("forward", "recompute", "backward")]
    assert sum(r["calls"] for r in compute if r["op"] == "all-to-all") == 6
    assert sum(r["calls"] for r in compute if r["op"] == "all-reduce") == 6


@pytest.mark.parametrize("T", [2, 4])
def test_predicted_dtd_volume(T):
    model = MoeModelConfig(layers=1, hidden=8, experts=2, tokens=8)
    cfg = derive_config(4 * T, T, 2)
    plain = predict_comm_volume(model, cfg, Flags())
    dtd = predict_comm_volume(model, cfg, Flags(dtd=True))
    assert _a2a(dtd, op="all-to-all") * T == _a2a(plain, op="all-to-all")
    gathers = [r for r in dtd if r["op"] == "all-gather" and r["group_kind"] == "tensor"]
    assert sum(r["calls"] for r in gathers) == 4


def test_prediction_equals_measurement_small():
    model = MoeModelConfig(layers=3, hidden=8, experts=4, tokens=16, seed=9)
    for flags in (Flags(), Flags(dtd=True, ckpt=True), Flags(dtd=True, ckpt=True, cac=True)):
        cfg = derive_config(8, 2, 4)
        sim = simulate(model, cfg, flags, steps=2)
        assert sim.ledger.records() == predict_comm_volume(model, cfg, flags, steps=2)


def test_bound_nonincreasing_in_world_and_tensor():
    spec = ModelSpec(2_700_000_000, 8)
    by_g = [memory_lower_bound(spec, G, 2).bytes for G in (16, 32, 64, 128, 1024)]
    assert by_g == sorted(by_g, reverse=True)
    by_t = [memory_lower_bound(spec, 256, T).bytes for T in (1, 2, 4, 8, 16, 32)]
    assert by_t == sorted(by_t, reverse=True)


def test_expert_data_degree_identity():
    for G in (1, 2, 4, 8, 16, 32, 64, 128):
        for T in (1, 2, 4, 8):
            for E in (1, 2, 4, 8, 16):
                if G % T == 0 and (G // T) % E == 0:
                    cfg = derive_config(G, T, E)
                    assert cfg.data_exp * E == cfg.data_nonexp
