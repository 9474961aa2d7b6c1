import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedskew.analysis import (
    BoundInputs,
    ProbeSpec,
    bound_inputs_from_run,
    bound_rhs,
    check_bound,
    class_gradient_norms,
    divergence_vs_emd_sweep,
    estimate_lipschitz,
    g_max,
    verify_bound,
    weight_divergence,
)
from fedskew.data import (
    ClassDistribution,
    LabeledDataset,
    PartitionSpec,
    gen_synthetic,
    gen_target_emd_distribution,
    partition,
    shift_distribution,
)
from fedskew.errors import BoundInputError, ConfigError, DegenerateReferenceError, EmptyClassError
from fedskew.federation import FedConfig, run_deterministic_pair
from fedskew.model import ModelParams, class_conditional_grad, init_params


# ------------------------------------------------------ weight divergence


def test_divergence_of_identical_models():
    w = init_params([4, 5, 3], seed=0)
    rep = weight_divergence(w, w)
    assert rep.total == 0 and all(v == 0 for _, v in rep.per_layer)


def test_divergence_of_doubled_model():
    w = init_params([4, 5, 3], seed=0)
    rep = weight_divergence(2 * w, w)
    assert rep.total == pytest.approx(1.0, abs=1e-15)
    assert [name for name, _ in rep.per_layer] == ["dense0", "dense1"]
    assert all(v == pytest.approx(1.0, abs=1e-15) for _, v in rep.per_layer)


def test_divergence_hand_norm():
    ref = ModelParams(((np.array([[3.0, 4.0]]), np.zeros(1)),))
    fed = ModelParams(((np.array([[3.0, 8.0]]), np.zeros(1)),))
    assert weight_divergence(fed, ref).total == pytest.approx(0.8, abs=1e-15)


def test_divergence_zero_reference():
    z = ModelParams.zeros_like(init_params([2, 2], 0))
    with pytest.raises(DegenerateReferenceError):
        weight_divergence(init_params([2, 2], 0), z)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(-5, 5))
def test_divergence_homogeneous(seed, c):
    ref = init_params([3, 4, 2], seed=seed)
    d = init_params([3, 4, 2], seed=seed + 1)
    lhs = weight_divergence(ref + c * d, ref)
    rhs = weight_divergence(ref + d, ref)
    assert lhs.total == pytest.approx(abs(c) * rhs.total, rel=1e-9, abs=1e-12)
    for (_, a), (_, b) in zip(lhs.per_layer, rhs.per_layer):
        assert a == pytest.approx(abs(c) * b, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- g_max


def test_gmax_single_class():
    data = LabeledDataset(np.random.default_rng(0).standard_normal((6, 2)), np.zeros(6, int), 1)
    w = init_params([2, 3, 1], seed=0)
    assert g_max(w, data) == class_conditional_grad(w, data, 0).norm()


@pytest.mark.parametrize("seed", range(5))
def test_gmax_dominates_mixture_norm(seed):
    data = gen_synthetic(4, 3, 5 + seed, 1.5, seed=seed)
    w = init_params([3, 5, 4], seed=seed, scale=2.0)
    p = data.class_counts() / len(data)
    norms = class_gradient_norms(w, data)
    mix = sum((pi * class_conditional_grad(w, data, i) for i, pi in enumerate(p)), ModelParams.zeros_like(w))
    assert g_max(w, data) >= float(p @ norms) >= mix.norm() - 1e-15


def test_gmax_duplication_invariant(tiny3):
    w = init_params([3, 4, 3], seed=2)
    assert g_max(w, LabeledDataset.concat([tiny3, tiny3])) == pytest.approx(g_max(w, tiny3), rel=1e-13)


def test_gmax_missing_class():
    data = LabeledDataset(np.zeros((2, 2)), np.array([0, 0]), 2)
    with pytest.raises(EmptyClassError):
        g_max(init_params([2, 2], 0), data)


# ------------------------------------------------------ Lipschitz probes


def test_lipschitz_linear_model_stable_across_seeds():
    data = gen_synthetic(3, 4, 20, 2.0, seed=0)
    data = LabeledDataset(np.clip(data.features, -3, 3), data.labels, 3)
    anchors = [init_params([4, 3], seed=s) for s in range(4)]
    vals = [estimate_lipschitz(data, 1, ProbeSpec(pairs=64, radius=0.5, seed=s), anchors) for s in range(5)]
    vals = np.array(vals)
    assert np.all(np.isfinite(vals)) and np.all(vals > 0)
    assert vals.std() / vals.mean() < 0.5


def test_lipschitz_scales_with_safety_factor(tiny3):
    anchors = [init_params([3, 4, 3], seed=0)]
    a = estimate_lipschitz(tiny3, 0, ProbeSpec(pairs=16, radius=0.3, seed=1, safety_factor=1.5), anchors)
    b = estimate_lipschitz(tiny3, 0, ProbeSpec(pairs=16, radius=0.3, seed=1, safety_factor=3.0), anchors)
    assert b == pytest.approx(2 * a, rel=1e-14)


def test_lipschitz_degenerate_pairs_do_not_nan(tiny3):
    anchors = [init_params([3, 4, 3], seed=0)]
    val = estimate_lipschitz(tiny3, 0, ProbeSpec(pairs=8, radius=1e-300, seed=0), anchors)
    assert val == 0.0


def test_lipschitz_config_errors(tiny3):
    anchors = [init_params([3, 4, 3], seed=0)]
    with pytest.raises(ConfigError):
        estimate_lipschitz(tiny3, 0, ProbeSpec(pairs=0, radius=1.0), anchors)
    with pytest.raises(ConfigError):
        estimate_lipschitz(tiny3, 0, ProbeSpec(pairs=4, radius=None), anchors)


# --------------------------------------------------------------- bound_rhs


def make_inputs(dists, eta=0.1, T=3, lam=(1.0, 2.0, 0.5), n=None, trace=None):
    n = n or [10] * len(dists)
    trace = np.linspace(1.0, 2.0, 12) if trace is None else trace
    return BoundInputs(eta, T, np.array(lam), dists, n, ClassDistribution.uniform(3), trace)


def skewed_dists():
    base = np.array([0.6, 0.3, 0.1])
    return [np.roll(base, k) for k in range(3)]


@pytest.mark.parametrize("variant", ["skip_last", "full"])
def test_rhs_iid_is_zero(variant):
    inputs = make_inputs([np.full(3, 1 / 3)] * 3)
    assert bound_rhs(0.0, inputs, 2, variant) == 0.0


def test_rhs_t1_full_form():
    inputs = make_inputs(skewed_dists(), eta=0.2, T=1, n=[1, 2, 3])
    w = np.array([1, 2, 3]) / 6
    emds = [np.abs(d - 1 / 3).sum() for d in skewed_dists()]
    for m in (1, 2, 3):
        expected = 0.2 * sum(wk * e for wk, e in zip(w, emds)) * inputs.gmax_trace[m - 1]
        assert bound_rhs(0.0, inputs, m, "full") == pytest.approx(expected, rel=1e-14)
    # with a single local step the prior mismatch cancels in the average
    assert bound_rhs(0.0, inputs, 1, "skip_last") == 0.0


@pytest.mark.parametrize("variant,start", [("full", 0), ("skip_last", 1)])
def test_rhs_zero_lipschitz_degenerates_to_sum(variant, start):
    T = 3
    inputs = make_inputs(skewed_dists(), eta=0.3, T=T, lam=(0, 0, 0))
    emd_k = np.abs(skewed_dists()[0] - 1 / 3).sum()
    for m in (1, 2, 3, 4):
        g = sum(inputs.gmax_trace[m * T - 1 - j] for j in range(start, T))
        assert bound_rhs(0.7, inputs, m, variant) == pytest.approx(0.7 + 0.3 * emd_k * g, rel=1e-14)


def test_rhs_first_term_vanishes_at_first_sync():
    inputs = make_inputs(skewed_dists())
    big_a = make_inputs(skewed_dists(), lam=(100.0, 100.0, 100.0))
    # prev = 0 removes every dependence on a^T * prev
    assert bound_rhs(0.0, inputs, 1) < bound_rhs(0.0, big_a, 1)
    assert bound_rhs(0.0, inputs, 1) == pytest.approx(
        bound_rhs(1.0, inputs, 1) - sum(np.full(3, 1 / 3) * inputs.amplification() ** 3), rel=1e-12
    )


@pytest.mark.parametrize("variant", ["skip_last", "full"])
def test_rhs_monotone_in_every_input(variant):
    base = dict(dists=skewed_dists(), eta=0.1, T=3, lam=(1.0, 2.0, 0.5))
    ref = bound_rhs(0.5, make_inputs(**base), 2, variant)
    assert bound_rhs(0.6, make_inputs(**base), 2, variant) >= ref
    for i in range(3):
        lam = list(base["lam"])
        lam[i] += 0.5
        assert bound_rhs(0.5, make_inputs(**{**base, "lam": tuple(lam)}), 2, variant) >= ref
    for j in range(12):
        trace = np.linspace(1.0, 2.0, 12)
        trace[j] += 1.0
        assert bound_rhs(0.5, make_inputs(**base, trace=trace), 2, variant) >= ref
    assert bound_rhs(0.5, make_inputs(**{**base, "eta": 0.2}), 2, variant) >= ref
    assert bound_rhs(0.5, make_inputs(**{**base, "T": 4}), 2, variant) >= ref
    # sharper skew on one client raises its EMD
    sharper = [np.array([0.8, 0.15, 0.05])] + skewed_dists()[1:]
    lam_flat = {**base, "lam": (1.0, 1.0, 1.0)}
    assert bound_rhs(0.5, make_inputs(**{**lam_flat, "dists": sharper}), 2, variant) >= bound_rhs(
        0.5, make_inputs(**lam_flat), 2, variant
    )


def test_rhs_increases_with_emd_grid():
    grid = [0.0, 0.36, 0.72, 1.08, 1.44, 1.62, 1.8]
    trace = np.full(4, 1.3)
    rhs = []
    for e in grid:
        d = gen_target_emd_distribution(e, 10, seed=0)
        dists = [shift_distribution(d, k) for k in range(10)]
        inputs = BoundInputs(0.1, 2, np.full(10, 2.0), dists, [10] * 10, ClassDistribution.uniform(10), trace)
        rhs.append(bound_rhs(0.0, inputs, 1))
    assert all(b > a for a, b in zip(rhs, rhs[1:]))


def test_rhs_input_errors():
    inputs = make_inputs(skewed_dists(), T=3, trace=np.ones(5))
    with pytest.raises(BoundInputError):
        bound_rhs(0.0, inputs, 2)
    with pytest.raises(BoundInputError):
        bound_rhs(-1.0, make_inputs(skewed_dists()), 1)
    with pytest.raises(BoundInputError):
        make_inputs(skewed_dists(), lam=(-1.0, 0, 0))
    with pytest.raises(ConfigError):
        bound_rhs(0.0, make_inputs(skewed_dists()), 1, "other")


# ---------------------------------------------------------- verify_bound


def one_class_instance(seed=0, sep=2.0, hidden=8):
    data = gen_synthetic(3, 4, 10, sep, seed)
    shards = partition(data, PartitionSpec.k_class(3, 1, seed))
    return shards, init_params([4, hidden, 3], seed)


def test_verify_iid_is_all_zero():
    # 12 per class splits evenly, so every client prior is exactly uniform
    data = gen_synthetic(3, 4, 12, 2.0, seed=0)
    shards = partition(data, PartitionSpec.target_emd(3, 0.0, seed=0))
    rep = verify_bound(shards, init_params([4, 8, 3], 0), 0.5, 2, 3, ProbeSpec(pairs=8))
    assert rep.passed
    assert all(r.lhs == 0.0 and r.rhs == 0.0 for r in rep.rows)


@pytest.mark.parametrize("eta", [0.1, 1.0, 10.0])
@pytest.mark.parametrize("variant", ["skip_last", "full"])
def test_verify_one_class_small_instance(eta, variant):
    shards, w0 = one_class_instance()
    rep = verify_bound(shards, w0, eta, 2, 3, ProbeSpec(pairs=64), variant=variant)
    assert len(rep.rows) == 3 and rep.passed
    assert all(r.slack >= 0 for r in rep.rows)


def sharp_instance():
    # well-separated classes and a large step: curvature matters here
    return one_class_instance(seed=1, sep=4.0, hidden=12)


def test_verify_negative_control_fails():
    shards, w0 = sharp_instance()
    rep = verify_bound(shards, w0, 30.0, 2, 3, lambda_override=0.0)
    assert not rep.passed and rep.lambda_source == "override"
    assert verify_bound(shards, w0, 30.0, 2, 3, ProbeSpec(pairs=64, seed=0)).passed


def test_skip_last_variant_can_undercut():
    shards, w0 = sharp_instance()
    rep = verify_bound(shards, w0, 30.0, 2, 3, ProbeSpec(pairs=64, seed=0), variant="skip_last")
    assert not rep.passed and rep.rows[0].slack < 0


def test_verify_reestimates_before_failing():
    # this probe seed under-estimates on the first pass
    shards, w0 = sharp_instance()
    rep = verify_bound(shards, w0, 30.0, 2, 3, ProbeSpec(pairs=64, seed=3))
    assert rep.reestimated and rep.passed


def test_check_bound_with_exact_run_inputs():
    shards, w0 = one_class_instance()
    run = run_deterministic_pair(shards, w0, 0.5, 2, 3)
    inputs = bound_inputs_from_run(run, np.full(3, 5.0))
    rows = check_bound(run, inputs)
    assert [r.m for r in rows] == [1, 2, 3]
    assert rows[0].lhs == run.sync_divergence()[1]


def test_bound_report_exports():
    shards, w0 = one_class_instance()
    rep = verify_bound(shards, w0, 1.0, 2, 3, ProbeSpec(pairs=16))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "m,lhs,rhs,slack" and len(lines) == 4
    assert json.loads(rep.to_json())["passed"] is True


# -------------------------------------------------------------- EMD sweep


def test_sweep_shape_and_ordering():
    data = gen_synthetic(10, 5, 20, 3.0, seed=0)
    grid = [0.0, 0.9, 1.8]
    cfg = FedConfig(K=10, B=5, E=1, eta0=0.1, rounds=1, seed=0)
    table = divergence_vs_emd_sweep(data, grid, 2, cfg, init_params([5, 8, 10], seed=0))
    summary = table.summary()
    assert len(summary) == len(grid) * (2 + 1)
    mean_total = dict(table.mean_total())
    assert mean_total[0.0] < mean_total[1.8]
    assert len(table.raw) == len(grid) * 2 * 3
    assert table.divergence_csv().splitlines()[0] == "emd,layer,mean,std"


def test_sweep_single_rep_has_zero_std():
    data = gen_synthetic(10, 5, 20, 3.0, seed=0)
    cfg = FedConfig(K=10, B=5, E=1, eta0=0.1, rounds=2, seed=0)
    test = gen_synthetic(10, 5, 10, 3.0, seed=0)
    table = divergence_vs_emd_sweep(data, [0.0, 1.8], 1, cfg, init_params([5, 8, 10], 0), test=test)
    assert all(std == 0.0 for *_, std in table.summary())
    assert all(std == 0.0 for *_, std in table.accuracy_summary())
    assert len(table.accuracy_summary()) == 2
