import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import enumerate_simplex
from multibalance.balancers import (
    BALANCERS,
    BalancerState,
    dbmtl_step,
    graddrop_step,
    gradvaccine_step,
    imtlg_step,
    mgda_step,
    moco_step,
    multibalance_step,
    pcgrad_step,
    uncertainty_reweigh,
)
from multibalance.linalg import seeded_rng
from multibalance.simplex import is_on_simplex, min_norm_weights

seeds = st.integers(0, 2**31 - 1)


def _G(seed, n=6, M=3):
    return seeded_rng(seed).standard_normal((n, M))


# -------------------------------------------------------------- MultiBalance


def test_multibalance_single_task_exact():
    g = np.array([[3.0], [-4.0]])
    state = BalancerState(1)
    out = multibalance_step(g, state)
    assert out.weights.tolist() == [1.0]
    assert np.array_equal(out.aggregate, g[:, 0])


def test_multibalance_gamma_one_is_identity_rescale():
    G = _G(1)
    state = BalancerState(3, gamma=1.0, rho=0.0, cosine_mode=False)
    state.ema_norms = np.array([5.0, 6.0, 7.0])
    out = multibalance_step(G, state)
    assert np.allclose(out.per_task, G, rtol=1e-15)


def test_multibalance_symmetric_fixed_point():
    G = np.array([[10.0, 0.0], [0.0, 1.0]])
    for beta in (0.1, 1.0, 7.0):
        state = BalancerState(2, gamma=1e-300, rho=0.0, beta=beta, cosine_mode=False)
        state.ema_norms = np.ones(2)
        out = multibalance_step(G, state)
        assert np.allclose(out.weights, [0.5, 0.5]) and np.allclose(out.aggregate, [0.5, 0.5])
        grid = enumerate_simplex(2, 1000)
        assert np.allclose(grid[np.argmin((grid**2).sum(axis=1))], [0.5, 0.5])


def test_multibalance_first_step_initialises_ema():
    G = _G(2)
    state = BalancerState(3)
    multibalance_step(G, state)
    assert np.allclose(state.ema_norms, np.linalg.norm(G, axis=0))


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0.001, 1.0))
def test_multibalance_ema_rescale_exact(seed, gamma):
    rng = seeded_rng(seed)
    state = BalancerState(3, gamma=gamma)
    for _ in range(3):
        G = rng.standard_normal((5, 3)) * rng.uniform(0.1, 10, 3)
        prev = None if state.ema_norms is None else state.ema_norms.copy()
        out = multibalance_step(G, state)
        norms = np.linalg.norm(out.per_task, axis=0)
        assert np.allclose(norms, state.ema_norms, rtol=1e-12, atol=0)
        if prev is not None:
            raw = np.linalg.norm(G, axis=0)
            lo, hi = np.minimum(prev, raw), np.maximum(prev, raw)
            assert np.all(state.ema_norms >= lo * (1 - 1e-15)) and np.all(state.ema_norms <= hi * (1 + 1e-15))
        assert is_on_simplex(out.weights)
        assert np.allclose(out.aggregate, G @ out.coef, atol=1e-12)


def test_multibalance_zero_column_skipped():
    G = _G(3)
    G[:, 1] = 0
    out = multibalance_step(G, BalancerState(3))
    assert np.all(np.isfinite(out.aggregate)) and np.all(out.per_task[:, 1] == 0)


def test_multibalance_reduction_to_mgda():
    rng = seeded_rng(4)
    for _ in range(5):
        G = rng.standard_normal((6, 3))
        state = BalancerState(3, gamma=1.0, rho=0.0, cosine_mode=False, beta=1.0 / np.linalg.norm(G.T @ G, 2))
        for _ in range(5000):
            out = multibalance_step(G, state)
        assert np.linalg.norm(out.aggregate) == pytest.approx(min_norm_weights(G, tol=1e-12).norm, abs=1e-7)


# ----------------------------------------------------------------- MGDA/MoCo


def test_mgda_examples():
    assert np.allclose(mgda_step(np.eye(2)).weights, [0.5, 0.5])
    assert np.allclose(mgda_step(np.array([[2.0, -1.0], [0.0, 0.0]])).aggregate, 0, atol=1e-15)
    out = mgda_step(np.array([[1.0, 3.0], [0.0, 0.0]]))
    assert np.allclose(out.weights, [1, 0]) and np.allclose(out.aggregate, [1, 0])


def test_moco_gamma_one_equals_mgda():
    G = _G(5)
    a = moco_step(G, BalancerState(3, gamma=1.0))
    b = mgda_step(G)
    assert np.allclose(a.aggregate, b.aggregate, atol=1e-12) and np.allclose(a.weights, b.weights, atol=1e-9)


def test_moco_converges_to_mgda():
    G = _G(6)
    state = BalancerState(3, gamma=0.1)
    for _ in range(200):
        out = moco_step(G, state)
    assert np.allclose(out.aggregate, mgda_step(G).aggregate, atol=1e-6)


def test_moco_zero():
    out = moco_step(np.zeros((4, 3)), BalancerState(3, gamma=0.5))
    assert np.all(out.aggregate == 0)


# --------------------------------------------------------------------- PCGrad


def test_pcgrad_examples():
    G = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert np.allclose(pcgrad_step(G, rng=seeded_rng(0)).aggregate, G.mean(axis=1))
    out = pcgrad_step(np.array([[1.0, -1.0], [0.0, 1.0]]), rng=seeded_rng(0))
    assert np.allclose(out.per_task[:, 0], [0.5, 0.5])
    g = np.array([[1.0], [2.0]])
    out = pcgrad_step(np.hstack([g, -g]), rng=seeded_rng(0))
    assert np.allclose(out.per_task, 0) and np.allclose(out.aggregate, 0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_pcgrad_non_conflict(seed):
    G = _G(seed, M=2)
    out = pcgrad_step(G, rng=seeded_rng(seed))
    assert out.per_task[:, 0] @ G[:, 1] >= -1e-10
    assert out.per_task[:, 1] @ G[:, 0] >= -1e-10
    assert np.allclose(out.aggregate, G @ out.coef, atol=1e-12)


def test_pcgrad_skips_zero_columns():
    G = _G(7)
    G[:, 2] = 0
    assert np.all(np.isfinite(pcgrad_step(G, rng=seeded_rng(0)).aggregate))


# ----------------------------------------------------------- Gradient Vaccine


def test_gradvac_first_step_no_adjustment():
    G = _G(8)
    out = gradvaccine_step(G, BalancerState(3))
    assert np.allclose(out.aggregate, G.mean(axis=1))


def test_gradvac_orthogonal_at_target_unchanged():
    state = BalancerState(2)
    state.pairwise_cos_ema[:] = 0.0
    out = gradvaccine_step(np.eye(2), state)
    assert np.allclose(out.per_task, np.eye(2))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_gradvac_attains_target(seed):
    rng = seeded_rng(seed)
    G = rng.standard_normal((5, 2))
    cos = G[:, 0] @ G[:, 1] / np.prod(np.linalg.norm(G, axis=0))
    target = float(np.clip(cos + rng.uniform(0.05, 0.5), -0.99, 0.99))
    state = BalancerState(2)
    state.pairwise_cos_ema[:] = np.nan
    state.pairwise_cos_ema[0, 1] = target
    state.pairwise_cos_ema[1, 0] = -1.0  # never adjusts task 1
    out = gradvaccine_step(G, state)
    new = out.per_task[:, 0]
    achieved = new @ G[:, 1] / (np.linalg.norm(new) * np.linalg.norm(G[:, 1]))
    if cos < target:
        assert achieved == pytest.approx(target, abs=1e-8)
    assert np.allclose(out.aggregate, G @ out.coef, atol=1e-12)
    assert np.all(np.abs(state.pairwise_cos_ema[~np.isnan(state.pairwise_cos_ema)]) <= 1)


# ------------------------------------------------------------- Gradient Drop


def test_graddrop_same_signs_is_sum():
    G = np.abs(_G(9)) * np.sign(seeded_rng(1).standard_normal((6, 1)))
    out = graddrop_step(G, rng=seeded_rng(0))
    assert np.array_equal(out.aggregate, G.sum(axis=1))


def test_graddrop_single_task_kept():
    G = _G(10, M=1)
    assert np.array_equal(graddrop_step(G, rng=seeded_rng(0)).aggregate, G[:, 0])


def test_graddrop_balanced_frequency():
    G = np.tile(np.array([[1.0, -1.0]]), (100_000, 1))
    out = graddrop_step(G, rng=seeded_rng(12))
    assert np.all(out.extra["purity"] == 0.5)
    assert abs((out.aggregate > 0).mean() - 0.5) <= 0.01


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_graddrop_sign_unanimity_noop(seed):
    rng = seeded_rng(seed)
    signs = np.sign(rng.standard_normal((7, 1)))
    G = np.abs(rng.standard_normal((7, 3))) * signs
    out = graddrop_step(G, rng=rng)
    assert np.array_equal(out.per_task, G)


# -------------------------------------------------------------------- DB-MTL


def test_dbmtl_examples():
    G = np.eye(3) * np.array([1.0, 2.0, 10.0])
    out = dbmtl_step(G)
    assert np.allclose(np.linalg.norm(out.per_task, axis=0), 2.0)
    out = dbmtl_step(np.eye(2) * np.array([1.0, 3.0]))
    assert np.allclose(np.linalg.norm(out.per_task, axis=0), 2.0)
    E = np.eye(3)
    assert np.allclose(dbmtl_step(E).per_task, E)
    assert np.all(dbmtl_step(np.zeros((3, 3))).aggregate == 0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_dbmtl_median_norm(seed):
    G = _G(seed, M=int(seeded_rng(seed).integers(1, 6))) * seeded_rng(seed + 1).uniform(0.01, 100)
    out = dbmtl_step(G)
    target = np.median(np.linalg.norm(G, axis=0))
    assert np.allclose(np.linalg.norm(out.per_task, axis=0), target, rtol=1e-10, atol=0)


# --------------------------------------------------------------------- IMTL-G


def test_imtlg_examples():
    assert np.allclose(imtlg_step(np.eye(2)).weights, [0.5, 0.5])
    out = imtlg_step(np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert np.allclose(out.weights, [2 / 3, 1 / 3]) and np.allclose(out.aggregate, [2 / 3, 2 / 3])
    assert imtlg_step(np.array([[1.0], [2.0]])).weights.tolist() == [1.0]
    assert not out.on_simplex


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_imtlg_equal_projections(seed):
    G = _G(seed, n=6, M=int(seeded_rng(seed).integers(2, 5)))
    out = imtlg_step(G)
    proj = out.aggregate @ (G / np.linalg.norm(G, axis=0))
    assert np.max(np.abs(proj - proj.mean())) <= 1e-8
    assert out.weights.sum() == pytest.approx(1.0)


def test_imtlg_singular_falls_back(caplog):
    g = np.array([[1.0], [1.0]])
    with caplog.at_level(logging.WARNING):
        out = imtlg_step(np.hstack([g, 2 * g]))
    assert np.allclose(out.weights, [0.5, 0.5]) and "uniform" in caplog.text


# ---------------------------------------------------------------- Uncertainty


def test_uncertainty_initial_weights():
    state = BalancerState(3)
    f = np.array([0.3, 0.7, 1.1])
    total, w, _ = uncertainty_reweigh(f, state, lr=0.1)
    assert np.array_equal(w, np.ones(3)) and total == pytest.approx(f.sum())


def test_uncertainty_stationary_point():
    state = BalancerState(1)
    _, _, s = uncertainty_reweigh(np.array([0.5]), state, lr=1.0)
    assert s[0] == 0.0


def test_uncertainty_direction():
    # d total / d s = -exp(-s) f + 1/2, so one step from s = 0 gives s = -lr (1/2 - f)
    state = BalancerState(2)
    _, _, s = uncertainty_reweigh(np.array([1.0, 0.1]), state, lr=0.1)
    assert np.allclose(s, [0.05, -0.04])
    _, w, _ = uncertainty_reweigh(np.array([1.0, 0.1]), state, lr=0.1)
    assert np.allclose(w, [np.exp(-0.05), np.exp(0.04)])


def test_uncertainty_gradient_matches_fd():
    f = np.array([0.8, 0.2, 1.5])
    s0 = np.array([0.1, -0.3, 0.4])
    total = lambda s: float(np.sum(np.exp(-s) * f + 0.5 * s))  # noqa: E731
    state = BalancerState(3, log_vars=s0.copy())
    _, _, s1 = uncertainty_reweigh(f, state, lr=1.0)
    grad = s0 - s1
    for m in range(3):
        e = np.zeros(3)
        e[m] = 1e-6
        assert grad[m] == pytest.approx((total(s0 + e) - total(s0 - e)) / 2e-6, rel=1e-7)


# ---------------------------------------------------------------- all methods


@pytest.mark.parametrize("name", sorted(BALANCERS))
def test_balancers_deterministic_and_shaped(name):
    G = _G(13)
    outs = []
    for _ in range(2):
        state = BalancerState(3)
        rng = seeded_rng(0)
        outs.append([BALANCERS[name](G * k, state, rng) for k in (1.0, 0.5, 2.0)])
    for a, b in zip(*outs):
        assert a.aggregate.tobytes() == b.aggregate.tobytes()
        assert a.aggregate.shape == (6,) and np.all(np.isfinite(a.aggregate))


def test_wrong_column_count():
    with pytest.raises(ValueError):
        multibalance_step(_G(0, M=2), BalancerState(3))
