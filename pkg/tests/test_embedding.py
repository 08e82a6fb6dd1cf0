import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mulgls.embedding import (apply_regularized_label_inverse, clamp_nonnegative, condition_gram,
                              conditional_matrix, embedding_coefficients, fit_cme,
                              mcmd_matrix_within, mcmd_squared_cross, mcmd_squared_within,
                              rff_build, rff_features)
from mulgls.kernels import FeatureSet, KernelSpec, gram, median_bandwidth
from mulgls.numerics import solve_spd

import oracles

KY = KernelSpec("gaussian", 1.0)


def _sample(m, c, d, seed, shift=0.0):
    rng = np.random.default_rng(seed)
    y = np.arange(m) % c
    rng.shuffle(y)
    z = rng.standard_normal((m, d)) + 2.0 * np.eye(c, d)[y] + shift
    return FeatureSet(z, y, c)


def test_fit_two_samples():
    op = fit_cme(FeatureSet(np.array([[0.0], [1.0]]), np.array([0, 1])), KernelSpec(), KY, 0.1)
    big_l = op.label_gram
    np.testing.assert_allclose(np.diag(big_l), 1.0)
    np.testing.assert_allclose(op.regularized_label_gram(), 2 * 0.1 * np.eye(2) + big_l)


def test_fit_single_class_rank_one():
    op = fit_cme(_sample(10, 1, 2, 0), KernelSpec(), KY, 1e-3)
    np.testing.assert_allclose(op.label_gram, np.ones((10, 10)))
    assert np.sum(op.label_factor.values > 1e-12) == 1
    assert np.all(np.isfinite(embedding_coefficients(op, [0])))


def test_fit_errors():
    data = _sample(6, 2, 2, 0)
    with pytest.raises(ValueError, match="labeled"):
        fit_cme(data.unlabeled(), KernelSpec(), KY, 1e-3)
    with pytest.raises(ValueError, match="eps"):
        fit_cme(data, KernelSpec(), KY, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_label_factor_reconstructs(seed):
    op = fit_cme(_sample(60, 4, 2, seed), KernelSpec(), KY, 1e-3)
    dense = oracles.label_gram(op.labels, op.labels, 4)
    assert np.max(np.abs(op.label_factor.reconstruct() - dense)) < 1e-8
    assert op.label_factor.rank == 4


def test_embedding_mean_vs_dense_inverse():
    data = _sample(100, 4, 3, 0)
    kz = KernelSpec("gaussian", 1.2)
    op = fit_cme(data, kz, KY, 1e-3)
    a = embedding_coefficients(op, np.arange(4))
    oracle = oracles.cme_coefficients(data.labels, 4, 1e-3, np.arange(4))
    # the embedding evaluated at the sample points: K a_y
    k = oracles.gauss_gram(data.features, data.features, 1.2)
    assert np.max(np.abs(k @ a - k @ oracle)) < 1e-8


def test_inverse_zero_label_gram():
    data = FeatureSet(np.zeros((5, 1)), np.zeros(5, dtype=int), 1)
    op = fit_cme(data, KernelSpec(), KernelSpec("linear"), 0.2)
    # a single class under the linear label kernel gives L = 11^T; zero it explicitly
    object.__setattr__(op, "label_factor", type(op.label_factor)(np.zeros(1), op.label_factor.vectors))
    v = np.arange(5.0)
    np.testing.assert_allclose(apply_regularized_label_inverse(op, v), v / (0.2 * 5))


def test_inverse_rank_one_sherman_morrison():
    n, eps = 12, 0.05
    data = FeatureSet(np.zeros((n, 1)), np.zeros(n, dtype=int), 1)
    op = fit_cme(data, KernelSpec(), KY, eps)
    u = np.ones(n)
    v = np.random.default_rng(0).standard_normal(n)
    s = eps * n
    # inv(sI + u u^T) v = v/s - u (u^T v) / (s (s + u^T u))
    oracle = v / s - u * (u @ v) / (s * (s + u @ u))
    np.testing.assert_allclose(apply_regularized_label_inverse(op, v), oracle, atol=1e-12)


def test_inverse_vs_dense_solve_m200():
    op = fit_cme(_sample(200, 3, 2, 1), KernelSpec(), KY, 1e-3)
    v = np.random.default_rng(2).standard_normal(200)
    dense = solve_spd(op.regularized_label_gram(), v)
    assert np.max(np.abs(apply_regularized_label_inverse(op, v) - dense)) < 1e-8
    with pytest.raises(ValueError, match="length"):
        apply_regularized_label_inverse(op, v[:-1])


def test_cross_self_identity_and_symmetry():
    kz = KernelSpec("gaussian", 1.0)
    op_s = fit_cme(_sample(40, 3, 2, 0), kz, KY, 1e-2)
    op_t = fit_cme(_sample(30, 3, 2, 1, shift=0.5), kz, KY, 1e-2)
    assert mcmd_squared_cross(op_s, op_s, 1, 1) < 1e-10
    assert mcmd_squared_cross(op_s, op_t, 0, 2) == pytest.approx(
        mcmd_squared_cross(op_t, op_s, 2, 0), abs=1e-12)


def test_cross_one_sample_domains_closed_form():
    kz = KernelSpec("gaussian", 1.0)
    eps = 0.1
    zs, zt = np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]])
    op_s = fit_cme(FeatureSet(zs, np.array([0]), 2), kz, KY, eps)
    op_t = fit_cme(FeatureSet(zt, np.array([0]), 2), kz, KY, eps)
    # a = 1 / (1 + eps) in both domains
    a = 1.0 / (1.0 + eps)
    expected = a * a * (1 + 1 - 2 * np.exp(-0.5))
    got = mcmd_squared_cross(op_s, op_t, 0, 0)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(oracles.mcmd2_cross(zs, [0], zt, [0], 0, 0, 1.0, eps, 2), rel=1e-12)


def test_cross_m80_vs_naive_oracle():
    kz = KernelSpec("gaussian", 1.3)
    s, t = _sample(80, 2, 2, 3), _sample(80, 2, 2, 4, shift=np.array([1.0, 0.0]))
    op_s, op_t = fit_cme(s, kz, KY, 1e-3), fit_cme(t, kz, KY, 1e-3)
    for yi in range(2):
        for yj in range(2):
            oracle = oracles.mcmd2_cross(s.features, s.labels, t.features, t.labels, yi, yj,
                                         1.3, 1e-3, 2)
            for path in ("woodbury", "naive"):
                assert abs(mcmd_squared_cross(op_s, op_t, yi, yj, path=path) - oracle) < 1e-8


def test_cross_kernel_mismatch():
    op_s = fit_cme(_sample(10, 2, 2, 0), KernelSpec("gaussian", 1.0), KY, 1e-3)
    op_t = fit_cme(_sample(10, 2, 2, 1), KernelSpec("gaussian", 2.0), KY, 1e-3)
    with pytest.raises(ValueError, match="kernel-spec mismatch"):
        mcmd_squared_cross(op_s, op_t, 0, 0)


def test_within_two_samples_hand_computed():
    z = np.array([[0.0], [2.0]])
    eps = 0.05
    op = fit_cme(FeatureSet(z, np.array([0, 1])), KernelSpec(), KY, eps)
    assert mcmd_squared_within(op, 1, 1) == 0.0
    # Lt = [[1+2e, q], [q, 1+2e]], L_0 - L_1 = (1-q)(1, -1); inv(Lt)(1,-1) = (1,-1)/(1+2e-q)
    q = np.exp(-1.0)
    v = (1 - q) / (1 + 2 * eps - q) * np.array([1.0, -1.0])
    k = np.array([[1.0, np.exp(-2.0)], [np.exp(-2.0), 1.0]])
    expected = v @ k @ v
    assert mcmd_squared_within(op, 0, 1) == pytest.approx(expected, rel=1e-12)
    assert mcmd_squared_within(op, 0, 1, path="naive") == pytest.approx(expected, rel=1e-12)


def test_within_c5_all_pairs_positive():
    op = fit_cme(_sample(100, 5, 3, 7), KernelSpec("gaussian", 1.0), KY, 1e-3)
    d = mcmd_matrix_within(op)
    off = d[~np.eye(5, dtype=bool)]
    assert off.size == 20 and np.all(off > 0)


def test_within_invalid_label():
    op = fit_cme(_sample(10, 2, 2, 0), KernelSpec(), KY, 1e-3)
    with pytest.raises(ValueError, match="invalid label"):
        mcmd_squared_within(op, 0, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 120), st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000),
       st.sampled_from([1e-3, 1e-2, 0.3]))
def test_path_equivalence_naive_woodbury(m, c, d, seed, eps):
    data = _sample(m, c, d, seed)
    op = fit_cme(data, KernelSpec("gaussian", 1.0 + d / 4), KY, eps)
    ref = condition_gram(op, path="naive")
    assert np.max(np.abs(condition_gram(op, path="woodbury") - ref)) < 1e-8


def test_conditional_matrix_vs_explicit_inverse():
    data = _sample(50, 3, 2, 11)
    op = fit_cme(data, KernelSpec(), KY, 1e-2)
    inv = np.linalg.inv(oracles.label_gram(data.labels, data.labels, 3) + 1e-2 * 50 * np.eye(50))
    oracle = inv @ oracles.gauss_gram(data.features, data.features, 1.0) @ inv
    np.testing.assert_allclose(conditional_matrix(op), oracle, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_conditional_matrix_positive_definite(seed):
    # strict definiteness holds for any distinct points; in 2-D the smallest
    # eigenvalues of a 150-point gaussian Gram sit below float64 resolution,
    # so the check uses 8-D points where they are resolvable
    data = _sample(150, 4, 8, seed)
    op = fit_cme(data, KernelSpec("gaussian", median_bandwidth(data.features)), KY, 1e-3)
    assert np.linalg.eigvalsh(conditional_matrix(op)).min() > 0


@pytest.mark.parametrize("seed", range(5))
def test_within_metric_axioms(seed):
    op = fit_cme(_sample(90, 6, 3, seed), KernelSpec("gaussian", 1.5), KY, 1e-3)
    d = np.sqrt(mcmd_matrix_within(op))
    assert np.all(d >= 0)
    np.testing.assert_allclose(d, d.T, atol=1e-12)
    assert np.all(np.diag(d) == 0) and np.all(d[~np.eye(6, dtype=bool)] > 1e-10)
    for i in range(6):
        for j in range(6):
            for k in range(6):
                assert d[i, k] <= d[i, j] + d[j, k] + 1e-10


def test_clamp():
    assert clamp_nonnegative(-1e-12) == 0.0
    with pytest.raises(ValueError, match="negative"):
        clamp_nonnegative(-1e-6)


def test_rff_determinism_and_diagonal():
    a = np.random.default_rng(0).standard_normal((20, 2))
    p1, p2 = rff_build(2, 64, 1.0, seed=3), rff_build(2, 64, 1.0, seed=3)
    assert p1.frequencies.tobytes() == p2.frequencies.tobytes()
    assert p1.phases.tobytes() == p2.phases.tobytes()
    s = rff_features(p1, a)
    np.testing.assert_allclose(np.diag(s.T @ s), 1.0, atol=1e-14)
    with pytest.raises(ValueError):
        rff_build(2, 8, 0.0, 0)
    with pytest.raises(ValueError):
        rff_build(2, 0, 1.0, 0)


def test_rff_r4096_error():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((200, 2))
    a = (a - a.mean(0)) / a.std(0)
    s = rff_features(rff_build(2, 4096, 1.0, seed=0), a)
    assert np.max(np.abs(s.T @ s - gram(a, a, KernelSpec("gaussian", 1.0)))) < 0.1


def test_rff_error_shrinks_with_rank():
    a = np.random.default_rng(2).standard_normal((100, 2))
    k = gram(a, a, KernelSpec("gaussian", 1.0))
    errs = []
    for r in (32, 512, 8192):
        med = np.median([np.max(np.abs(rff_features(rff_build(2, r, 1.0, s), a).T
                                       @ rff_features(rff_build(2, r, 1.0, s), a) - k))
                         for s in range(5)])
        errs.append(med)
    assert errs[0] > errs[1] > errs[2]


def test_rff_path_approaches_exact():
    op = fit_cme(_sample(120, 3, 2, 5), KernelSpec("gaussian", 1.0), KY, 1e-2)
    exact = mcmd_matrix_within(op)
    approx = mcmd_matrix_within(op, path="rff", rff=rff_build(2, 8192, 1.0, seed=0))
    assert np.max(np.abs(approx - exact)) < 0.05 * np.max(exact)
    with pytest.raises(ValueError, match="projection"):
        mcmd_matrix_within(op, path="rff")


@pytest.mark.parametrize("eps", [0.05, 0.3, 1.0])
def test_within_balanced_two_class_closed_form(eps):
    # balanced classes: inv(Lt)(L_0 - L_1) is a multiple of the +-1 class indicator
    rng = np.random.default_rng(0)
    m = 120
    y = np.arange(m) % 2
    z = np.array([[0.0, 0.0], [1.5, 0.0]])[y] + rng.standard_normal((m, 2))
    q = np.exp(-1.0)
    v = np.where(y == 0, 1.0, -1.0)
    k = oracles.gauss_gram(z, z, 1.0)
    closed = ((1 - q) / (eps + (1 - q) / 2)) ** 2 * (v @ k @ v) / m**2
    op = fit_cme(FeatureSet(z, y, 2), KernelSpec("gaussian", 1.0), KY, eps)
    assert mcmd_squared_within(op, 0, 1) == pytest.approx(closed, rel=1e-10)
