r"""Empirical conditional mean embeddings and the MCMD between them.

For a labeled sample ``(z_i, y_i)`` the uncentered conditional embedding of
``P(Z | y)`` is ``Phi @ inv(Lt) @ L_y`` with ``Lt = eps * n * I + L``, where
``L`` is the label Gram matrix and ``L_y[i] = k_Y(y_i, y)``. Writing
``a_y = inv(Lt) @ L_y`` the squared discrepancy between two embeddings is a
quadratic form in the feature Gram matrix:

.. math::
    \|\mu^s_{y} - \mu^t_{y'}\|^2 = a^s_y{}^T K^{ss} a^s_y + a^t_{y'}{}^T K^{tt} a^t_{y'}
        - 2\, a^s_y{}^T K^{st} a^t_{y'}

Three routes evaluate it:

``woodbury``
    ``L`` has rank equal to the number of distinct labels, so ``inv(Lt)`` is
    applied through a rank-``c`` eigendecomposition in ``O(n c)``; the overall
    cost is dominated by forming ``K`` and is quadratic in ``n``.
``naive``
    Dense ``inv(Lt)``, explicit conditional matrix ``inv(Lt) K inv(Lt)``;
    cubic. Kept as a reference for testing and benchmarking.
``rff``
    ``K`` is replaced by ``S^T S`` with random Fourier features ``S`` (gaussian
    feature kernel only); linear in ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .kernels import FeatureSet, KernelSpec, gram, one_hot
from .numerics import EigPair, solve_spd, sym_eig_truncated

PATHS = ("naive", "woodbury", "rff")
NEGATIVE_TOL = 1e-10


def clamp_nonnegative(value, tol: float = NEGATIVE_TOL):
    """Zero out round-off negatives; anything below ``-tol`` means broken inputs."""
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < -tol):
        raise ValueError(f"squared discrepancy is negative beyond round-off: {v.min():.3e}")
    v = np.where(v < 0.0, 0.0, v)
    return float(v) if v.ndim == 0 else v


@dataclass(frozen=True, eq=False)
class CmeOperator:
    """Fitted empirical conditional embedding operator.

    Only the factored label Gram is stored; ``label_gram`` materialises the
    dense ``n x n`` matrix on request (tests and the naive path).
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    kz: KernelSpec
    ky: KernelSpec
    eps: float
    label_factor: EigPair
    class_gram: np.ndarray  # k_Y between one-hot codes, n_classes x n_classes

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @cached_property
    def feature_gram(self) -> np.ndarray:
        return gram(self.features, self.features, self.kz)

    @property
    def label_gram(self) -> np.ndarray:
        codes = one_hot(self.labels, self.n_classes)
        return gram(codes, codes, self.ky)

    def regularized_label_gram(self) -> np.ndarray:
        return self.label_gram + self.eps * self.n * np.eye(self.n)

    def label_columns(self, ys) -> np.ndarray:
        """``L_y`` for each queried condition, stacked as columns (n x len(ys))."""
        ys = np.atleast_1d(np.asarray(ys, dtype=np.int64))
        if ys.size and (ys.min() < 0 or ys.max() >= self.n_classes):
            raise ValueError(f"invalid label in {ys.tolist()} for {self.n_classes} classes")
        return self.class_gram[np.ix_(self.labels, ys)]


def fit_cme(data: FeatureSet, kz: KernelSpec, ky: KernelSpec, eps: float,
            feature_gram=None) -> CmeOperator:
    """Fit the conditional embedding of ``Z | Y`` on a fully labeled sample.

    ``feature_gram`` optionally supplies ``gram(Z, Z, kz)`` when the caller
    already has it.
    """
    if data.labels is None or np.any(data.labels < 0):
        raise ValueError("fit_cme requires every sample to be labeled")
    if not eps > 0:
        raise ValueError(f"regularizer eps must be positive, got {eps}")
    if len(data) == 0:
        raise ValueError("fit_cme requires at least one sample")
    labels = data.labels
    c = data.n_classes
    class_gram = gram(np.eye(c), np.eye(c), ky)
    # L = P C P^T with P the class indicator; with N = diag(counts) and
    # Q = P N^{-1/2} orthonormal, L = Q (N^{1/2} C N^{1/2}) Q^T, so a k x k
    # eigenproblem yields the exact rank-k factorisation of L
    present, counts = np.unique(labels, return_counts=True)
    root = np.sqrt(counts.astype(np.float64))
    small = root[:, None] * class_gram[np.ix_(present, present)] * root[None, :]
    eig = sym_eig_truncated(small, present.size)
    values = np.maximum(eig.values, 0.0)
    slot = np.searchsorted(present, labels)
    u = eig.vectors[slot] / root[slot][:, None]
    op = CmeOperator(
        features=data.features,
        labels=labels,
        n_classes=c,
        kz=kz,
        ky=ky,
        eps=float(eps),
        label_factor=EigPair(values=values, vectors=u),
        class_gram=class_gram,
    )
    if feature_gram is not None:
        op.__dict__["feature_gram"] = feature_gram
    return op


def apply_regularized_label_inverse(op: CmeOperator, v) -> np.ndarray:
    """``inv(eps n I + L) @ v`` through the Woodbury identity.

    With ``L = U D U^T`` and ``Db = D / (eps n)``:
    ``inv(eps n I + L) = (I - U Db (Db + I)^{-1} U^T) / (eps n)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != op.n:
        raise ValueError(f"vector length {v.shape[0]} does not match operator size {op.n}")
    scale = op.eps * op.n
    u = op.label_factor.vectors
    db = op.label_factor.values / scale
    shrink = db / (db + 1.0)
    proj = u.T @ v
    if v.ndim == 1:
        return (v - u @ (shrink * proj)) / scale
    return (v - u @ (shrink[:, None] * proj)) / scale


def embedding_coefficients(op: CmeOperator, ys, path: str = "woodbury") -> np.ndarray:
    """Columns ``a_y = inv(Lt) L_y``; the embedding of ``P(Z|y)`` is ``Phi a_y``."""
    cols = op.label_columns(ys)
    if path == "naive":
        return solve_spd(op.regularized_label_gram(), cols)
    if path in ("woodbury", "rff"):
        return apply_regularized_label_inverse(op, cols)
    raise ValueError(f"unknown path {path!r}, expected one of {PATHS}")


def _check_compatible(op_s: CmeOperator, op_t: CmeOperator) -> None:
    if op_s.kz != op_t.kz or op_s.ky != op_t.ky:
        raise ValueError("kernel-spec mismatch between operators")
    if op_s.n_classes != op_t.n_classes:
        raise ValueError("operators were fitted with different class counts")
    if op_s.features.shape[1] != op_t.features.shape[1]:
        raise ValueError("operators live in feature spaces of different dimension")


def conditional_matrix(op_s: CmeOperator, op_t: CmeOperator | None = None) -> np.ndarray:
    """Dense ``inv(Lt_s) K^{st} inv(Lt_t)``; cubic, for reference use only."""
    op_t = op_s if op_t is None else op_t
    inv_s = solve_spd(op_s.regularized_label_gram(), np.eye(op_s.n))
    inv_t = inv_s if op_t is op_s else solve_spd(op_t.regularized_label_gram(), np.eye(op_t.n))
    k = op_s.feature_gram if op_t is op_s else gram(op_s.features, op_t.features, op_s.kz)
    return inv_s @ k @ inv_t


def condition_gram(op_s, op_t=None, ys_s=None, ys_t=None, path="woodbury", rff=None) -> np.ndarray:
    """Inner products ``<mu^s_y, mu^t_y'>`` for ``y`` in ``ys_s``, ``y'`` in ``ys_t``.

    ``rff`` must be an :class:`RffProjection` when ``path == "rff"``.
    """
    same = op_t is None or op_t is op_s
    op_t = op_s if op_t is None else op_t
    _check_compatible(op_s, op_t)
    ys_s = np.arange(op_s.n_classes) if ys_s is None else np.atleast_1d(ys_s)
    ys_t = ys_s if ys_t is None else np.atleast_1d(ys_t)
    if path == "naive":
        m = conditional_matrix(op_s, None if same else op_t)
        return op_s.label_columns(ys_s).T @ m @ op_t.label_columns(ys_t)
    a_s = embedding_coefficients(op_s, ys_s, path)
    a_t = a_s if same and np.array_equal(ys_s, ys_t) else embedding_coefficients(op_t, ys_t, path)
    if path == "woodbury":
        k = op_s.feature_gram if same else gram(op_s.features, op_t.features, op_s.kz)
        return a_s.T @ k @ a_t
    if path == "rff":
        if rff is None:
            raise ValueError("rff path needs a projection")
        if op_s.kz.family != "gaussian":
            raise ValueError("random Fourier features approximate the gaussian kernel only")
        emb_s = rff_features(rff, op_s.features) @ a_s
        emb_t = emb_s if a_t is a_s else rff_features(rff, op_t.features) @ a_t
        return emb_s.T @ emb_t
    raise ValueError(f"unknown path {path!r}, expected one of {PATHS}")


def mcmd_squared_cross(op_s: CmeOperator, op_t: CmeOperator, yi: int, yj: int,
                       path: str = "woodbury", rff=None) -> float:
    """Squared MCMD between ``P^s(Z | yi)`` and ``P^t(Z | yj)``."""
    _check_compatible(op_s, op_t)
    g_ss = condition_gram(op_s, None, [yi], path=path, rff=rff)[0, 0]
    g_tt = condition_gram(op_t, None, [yj], path=path, rff=rff)[0, 0]
    g_st = condition_gram(op_s, op_t, [yi], [yj], path=path, rff=rff)[0, 0]
    return clamp_nonnegative(g_ss + g_tt - 2.0 * g_st)


def mcmd_squared_within(op: CmeOperator, yi: int, yj: int, path: str = "woodbury", rff=None) -> float:
    """Squared MCMD between two conditionals of the same sample."""
    ys = np.array([yi, yj], dtype=np.int64)
    op.label_columns(ys)  # validates the labels
    if yi == yj:
        return 0.0
    g = condition_gram(op, None, ys, path=path, rff=rff)
    return clamp_nonnegative(g[0, 0] + g[1, 1] - 2.0 * g[0, 1])


def mcmd_matrix_within(op: CmeOperator, ys=None, path: str = "woodbury", rff=None) -> np.ndarray:
    """All pairwise squared MCMDs between the conditions ``ys`` (default: present labels)."""
    ys = op.classes if ys is None else np.asarray(ys, dtype=np.int64)
    g = condition_gram(op, None, ys, path=path, rff=rff)
    diag = np.diag(g)
    d = diag[:, None] + diag[None, :] - 2.0 * g
    np.fill_diagonal(d, 0.0)
    return clamp_nonnegative(d)


@dataclass(frozen=True)
class RffProjection:
    """Random Fourier map for the gaussian kernel of bandwidth ``sigma``."""

    frequencies: np.ndarray  # r x d, rows ~ N(0, I / sigma^2)
    phases: np.ndarray  # r, uniform on [0, 2 pi)
    seed: int
    sigma: float

    @property
    def rank(self) -> int:
        return self.frequencies.shape[0]


def rff_build(d: int, r: int, sigma: float, seed: int) -> RffProjection:
    if r < 1:
        raise ValueError(f"feature count r must be >= 1, got {r}")
    if not sigma > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    rng = np.random.Generator(np.random.Philox(seed))
    freqs = rng.standard_normal((r, d)) / sigma
    phases = rng.uniform(0.0, 2.0 * np.pi, size=r)
    return RffProjection(frequencies=freqs, phases=phases, seed=int(seed), sigma=float(sigma))


def rff_features(proj: RffProjection, a) -> np.ndarray:
    """Feature matrix ``S`` (r x n) with ``S^T S ~ K``.

    Each column is rescaled to unit norm so the diagonal ``k(a, a) = 1`` is
    reproduced exactly.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != proj.frequencies.shape[1]:
        raise ValueError(f"input of shape {a.shape} does not match projection dimension")
    s = np.cos(proj.frequencies @ a.T + proj.phases[:, None])
    norms = np.sqrt((s * s).sum(0))
    norms[norms == 0.0] = 1.0
    return s / norms
