"""Loss terms of the minimum-uncertainty objective and their gradients.

All three terms are evaluated on the full batch. Labels, pseudo-labels, class
weights and the kernel bandwidth are constants inside one evaluation, so the
regularised label Gram inverse does not depend on the features and the kernel
terms are differentiated through the feature Gram matrices only:

``d/dK  a^T K b = a b^T``

which ``gram_backprop`` then pushes down to the feature rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .embedding import clamp_nonnegative, embedding_coefficients, fit_cme
from .kernels import FeatureSet, KernelSpec, gram, gram_backprop

SIMPLEX_TOL = 1e-8


@dataclass
class LossBundle:
    value: float
    grad_source_Z: np.ndarray
    grad_target_Z: np.ndarray
    grad_logits: Optional[np.ndarray] = None
    parts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ClassWeights:
    """Importance weights ``w = p_t / p_s`` and the target prior they imply."""

    w: np.ndarray
    p_t: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        p = check_simplex(self.p_t, "target prior")
        if w.shape != p.shape:
            raise ValueError("weights and prior must have the same length")
        if (w < 0).any():
            raise ValueError("importance weights must be nonnegative")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "p_t", p)

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        return cls(np.ones(n_classes), np.full(n_classes, 1.0 / n_classes))


def check_simplex(p, name: str = "vector", tol: float = SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be a finite 1-D vector")
    if (p < -tol).any() or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"{name} is not a simplex vector: {p.tolist()}")
    return np.clip(p, 0.0, None)


def _n_classes(*label_arrays) -> int:
    return int(max(int(np.max(y)) for y in label_arrays if np.size(y)) + 1)


def loss_du(zs, ys, kz: KernelSpec, ky: KernelSpec, eps: float, zt=None, yt=None,
            n_classes: Optional[int] = None, path: str = "woodbury", with_grad: bool = True,
            k_ss=None) -> LossBundle:
    """Sum of squared MCMDs between every ordered pair of distinct classes.

    Target rows with ``yt >= 0`` are appended to the source sample with their
    pseudo-labels; rows with ``yt == -1`` are ignored. ``k_ss`` may carry
    ``gram(zs, zs, kz)``.
    """
    zs = np.asarray(zs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    n_s = zs.shape[0]
    z, y = zs, ys
    keep = None
    k_full = k_ss
    if zt is not None:
        zt = np.asarray(zt, dtype=np.float64)
        yt = np.asarray(yt, dtype=np.int64)
        keep = np.flatnonzero(yt >= 0)
        if keep.size:
            z = np.vstack([zs, zt[keep]])
            y = np.concatenate([ys, yt[keep]])
            k_full = None
    c = n_classes or _n_classes(y)
    op = fit_cme(FeatureSet(z, y, c), kz, ky, eps, feature_gram=k_full)
    classes = op.classes
    k = classes.size
    if k < 2:
        raise ValueError("degenerate DU: fewer than two classes present")
    a = embedding_coefficients(op, classes, path)
    g = a.T @ op.feature_gram @ a
    diag = np.diag(g)
    pairwise = clamp_nonnegative(diag[:, None] + diag[None, :] - 2.0 * g)
    np.fill_diagonal(pairwise, 0.0)
    value = float(pairwise.sum())
    grad_t = np.zeros_like(zt) if zt is not None else np.zeros((0, zs.shape[1]))
    if not with_grad:
        return LossBundle(value, np.zeros_like(zs), grad_t)
    # sum over ordered pairs a != b of (e_a - e_b)(e_a - e_b)^T
    pair_weights = 2.0 * (k * np.eye(k) - np.ones((k, k)))
    ga, gb = gram_backprop(z, z, kz, a @ pair_weights @ a.T, k=op.feature_gram)
    grad = ga + gb
    if keep is not None:
        grad_t[keep] = grad[n_s:]
    return LossBundle(value, grad[:n_s], grad_t)


def loss_tu(zs, ys, zt, yt, p_t, kz: KernelSpec, ky: KernelSpec, eps: float,
            n_classes: Optional[int] = None, path: str = "woodbury", with_grad: bool = True,
            k_ss=None) -> LossBundle:
    """Target-prior weighted squared MCMD between matching source/target classes.

    ``yt`` holds target pseudo-labels, -1 for rows left out. Classes carrying
    prior mass but missing from either domain are skipped with a warning.
    """
    p_t = check_simplex(p_t, "target prior")
    zs = np.asarray(zs, dtype=np.float64)
    zt = np.asarray(zt, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    yt = np.asarray(yt, dtype=np.int64)
    c = n_classes or p_t.size
    if p_t.size != c:
        raise ValueError(f"prior has {p_t.size} entries, expected {c}")
    keep = np.flatnonzero(yt >= 0)
    zt_k, yt_k = zt[keep], yt[keep]
    in_s = np.isin(np.arange(c), ys)
    in_t = np.isin(np.arange(c), yt_k)
    weighted = p_t > 0
    missing = np.flatnonzero(weighted & ~(in_s & in_t))
    if missing.size:
        warnings.warn(f"transfer term skips classes {missing.tolist()}: absent from one domain",
                      RuntimeWarning, stacklevel=2)
    active = np.flatnonzero(weighted & in_s & in_t)
    if active.size == 0:
        raise ValueError("degenerate TU: no weighted class is present in both domains")
    op_s = fit_cme(FeatureSet(zs, ys, c), kz, ky, eps, feature_gram=k_ss)
    op_t = fit_cme(FeatureSet(zt_k, yt_k, c), kz, ky, eps)
    a_s = embedding_coefficients(op_s, active, path)
    a_t = embedding_coefficients(op_t, active, path)
    k_st = gram(zs, zt_k, kz)
    terms = ((a_s * (op_s.feature_gram @ a_s)).sum(0)
             + (a_t * (op_t.feature_gram @ a_t)).sum(0)
             - 2.0 * (a_s * (k_st @ a_t)).sum(0))
    terms = clamp_nonnegative(terms)
    p = p_t[active]
    value = float(p @ terms)
    if not with_grad:
        return LossBundle(value, np.zeros_like(zs), np.zeros_like(zt))
    ps, pt_ = a_s * p, a_t * p
    ga, gb = gram_backprop(zs, zs, kz, ps @ a_s.T, k=op_s.feature_gram)
    grad_s = ga + gb
    ga, gb = gram_backprop(zt_k, zt_k, kz, pt_ @ a_t.T, k=op_t.feature_gram)
    grad_tk = ga + gb
    ga, gb = gram_backprop(zs, zt_k, kz, -2.0 * ps @ a_t.T, k=k_st)
    grad_s += ga
    grad_tk += gb
    grad_t = np.zeros_like(zt)
    grad_t[keep] = grad_tk
    return LossBundle(value, grad_s, grad_t)


def loss_e(logits, ys, w) -> LossBundle:
    """Importance-weighted cross-entropy averaged over the source samples."""
    logits = np.asarray(logits, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    w = np.asarray(getattr(w, "w", w), dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != ys.shape[0]:
        raise ValueError(f"logits shape {logits.shape} does not match {ys.shape[0]} labels")
    if w.shape != (logits.shape[1],):
        raise ValueError(f"weights must have length {logits.shape[1]}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    n = ys.shape[0]
    rows = np.arange(n)
    sample_w = w[ys]
    value = float(-(sample_w * log_softmax(logits, axis=1)[rows, ys]).sum() / n)
    grad = softmax(logits, axis=1)
    grad[rows, ys] -= 1.0
    grad *= sample_w[:, None] / n
    return LossBundle(value, np.zeros((n, 0)), np.zeros((0, 0)), grad_logits=grad)


def loss_mul(logits, zs, ys, zt, yt_tu, weights: ClassWeights, kz: KernelSpec, ky: KernelSpec,
             eps: float, lambda_tu: float, lambda_du: float, yt_du=None,
             path: str = "woodbury", with_grad: bool = True) -> LossBundle:
    """``J_E + lambda_tu * J_TU - lambda_du * J_DU``.

    ``yt_tu`` and ``yt_du`` are target pseudo-label vectors (-1 = excluded)
    for the transfer and decision terms; ``yt_du=None`` keeps the decision
    term source-only. Terms with a zero multiplier are not evaluated.
    """
    zs = np.asarray(zs, dtype=np.float64)
    zt = np.asarray(zt, dtype=np.float64)
    c = weights.p_t.size
    e = loss_e(logits, ys, weights.w)
    grad_s = np.zeros_like(zs)
    grad_t = np.zeros_like(zt)
    value = e.value
    parts = {"j_e": e.value, "j_tu": 0.0, "j_du": 0.0}
    k_ss = gram(zs, zs, kz) if (lambda_tu or lambda_du) else None
    if lambda_tu:
        tu = loss_tu(zs, ys, zt, yt_tu, weights.p_t, kz, ky, eps, n_classes=c, path=path,
                     with_grad=with_grad, k_ss=k_ss)
        value += lambda_tu * tu.value
        grad_s += lambda_tu * tu.grad_source_Z
        grad_t += lambda_tu * tu.grad_target_Z
        parts["j_tu"] = tu.value
    if lambda_du:
        if yt_du is None:
            du = loss_du(zs, ys, kz, ky, eps, n_classes=c, path=path, with_grad=with_grad,
                         k_ss=k_ss)
        else:
            du = loss_du(zs, ys, kz, ky, eps, zt=zt, yt=yt_du, n_classes=c, path=path,
                         with_grad=with_grad, k_ss=k_ss)
            grad_t -= lambda_du * du.grad_target_Z
        value -= lambda_du * du.value
        grad_s -= lambda_du * du.grad_source_Z
        parts["j_du"] = du.value
    return LossBundle(float(value), grad_s, grad_t, grad_logits=e.grad_logits, parts=parts)
