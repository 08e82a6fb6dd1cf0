"""Kernel functions, Gram matrices and their reverse-mode derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .numerics import as_matrix

FAMILIES = ("gaussian", "laplacian", "linear")


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family != "linear" and not self.bandwidth > 0:
            raise ValueError(f"{self.family} kernel needs a positive bandwidth, got {self.bandwidth}")

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        return KernelSpec(self.family, float(bandwidth))


@dataclass(frozen=True)
class FeatureSet:
    """Samples as rows of ``features``; ``labels`` uses -1 for unlabeled rows."""

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    n_classes: Optional[int] = None

    def __post_init__(self):
        # freeze a view so the caller's array stays writable
        x = np.asarray(self.features, dtype=np.float64).view()
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if np.isnan(x).any():
            raise ValueError("features contain NaN")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.labels is None:
            return
        y = np.asarray(self.labels)
        if y.shape != (x.shape[0],):
            raise ValueError(f"labels must have shape ({x.shape[0]},), got {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if (y < -1).any():
            raise ValueError("labels must be >= -1")
        c = self.n_classes
        if c is None:
            c = int(y.max()) + 1 if y.size and y.max() >= 0 else 0
        elif y.size and y.max() >= c:
            raise ValueError(f"label {int(y.max())} outside [0, {c})")
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "n_classes", int(c))

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None and bool(np.all(self.labels >= 0))

    def unlabeled(self) -> "FeatureSet":
        return FeatureSet(self.features)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _pair_inputs(a, b):
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, clipped at zero."""
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    if a is b:
        np.fill_diagonal(d, 0.0)
    return d


def gram(a, b, spec: KernelSpec) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(a_i, b_j)``.

    gaussian: ``exp(-|a-b|^2 / (2 s^2))``; laplacian: ``exp(-|a-b|_1 / s)``;
    linear: ``<a, b>``.
    """
    same = a is b
    a, b = _pair_inputs(a, b)
    if same:
        b = a
    if spec.family == "linear":
        return a @ b.T
    if spec.family == "gaussian":
        return np.exp(-sq_dists(a, b) / (2.0 * spec.bandwidth**2))
    return np.exp(-cdist(a, b, "cityblock") / spec.bandwidth)


def median_bandwidth(a) -> float:
    """Median of all pairwise Euclidean distances between rows of ``a``."""
    a = as_matrix(a, "A")
    if a.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 samples")
    med = float(np.median(pdist(a)))
    if med <= 0.0:
        if np.all(a == a[0]):
            raise ValueError("degenerate bandwidth: all samples identical")
        # more than half the pairs coincide; fall back to the nonzero distances
        d = pdist(a)
        med = float(np.median(d[d > 0]))
    return med


def gram_backprop(a, b, spec: KernelSpec, upstream, k=None):
    """Gradients of ``sum(upstream * gram(a, b, spec))`` w.r.t. ``a`` and ``b``.

    When the same array is passed for ``a`` and ``b`` the total derivative with
    respect to it is ``grad_a + grad_b``. ``k`` may carry the already computed
    Gram matrix.
    """
    a, b = _pair_inputs(a, b)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (a.shape[0], b.shape[0]):
        raise ValueError(f"upstream shape {u.shape} does not match gram shape {(a.shape[0], b.shape[0])}")
    if spec.family == "linear":
        return u @ b, u.T @ a
    if spec.family == "gaussian":
        w = u * (gram(a, b, spec) if k is None else k)
        s2 = spec.bandwidth**2
        grad_a = (w @ b - w.sum(1)[:, None] * a) / s2
        grad_b = (w.T @ a - w.sum(0)[:, None] * b) / s2
        return grad_a, grad_b
    # laplacian: d/da exp(-|a-b|_1/s) = -k sign(a-b)/s, with sign(0) = 0
    w = u * (gram(a, b, spec) if k is None else k) / spec.bandwidth
    grad_a = np.zeros_like(a)
    grad_b = np.zeros_like(b)
    for j in range(a.shape[1]):
        ws = w * np.sign(a[:, j][:, None] - b[:, j][None, :])
        grad_a[:, j] = -ws.sum(1)
        grad_b[:, j] = ws.sum(0)
    return grad_a, grad_b
