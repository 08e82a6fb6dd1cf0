"""Metrics for adapted representations and prior estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    accuracy: float
    J_b: float
    J_w: float
    discriminability: float
    prior_error_linf: float
    prior_error_l1: float
    D_st: np.ndarray

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "J_b": self.J_b,
            "J_w": self.J_w,
            "discriminability": self.discriminability,
            "prior_error_linf": self.prior_error_linf,
            "prior_error_l1": self.prior_error_l1,
            # missing prototype pairs are written as null
            "D_st": [[None if np.isnan(v) else float(v) for v in row] for row in self.D_st],
        }


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == labels))


def scatter(z, labels):
    """Between-class ``J_b = mean_k |m_k - m|^2`` and within-class ``J_w = mean_i |z_i - m_{y_i}|^2``."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("scatter statistics need at least two classes")
    centre = z.mean(0)
    means = np.stack([z[labels == k].mean(0) for k in classes])
    j_b = float(np.mean(((means - centre) ** 2).sum(1)))
    slot = np.searchsorted(classes, labels)
    j_w = float(np.mean(((z - means[slot]) ** 2).sum(1)))
    return j_b, j_w


def discriminability(z, labels):
    """``(J_b, J_w, J_b / J_w)``; a zero within-class scatter is an error."""
    j_b, j_w = scatter(z, labels)
    if j_w == 0.0:
        raise ValueError("within-class scatter is zero; discriminability undefined")
    return j_b, j_w, j_b / j_w


def _unit_rows(z):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.where(norms == 0.0, 1.0, norms)


def prototype_distance_matrix(zs, ys, zt, yt, n_classes=None) -> np.ndarray:
    """``D[i, j] = |mean_s(class i) - mean_t(class j)|^2`` on unit-normalised samples.

    Entries involving a class with no samples in its domain are NaN.
    """
    zs, zt = _unit_rows(np.asarray(zs, dtype=np.float64)), _unit_rows(np.asarray(zt, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.int64)
    yt = np.asarray(yt, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(ys.max(), yt.max())) + 1

    def prototypes(z, y):
        out = np.full((n_classes, z.shape[1]), np.nan)
        for k in range(n_classes):
            if np.any(y == k):
                out[k] = z[y == k].mean(0)
        return out

    ps, pt = prototypes(zs, ys), prototypes(zt, yt)
    return ((ps[:, None, :] - pt[None, :, :]) ** 2).sum(-1)


def prior_error(p_hat, p_true):
    """``(max |p_hat - p_true|, sum |p_hat - p_true|)``."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p_true = np.asarray(p_true, dtype=np.float64)
    if p_hat.shape != p_true.shape:
        raise ValueError(f"length mismatch: {p_hat.shape} vs {p_true.shape}")
    err = np.abs(p_hat - p_true)
    return float(err.max()), float(err.sum())


def metrics_report(z, preds, labels, zs, ys, p_hat, p_true, n_classes=None) -> MetricsReport:
    """Bundle the target-side metrics; ``z``/``labels`` are target representations and oracle labels."""
    j_b, j_w = scatter(z, labels)
    linf, l1 = prior_error(p_hat, p_true)
    return MetricsReport(
        accuracy=accuracy(preds, labels),
        J_b=j_b,
        J_w=j_w,
        discriminability=j_b / j_w if j_w > 0 else float("nan"),
        prior_error_linf=linf,
        prior_error_l1=l1,
        D_st=prototype_distance_matrix(zs, ys, z, labels, n_classes),
    )
