"""Black-box shift estimation of importance weights and the target prior.

The weights solve the constrained least-squares problem

    min_w |q_t - C w|^2   s.t.  w >= 0,  w . p_s = 1

where ``C[i, j] = P_s(Yhat = i, Y = j)`` and ``q_t[i] = P_t(Yhat = i)`` are
plug-in frequencies of a fixed classifier's hard predictions. The target prior
follows as ``p_t = w * p_s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    """Raised when the QP solver exhausts its iteration budget."""

    def __init__(self, message, w, residual):
        super().__init__(message)
        self.w = w
        self.residual = residual


@dataclass(frozen=True)
class ShiftEstimate:
    w: np.ndarray
    p_s: np.ndarray
    p_t: np.ndarray
    confusion: np.ndarray
    residual: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "w": self.w.tolist(),
            "p_s": self.p_s.tolist(),
            "p_t": self.p_t.tolist(),
            "confusion": self.confusion.tolist(),
            "residual": self.residual,
        }


def _frequencies(values, n_classes):
    return np.bincount(values, minlength=n_classes)[:n_classes] / values.shape[0]


def plug_in_estimates(preds_s, ys, preds_t, n_classes=None):
    """Source prior, target prediction frequencies and joint confusion matrix."""
    preds_s = np.asarray(preds_s, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    preds_t = np.asarray(preds_t, dtype=np.int64)
    if preds_s.size == 0 or preds_t.size == 0:
        raise ValueError("plug-in estimates need nonempty source and target predictions")
    if preds_s.shape != ys.shape:
        raise ValueError("source predictions and labels differ in length")
    if n_classes is None:
        n_classes = int(max(preds_s.max(), ys.max(), preds_t.max())) + 1
    p_s = _frequencies(ys, n_classes)
    q_t = _frequencies(preds_t, n_classes)
    confusion = np.zeros((n_classes, n_classes))
    np.add.at(confusion, (preds_s, ys), 1.0)
    confusion /= ys.shape[0]
    return p_s, q_t, confusion


def project_weighted_simplex(v, p):
    """Euclidean projection of ``v`` onto ``{w >= 0, w . p = 1}`` (``p > 0``).

    The projection is ``max(v - theta p, 0)`` for the unique ``theta`` making
    the constraint tight; ``theta`` is located exactly between sorted
    breakpoints ``v_i / p_i``.
    """
    v = np.asarray(v, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    ratio = v / p
    order = np.argsort(ratio, kind="stable")[::-1]
    # with the top-k coordinates active: sum p_i v_i - theta sum p_i^2 = 1
    pv = np.cumsum((p * v)[order])
    pp = np.cumsum((p * p)[order])
    thetas = (pv - 1.0) / pp
    # largest k whose k-th breakpoint stays active under its own theta
    valid = ratio[order] > thetas
    k = int(np.flatnonzero(valid)[-1]) if valid.any() else 0
    theta = thetas[k]
    return np.maximum(v - theta * p, 0.0)


def bbse_solve(q_t, confusion, p_s, tol: float = 1e-10, max_iter: int = 100_000) -> ShiftEstimate:
    """Solve the BBSE quadratic program by accelerated projected gradient."""
    q_t = np.asarray(q_t, dtype=np.float64)
    confusion = np.asarray(confusion, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    c = p_s.size
    if confusion.shape != (c, c) or q_t.shape != (c,):
        raise ValueError("confusion, q_t and p_s have inconsistent sizes")
    if (p_s < 0).any() or not p_s.sum() > 0:
        raise ValueError("source prior must be nonnegative with positive mass")
    # classes never seen in the source get zero weight and leave the problem
    seen = np.flatnonzero(p_s > 0)
    cmat = confusion[:, seen]
    ps = p_s[seen]
    hess = cmat.T @ cmat
    lipschitz = float(np.linalg.norm(hess, 2))
    step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    lin = cmat.T @ q_t

    def objective(w):
        r = q_t - cmat @ w
        return float(r @ r)

    w = project_weighted_simplex(np.ones(ps.size), ps)
    y, t = w.copy(), 1.0
    best_w, best_f = w, objective(w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w_new = project_weighted_simplex(y - step * (hess @ y - lin), ps)
        f_new = objective(w_new)
        if f_new < best_f:
            best_w, best_f = w_new, f_new
        delta = np.max(np.abs(w_new - w))
        # restart momentum when the step points uphill
        if (y - w_new) @ (w_new - w) > 0:
            t_new, y = 1.0, w_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        w, t = w_new, t_new
        if delta < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"BBSE solver did not converge in {max_iter} iterations",
                               best_w, best_f)
    full = np.zeros(c)
    full[seen] = w
    p_t = full * p_s
    return ShiftEstimate(w=full, p_s=p_s, p_t=p_t, confusion=confusion,
                         residual=objective(w), iterations=it)


def estimate_shift(preds_s, ys, preds_t, n_classes=None, **kw) -> ShiftEstimate:
    p_s, q_t, confusion = plug_in_estimates(preds_s, ys, preds_t, n_classes)
    return bbse_solve(q_t, confusion, p_s, **kw)


def l1_label_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())
