"""Shallow transformation ``G`` + linear classifier ``F`` and their training.

Training follows two stages. Pre-training fits ``F o G`` to the labeled source
with plain cross-entropy. Adaptation then repeats, once per epoch:

1. forward both domains and take hard predictions;
2. re-estimate importance weights and the target prior with BBSE;
3. refresh the feature-kernel bandwidth and the target pseudo-labels;
4. take one full-batch descent step on the combined objective, with all of
   the above held fixed.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import softmax

from .kernels import FeatureSet, KernelSpec, median_bandwidth
from .label_shift import ConvergenceError, ShiftEstimate, bbse_solve, plug_in_estimates
from .objectives import ClassWeights, LossBundle, loss_e, loss_mul

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MULGLS-PARAMS"
CHECKPOINT_VERSION = 1
TRACE_FIELDS = ("epoch", "j_e", "j_tu", "j_du", "acc_s", "acc_t", "n_pseudo")


class DivergenceError(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class MulParams:
    """Affine layers ``x @ W + b``; all but the last form ``G``, the last is ``F``.

    ``tanh`` is applied between consecutive layers of ``G`` but not after its
    final layer, so ``Z`` is unbounded.
    """

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ValueError("need at least one G layer and the F layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input width does not chain with layer {i - 1}")

    @classmethod
    def init(cls, widths, n_classes: int, seed: int) -> "MulParams":
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation.

        ``widths`` lists ``G``'s layer sizes from input to representation,
        e.g. ``(d, 256, 64)``.
        """
        rng = make_rng(seed)
        sizes = list(widths) + [n_classes]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @property
    def n_g_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def shapes(self) -> list:
        return [list(w.shape) for w in self.weights]

    def copy(self) -> "MulParams":
        return MulParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def step(self, grads: "MulParams", lr: float) -> "MulParams":
        return MulParams([w - lr * g for w, g in zip(self.weights, grads.weights)],
                         [b - lr * g for b, g in zip(self.biases, grads.biases)])

    def add(self, other: "MulParams") -> "MulParams":
        return MulParams([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def _forward_cached(params: MulParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input of shape {x.shape} does not match width {params.weights[0].shape[0]}")
    inputs = []
    h = x
    last = params.n_g_layers - 1
    for i in range(params.n_g_layers):
        inputs.append(h)
        h = h @ params.weights[i] + params.biases[i]
        if i < last:
            h = np.tanh(h)
    z = h
    logits = z @ params.weights[-1] + params.biases[-1]
    return z, logits, inputs


def forward(params: MulParams, x):
    """Return ``(Z, logits)`` with ``Z = G(x)`` and ``logits = F(Z)``."""
    z, logits, _ = _forward_cached(params, x)
    return z, logits


def _backward_g(params: MulParams, inputs, grad_z, gw, gb):
    """Accumulate ``G`` parameter gradients for upstream ``grad_z`` into gw/gb."""
    delta = grad_z
    for i in reversed(range(params.n_g_layers)):
        gw[i] += inputs[i].T @ delta
        gb[i] += delta.sum(0)
        if i:
            # inputs[i] = tanh(pre-activation of layer i-1)
            delta = (delta @ params.weights[i].T) * (1.0 - inputs[i] ** 2)


def backward(params: MulParams, caches, grads_z, grad_logits) -> MulParams:
    """Parameter gradients from per-domain feature gradients and source logit gradients.

    ``caches``/``grads_z`` are parallel lists, one entry per domain; the first
    domain is the one ``grad_logits`` belongs to (may be ``None``).
    """
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    for k, ((z, inputs), grad_z) in enumerate(zip(caches, grads_z)):
        grad_z = np.zeros_like(z) if grad_z is None else np.array(grad_z, dtype=np.float64)
        if k == 0 and grad_logits is not None:
            gw[-1] += z.T @ grad_logits
            gb[-1] += grad_logits.sum(0)
            grad_z = grad_z + grad_logits @ params.weights[-1].T
        _backward_g(params, inputs, grad_z, gw, gb)
    return MulParams(gw, gb)


def predict(params: MulParams, x) -> np.ndarray:
    return np.argmax(forward(params, x)[1], axis=1)


def pseudo_label(logits, tau: float):
    """Rows whose top softmax probability exceeds ``tau``, with their argmax labels."""
    probs = softmax(np.asarray(logits, dtype=np.float64), axis=1)
    idx = np.flatnonzero(probs.max(1) > tau)
    return idx, np.argmax(probs[idx], axis=1) if idx.size else np.zeros(0, dtype=np.int64)


@dataclass
class TrainConfig:
    lambda_tu: float = 1.0
    lambda_du: float = 0.03  # 0.1 collapses some G1 seeds to one class
    eps: float = 1e-3
    eps_alpha: Optional[float] = None  # eps = m ** -alpha when set
    tau: float = 0.8
    lr: float = 0.5
    t_pre: int = 100
    t_adapt: int = 200
    seed: int = 0
    hidden: tuple = (256,)
    z_dim: int = 64
    kz_family: str = "gaussian"
    ky: KernelSpec = field(default_factory=lambda: KernelSpec("gaussian", 1.0))
    path: str = "woodbury"
    tu_pseudo: str = "confident"  # or "argmax": every target row enters the transfer term
    max_halvings: int = 20
    stable_window: int = 5
    stable_rtol: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.t_pre < 0 or self.t_adapt < 0:
            raise ValueError("epoch counts must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.tu_pseudo not in ("confident", "argmax"):
            raise ValueError(f"tu_pseudo must be 'confident' or 'argmax', got {self.tu_pseudo!r}")
        if self.path not in ("naive", "woodbury"):
            raise ValueError(f"training supports the naive and woodbury paths, got {self.path!r}")
        if isinstance(self.ky, dict):
            self.ky = KernelSpec(**self.ky)
        self.hidden = tuple(int(h) for h in self.hidden)

    def widths(self, d: int) -> tuple:
        return (d, *self.hidden, self.z_dim)

    def regularizer(self, m: int) -> float:
        return float(m) ** -self.eps_alpha if self.eps_alpha is not None else self.eps

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [r[name] for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_FIELDS)
            for r in self.records:
                writer.writerow([_fmt(r.get(k)) for k in TRACE_FIELDS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _accuracy(pred, labels):
    return float(np.mean(pred == labels))


def _descend(params, evaluate, cfg: TrainConfig):
    """One gradient step with step halving; ``evaluate(p, grad)`` -> (value, grads)."""
    value, grads, extra = evaluate(params, True)
    if not np.isfinite(value):
        raise DivergenceError("diverged: objective is not finite")
    lr = cfg.lr
    for _ in range(cfg.max_halvings + 1):
        trial = params.step(grads, lr)
        if trial.is_finite():
            trial_value = evaluate(trial, False)[0]
            if np.isfinite(trial_value) and trial_value <= value:
                return trial, value, extra
        lr *= 0.5
    return params, value, extra


def pretrain(params: MulParams, source: FeatureSet, cfg: TrainConfig, target_labels=None,
             target: Optional[FeatureSet] = None, trace: Optional[TrainTrace] = None):
    """Full-batch descent on the unweighted source cross-entropy."""
    if not source.is_labeled:
        raise ValueError("pretraining needs a fully labeled source")
    trace = TrainTrace() if trace is None else trace
    xs, ys = source.features, source.labels
    ones = np.ones(params.weights[-1].shape[1])

    def evaluate(p, need_grad):
        z, logits, inputs = _forward_cached(p, xs)
        if not np.all(np.isfinite(logits)):
            return np.nan, None, None
        bundle = loss_e(logits, ys, ones)
        if not need_grad:
            return bundle.value, None, None
        return bundle.value, backward(p, [(z, inputs)], [None], bundle.grad_logits), logits

    for _ in range(cfg.t_pre):
        params, value, logits = _descend(params, evaluate, cfg)
        acc_t = None
        if target is not None and target_labels is not None:
            acc_t = _accuracy(predict(params, target.features), target_labels)
        trace.append(epoch=len(trace) + 1, j_e=value, j_tu=0.0, j_du=0.0,
                     acc_s=_accuracy(np.argmax(logits, 1), ys), acc_t=acc_t, n_pseudo=0)
    return params, trace


def _pooled_bandwidth(zs, zt, cap: int = 1000):
    pooled = np.vstack([zs, zt])
    if pooled.shape[0] > cap:
        pooled = pooled[:: int(np.ceil(pooled.shape[0] / cap))]
    return median_bandwidth(pooled)


def _estimate_weights(pred_s, ys, pred_t, c):
    p_s, q_t, confusion = plug_in_estimates(pred_s, ys, pred_t, c)
    try:
        return bbse_solve(q_t, confusion, p_s)
    except ConvergenceError as exc:
        log.warning("%s; using best iterate (residual %.3e)", exc, exc.residual)
        w = exc.w
        full = np.zeros(c)
        full[p_s > 0] = w
        return ShiftEstimate(full, p_s, full * p_s, confusion, exc.residual)


def adapt(params: MulParams, source: FeatureSet, target: FeatureSet, cfg: TrainConfig,
          target_labels=None, trace: Optional[TrainTrace] = None):
    """Adaptation stage; returns ``(params, shift_history, trace)``.

    Only ``target.features`` is read. ``target_labels`` (optional, oracle)
    feeds the accuracy column of the trace and nothing else.
    """
    if not source.is_labeled:
        raise ValueError("adaptation needs a fully labeled source")
    trace = TrainTrace() if trace is None else trace
    xs, ys = source.features, source.labels
    xt = target.features
    c = params.weights[-1].shape[1]
    eps = cfg.regularizer(max(xs.shape[0], xt.shape[0]))
    history = []
    du_values = []
    du_with_target = False

    for _ in range(cfg.t_adapt):
        zs, logits_s = forward(params, xs)
        zt, logits_t = forward(params, xt)
        pred_s = np.argmax(logits_s, 1)
        shift = _estimate_weights(pred_s, ys, np.argmax(logits_t, 1), c)
        history.append(shift)
        weights = ClassWeights(shift.w, shift.p_t / shift.p_t.sum())
        kz = KernelSpec(cfg.kz_family, _pooled_bandwidth(zs, zt))
        idx, lab = pseudo_label(logits_t, cfg.tau)
        confident = np.full(xt.shape[0], -1, dtype=np.int64)
        confident[idx] = lab
        yt_tu = np.argmax(logits_t, 1) if cfg.tu_pseudo == "argmax" else confident
        yt_du = confident if du_with_target else None
        n_pseudo = int(idx.size)

        def evaluate(p, need_grad):
            z_s, lg_s, in_s = _forward_cached(p, xs)
            z_t, _, in_t = _forward_cached(p, xt)
            if not (np.all(np.isfinite(lg_s)) and np.all(np.isfinite(z_t))):
                return np.nan, None, None
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                bundle: LossBundle = loss_mul(lg_s, z_s, ys, z_t, yt_tu, weights, kz, cfg.ky, eps,
                                              cfg.lambda_tu, cfg.lambda_du, yt_du=yt_du,
                                              path=cfg.path, with_grad=need_grad)
            if not need_grad:
                return bundle.value, None, None
            grads = backward(p, [(z_s, in_s), (z_t, in_t)],
                             [bundle.grad_source_Z, bundle.grad_target_Z], bundle.grad_logits)
            return bundle.value, grads, bundle.parts

        params, _, parts = _descend(params, evaluate, cfg)
        if not du_with_target and cfg.lambda_du:
            du_values.append(parts["j_du"])
            w = cfg.stable_window
            if len(du_values) > w:
                ref = du_values[-1 - w]
                if ref and abs(du_values[-1] - ref) / abs(ref) < cfg.stable_rtol:
                    du_with_target = True
        acc_t = None
        if target_labels is not None:
            acc_t = _accuracy(np.argmax(logits_t, 1), target_labels)
        trace.append(epoch=len(trace) + 1, j_e=parts["j_e"], j_tu=parts["j_tu"],
                     j_du=parts["j_du"], acc_s=_accuracy(pred_s, ys), acc_t=acc_t,
                     n_pseudo=n_pseudo, w=shift.w.tolist(), p_t=shift.p_t.tolist())
    return params, history, trace


def save_params(params: MulParams, path) -> None:
    """Header line, JSON shape line, then raw little-endian float64 W, b per layer."""
    header = json.dumps({"version": CHECKPOINT_VERSION, "activation": "tanh",
                         "shapes": params.shapes}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(header.encode("ascii") + b"\n")
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path) -> MulParams:
    raw = Path(path).read_bytes()
    try:
        magic, rest = raw.split(b"\n", 1)
        header, body = rest.split(b"\n", 1)
        name, version = magic.split(b" ")
        meta = json.loads(header)
    except ValueError as exc:
        raise ValueError(f"{path}: not a parameter checkpoint") from exc
    if name != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint {magic!r}")
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in meta["shapes"]:
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            chunk = body[offset: offset + 8 * count]
            if len(chunk) != 8 * count:
                raise ValueError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
            (weights if len(shape) == 2 else biases).append(arr)
            offset += 8 * count
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return MulParams(weights, biases)
