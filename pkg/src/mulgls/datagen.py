"""Synthetic generalized-label-shift scenarios and the feature CSV format.

A scenario is a gaussian class-conditional mixture per domain. The target
differs from the source by per-class mean translations, optional covariance
scaling, and a different class prior.

CSV layout: header ``f0,...,f{d-1},label``, one sample per row, label ``-1``
for unlabeled rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import FeatureSet
from .label_shift import l1_label_distance
from .model import make_rng


@dataclass(frozen=True)
class GlsScenario:
    means_s: np.ndarray  # c x d
    covs_s: np.ndarray  # c x d x d
    means_t: np.ndarray
    covs_t: np.ndarray
    prior_s: np.ndarray
    prior_t: np.ndarray
    n_source: int
    n_target: int
    seed: int = 0

    def __post_init__(self):
        for name in ("means_s", "covs_s", "means_t", "covs_t", "prior_s", "prior_t"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        c, d = self.means_s.shape
        if self.means_t.shape != (c, d):
            raise ValueError("source and target means disagree in shape")
        for name in ("covs_s", "covs_t"):
            covs = getattr(self, name)
            if covs.shape != (c, d, d):
                raise ValueError(f"{name} must have shape {(c, d, d)}")
            for k, cov in enumerate(covs):
                if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
                    raise ValueError(f"invalid covariance: {name}[{k}] is not SPD")
        for name in ("prior_s", "prior_t"):
            p = getattr(self, name)
            if p.shape != (c,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a simplex vector of length {c}")
        if self.n_source < 1 or self.n_target < 1:
            raise ValueError("sample counts must be positive")

    @property
    def n_classes(self) -> int:
        return self.means_s.shape[0]

    def with_seed(self, seed: int) -> "GlsScenario":
        return GlsScenario(self.means_s, self.covs_s, self.means_t, self.covs_t,
                           self.prior_s, self.prior_t, self.n_source, self.n_target, seed)


@dataclass(frozen=True)
class Oracle:
    prior_s: np.ndarray
    prior_t: np.ndarray
    shifts: np.ndarray
    target_labels: np.ndarray = field(repr=False)

    @property
    def l1_distance(self) -> float:
        return l1_label_distance(self.prior_s, self.prior_t)

    def to_dict(self) -> dict:
        return {
            "prior_s": self.prior_s.tolist(),
            "prior_t": self.prior_t.tolist(),
            "l1_distance": self.l1_distance,
            "shifts": self.shifts.tolist(),
            "target_labels": self.target_labels.tolist(),
        }


def _draw(rng, means, covs, prior, n):
    c = prior.size
    labels = rng.choice(c, size=n, p=prior)
    x = np.empty((n, means.shape[1]))
    for k in range(c):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            x[idx] = rng.multivariate_normal(means[k], covs[k], size=idx.size, method="cholesky")
    return x, labels


def synth_gls(scenario: GlsScenario):
    """Sample ``(source, target, oracle)``; the target keeps its labels for evaluation."""
    rng = make_rng(scenario.seed)
    c = scenario.n_classes
    xs, ys = _draw(rng, scenario.means_s, scenario.covs_s, scenario.prior_s, scenario.n_source)
    xt, yt = _draw(rng, scenario.means_t, scenario.covs_t, scenario.prior_t, scenario.n_target)
    oracle = Oracle(scenario.prior_s.copy(), scenario.prior_t.copy(),
                    scenario.means_t - scenario.means_s, yt)
    return FeatureSet(xs, ys, c), FeatureSet(xt, yt, c), oracle


def _isotropic(c, d, scale):
    return np.repeat((scale * np.eye(d))[None], c, axis=0)


def _triangle(spacing):
    h = spacing * np.sqrt(3.0) / 2.0
    return np.array([[0.0, 0.0], [spacing, 0.0], [spacing / 2.0, h]])


def make_scenario(name: str, seed: int = 0, n: int | None = None) -> GlsScenario:
    """Named scenarios: ``null``, ``g1`` (conditional + label shift), ``g2`` (partial)."""
    name = name.lower()
    if name == "null":
        means = _triangle(4.0)
        covs = _isotropic(3, 2, 0.5)
        prior = np.full(3, 1.0 / 3.0)
        n = 600 if n is None else n
        return GlsScenario(means, covs, means, covs, prior, prior, n, n, seed)
    if name == "g1":
        # tight clusters: a shift of 1.5 must not push a class into its neighbour's region
        means = _triangle(4.0)
        covs = _isotropic(3, 2, 0.16)
        shift = np.array([1.5, 0.0])
        n = 600 if n is None else n
        return GlsScenario(means, covs, means + shift, covs, np.full(3, 1.0 / 3.0),
                           np.array([0.6, 0.3, 0.1]), n, n, seed)
    if name == "g2":
        means = 4.0 * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        covs = _isotropic(4, 2, 0.5)
        shift = np.array([0.5, 0.0])
        n = 800 if n is None else n
        return GlsScenario(means, covs, means + shift, covs, np.full(4, 0.25),
                           np.array([0.5, 0.5, 0.0, 0.0]), n, n, seed)
    raise ValueError(f"unknown scenario {name!r}; choose from null, g1, g2")


def save_features(data: FeatureSet, path, labels=True) -> None:
    """Write ``data`` as CSV; floats use ``repr`` so a reload is bit-identical."""
    d = data.dim
    y = data.labels if (labels and data.labels is not None) else np.full(len(data), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, lab in zip(data.features, y):
            writer.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_features(path, n_classes: int | None = None) -> FeatureSet:
    """Parse a feature CSV. An all ``-1`` label column yields an unlabeled set."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        d = len(header) - 1
        if d < 1 or header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(d)]:
            raise ValueError(f"{path}:1: header must be f0,...,f{{d-1}},label")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:-1]])
                lab = int(row[-1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            if lab < -1:
                raise ValueError(f"{path}:{lineno}: label must be >= -1, got {lab}")
            labels.append(lab)
    x = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{path}: non-finite feature values")
    y = np.array(labels, dtype=np.int64)
    if y.size == 0 or np.all(y == -1):
        return FeatureSet(x, None, n_classes)
    return FeatureSet(x, y, n_classes)
