"""
Detection features: kernel density (KD), local intrinsic dimensionality (LID),
raw penultimate activations (DFeat) and their binarized form (QFeat).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .classifier import Model, activations, all_activations, predict, tap_shapes
from .errors import ConfigError
from .tensorio import load_tensor, save_tensor

FAMILIES = ("KD", "LID", "DFeat", "QFeat")
RATIO_FLOOR = 1e-12
LID_CAP = 1e6


def family_tag(name: str) -> str:
    for f in FAMILIES:
        if f.lower() == str(name).lower():
            return f
    raise ConfigError(f"unknown feature family {name!r}; expected one of {FAMILIES}")


@dataclass(frozen=True)
class KdConfig:
    sigma: float | None = None  # None: per-class median pairwise distance
    tap: str = "penultimate"
    max_reference: int = 2000  # cap on pairs used by the median heuristic

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("KD bandwidth must be positive")


@dataclass(frozen=True)
class LidConfig:
    n: int = 20
    batch_size: int = 100
    taps: tuple = ("relu1", "relu2", "relu3", "penultimate", "logits")

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(self.taps))
        if self.n < 2:
            raise ConfigError("LID needs at least 2 neighbours")
        if self.n >= self.batch_size:
            raise ConfigError("LID neighbour count must be below the minibatch size")
        if not self.taps:
            raise ConfigError("LID needs at least one tap")


# ---------------------------------------------------------------------------
# kernel density
# ---------------------------------------------------------------------------

def kernel_density(query, reference, sigma: float):
    """Mean Gaussian kernel ``exp(-||q - r||^2 / sigma^2)`` over the reference rows.

    ``query`` may be one vector or a batch of rows; the result has matching shape.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 2 or len(reference) == 0:
        raise ValueError("reference set must be a nonempty 2-D array")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != reference.shape[1]:
        raise ValueError(f"feature width {q.shape[1]} does not match reference width {reference.shape[1]}")
    d2 = cdist(q, reference, "sqeuclidean")
    kd = np.mean(np.exp(-d2 / sigma**2), axis=1)
    return float(kd[0]) if single else kd


def median_bandwidth(reference, limit: int = 2000) -> float:
    """Median distance over distinct pairs of (at most ``limit``) reference rows."""
    r = np.asarray(reference, dtype=np.float64)[:limit]
    if len(r) < 2:
        return 1.0
    d = cdist(r, r)[np.triu_indices(len(r), 1)]
    d = d[d > 0]
    return float(np.median(d)) if len(d) else 1.0


@dataclass
class KdReference:
    """Per-class reference features and bandwidths, fitted on training data."""

    features: dict
    sigmas: dict
    config: KdConfig

    def density(self, feats, classes) -> np.ndarray:
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        classes = np.atleast_1d(np.asarray(classes))
        out = np.empty(len(feats))
        for k in np.unique(classes):
            if int(k) not in self.features:
                raise ValueError(f"class {k} has no KD reference samples")
            rows = classes == k
            out[rows] = kernel_density(feats[rows], self.features[int(k)], self.sigmas[int(k)])
        return out


def fit_kd_reference(model: Model, images, labels, config: KdConfig = KdConfig()) -> KdReference:
    feats = activations(model, images, config.tap).reshape(len(images), -1).astype(np.float64)
    labels = np.asarray(labels)
    refs, sigmas = {}, {}
    for k in range(model.config.num_classes):
        rows = feats[labels == k]
        if len(rows) == 0:
            raise ValueError(f"class {k} has no KD reference samples")
        refs[k] = rows
        sigmas[k] = float(config.sigma) if config.sigma is not None else median_bandwidth(rows, config.max_reference)
    return KdReference(refs, sigmas, config)


# ---------------------------------------------------------------------------
# local intrinsic dimensionality
# ---------------------------------------------------------------------------

def lid_estimate(distances, floor: float = RATIO_FLOOR, cap: float = LID_CAP) -> float:
    """Maximum-likelihood LID from the distances to the n nearest neighbours."""
    r = np.sort(np.asarray(distances, dtype=np.float64).reshape(-1))
    if len(r) == 0:
        raise ValueError("need at least one distance")
    if r[0] <= 0 or not np.all(np.isfinite(r)):
        raise ValueError("distances must be positive and finite")
    s = np.mean(np.log(np.maximum(r / r[-1], floor)))
    if s == 0:
        return cap
    return float(min(-1.0 / s, cap))


def _lid_rows(queries, pool, n: int, exclude=None) -> np.ndarray:
    """LID of every query row against the pool, ignoring zero distances and ``exclude``d pairs."""
    d = cdist(queries, pool)
    d[d == 0] = np.inf
    if exclude is not None:
        d[exclude] = np.inf
    if np.any(np.sum(np.isfinite(d), axis=1) < n):
        raise ValueError(f"reference pool has fewer than {n} distinct neighbours")
    nearest = np.sort(d, axis=1)[:, :n]
    return np.array([lid_estimate(row) for row in nearest])


def lid_vector(model: Model, x, pool, config: LidConfig = LidConfig()) -> np.ndarray:
    """Per-tap LID of one image against a minibatch of reference images."""
    pool = np.asarray(pool, dtype=np.float32)
    if len(pool) < config.n + 1:
        raise ValueError(f"pool of {len(pool)} images is smaller than n + 1 = {config.n + 1}")
    x = np.asarray(x, dtype=np.float32)
    # a copy of x inside the pool is its own image, whatever the float noise in its activations
    same = np.all(pool.reshape(len(pool), -1) == x.reshape(1, -1), axis=1)[None]
    acts_x = all_activations(model, x[None], config.taps)
    acts_p = all_activations(model, pool, config.taps)
    return np.array([
        _lid_rows(acts_x[t].reshape(1, -1).astype(np.float64), acts_p[t].reshape(len(pool), -1).astype(np.float64),
                  config.n, same)[0]
        for t in config.taps
    ])


def _chunks(total: int, size: int, minimum: int) -> list:
    count = max(1, total // size)
    parts = np.array_split(np.arange(total), count)
    if len(parts[-1]) < minimum and len(parts) > 1:
        parts[-2] = np.concatenate([parts[-2], parts.pop()])
    return parts


def lid_features(model: Model, normals, adversarials, config: LidConfig = LidConfig()):
    """LID matrices for normal and adversarial images.

    Normal images are cut into minibatches that serve as neighbour pools. Each
    normal row is scored against its own minibatch (self-match excluded) and
    each adversarial row against the minibatch at the same position.
    """
    normals = np.asarray(normals, dtype=np.float32)
    adversarials = np.asarray(adversarials, dtype=np.float32)
    if len(normals) < config.n + 1:
        raise ValueError(f"need at least {config.n + 1} normal images for LID pools")
    chunks = _chunks(len(normals), config.batch_size, config.n + 1)
    acts_n = all_activations(model, normals, config.taps)
    acts_a = all_activations(model, adversarials, config.taps) if len(adversarials) else None
    adv_chunk = (np.arange(len(adversarials)) // config.batch_size) % len(chunks)
    lid_n = np.empty((len(normals), len(config.taps)))
    lid_a = np.empty((len(adversarials), len(config.taps)))
    for j, t in enumerate(config.taps):
        flat_n = acts_n[t].reshape(len(normals), -1).astype(np.float64)
        flat_a = acts_a[t].reshape(len(adversarials), -1).astype(np.float64) if acts_a is not None else None
        for c, idx in enumerate(chunks):
            pool = flat_n[idx]
            lid_n[idx, j] = _lid_rows(pool, pool, config.n)
            rows = np.nonzero(adv_chunk == c)[0]
            if len(rows):
                lid_a[rows, j] = _lid_rows(flat_a[rows], pool, config.n)
    return lid_n, lid_a


# ---------------------------------------------------------------------------
# deep features
# ---------------------------------------------------------------------------

def deep_features(model: Model, x) -> np.ndarray:
    if "penultimate" not in tap_shapes(model.config):
        raise ConfigError("model has no 'penultimate' tap")
    return activations(model, x, "penultimate")


def quantize_features(feat) -> np.ndarray:
    """1 where the feature is strictly positive, else 0."""
    return (np.asarray(feat) > 0).astype(np.float32)


# ---------------------------------------------------------------------------
# feature matrices
# ---------------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    rows: np.ndarray  # normalized
    labels: np.ndarray
    family: str
    lo: np.ndarray
    hi: np.ndarray
    columns: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise ValueError("row count must equal label count")

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    @property
    def bounds(self) -> tuple:
        return self.lo, self.hi


def normalize_rows(raw, lo, hi) -> np.ndarray:
    """Min/max scaling into [0, 1]; constant columns map to 0, out-of-range values are clamped."""
    raw = np.asarray(raw, dtype=np.float64)
    span = np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)
    safe = np.where(span > 0, span, 1.0)
    return np.clip((raw - lo) / safe, 0.0, 1.0)


def raw_features(model: Model, normals, adversarials, family: str, kd: KdReference | None = None,
                 lid: LidConfig | None = None):
    """Un-normalized feature rows for both sets plus column names."""
    family = family_tag(family)
    normals = np.asarray(normals, dtype=np.float32)
    adversarials = np.asarray(adversarials, dtype=np.float32)
    if family == "KD":
        if kd is None:
            raise ConfigError("KD features need a fitted KD reference")
        parts = []
        for imgs in (normals, adversarials):
            if len(imgs) == 0:
                parts.append(np.zeros((0, 1)))
                continue
            feats = activations(model, imgs, kd.config.tap).reshape(len(imgs), -1)
            parts.append(kd.density(feats, predict(model, imgs))[:, None])
        return parts[0], parts[1], ["kd"]
    if family == "LID":
        lid = lid or LidConfig()
        a, b = lid_features(model, normals, adversarials, lid)
        return a, b, [f"lid:{t}" for t in lid.taps]
    out = []
    for imgs in (normals, adversarials):
        width = model.config.penultimate_width
        f = deep_features(model, imgs).reshape(len(imgs), -1) if len(imgs) else np.zeros((0, width), np.float32)
        out.append((quantize_features(f) if family == "QFeat" else f).astype(np.float64))
    return out[0], out[1], [f"{family.lower()}:{i}" for i in range(out[0].shape[1])]


def build_feature_matrix(model: Model, normals, adversarials, family: str, kd: KdReference | None = None,
                         lid: LidConfig | None = None, bounds: tuple | None = None) -> FeatureMatrix:
    """Label normals 0 and adversarials 1, then min/max-normalize.

    Bounds are fitted on these rows unless ``bounds`` (taken from a training
    matrix) is given, in which case they are reused unchanged.
    """
    if len(normals) == 0 or len(adversarials) == 0:
        raise ValueError("both the normal and the adversarial set must be nonempty")
    family = family_tag(family)
    a, b, columns = raw_features(model, normals, adversarials, family, kd, lid)
    raw = np.concatenate([a, b])
    labels = np.r_[np.zeros(len(a), np.int64), np.ones(len(b), np.int64)]
    if bounds is None:
        lo, hi = raw.min(axis=0), raw.max(axis=0)
    else:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in bounds)
        if lo.shape != (raw.shape[1],):
            raise ValueError("normalization bounds do not match the feature width")
    config = {}
    if family == "KD" and kd is not None:
        config = {"tap": kd.config.tap, "sigmas": {str(k): v for k, v in kd.sigmas.items()}}
    elif family == "LID":
        config = asdict(lid or LidConfig())
    return FeatureMatrix(normalize_rows(raw, lo, hi), labels, family, lo, hi, columns, config)


def save_feature_matrix(directory, matrix: FeatureMatrix) -> None:
    os.makedirs(directory, exist_ok=True)
    save_tensor(os.path.join(directory, "rows.tnsr"), matrix.rows)
    with open(os.path.join(directory, "labels.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", "label"])
        w.writerows((i, int(v)) for i, v in enumerate(matrix.labels))
    with open(os.path.join(directory, "bounds.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["column", "min", "max"])
        w.writerows((c, repr(float(l)), repr(float(h))) for c, l, h in zip(matrix.columns, matrix.lo, matrix.hi))
    with open(os.path.join(directory, "header.txt"), "w", encoding="utf-8") as f:
        f.write(f"family={matrix.family}\n")
        f.write("config=" + json.dumps(matrix.config, sort_keys=True) + "\n")


def load_feature_matrix(directory) -> FeatureMatrix:
    rows = load_tensor(os.path.join(directory, "rows.tnsr")).astype(np.float64)
    with open(os.path.join(directory, "labels.csv"), newline="", encoding="utf-8") as f:
        labels = np.array([int(r["label"]) for r in csv.DictReader(f)], dtype=np.int64)
    with open(os.path.join(directory, "bounds.csv"), newline="", encoding="utf-8") as f:
        b = list(csv.DictReader(f))
    header = {}
    with open(os.path.join(directory, "header.txt"), encoding="utf-8") as f:
        for line in f:
            key, _, value = line.rstrip("\n").partition("=")
            header[key] = value
    return FeatureMatrix(
        rows=rows.reshape(len(labels), len(b)),
        labels=labels,
        family=family_tag(header["family"]),
        lo=np.array([float(r["min"]) for r in b]),
        hi=np.array([float(r["max"]) for r in b]),
        columns=[r["column"] for r in b],
        config=json.loads(header.get("config", "{}")),
    )
