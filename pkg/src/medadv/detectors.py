"""
Adversarial-vs-normal detectors, ROC/AUC, and the detection and
cross-attack transferability experiments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """Empirical ROC and its trapezoidal area.

    Tied scores form a single threshold step, so a tied positive/negative pair
    contributes one half, matching the rank (Mann-Whitney) formulation.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    pos = int(np.sum(y == 1))
    neg = int(np.sum(y == 0))
    if pos == 0 or neg == 0 or pos + neg != len(y):
        raise ValueError("labels must be binary with both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, auc)


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        w.writerows((f"{a:.9g}", f"{b:.9g}") for a, b in zip(curve.fpr, curve.tpr))


# ---------------------------------------------------------------------------
# logistic detector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    l2: float = 1e-4
    iterations: int = 500
    step: float = 0.1

    def __post_init__(self):
        if self.l2 < 0 or self.iterations < 1 or not self.step > 0:
            raise ConfigError("detector config needs l2 >= 0, iterations >= 1 and step > 0")


@dataclass
class Detector:
    weights: np.ndarray
    bias: float
    family: str = ""
    source: str = ""
    iterations: int = 0
    final_loss: float = float("nan")
    step: float = 0.0
    losses: list = field(default_factory=list, repr=False)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _logistic_loss(X, y, w, b, sw, l2):
    t = X @ w + b
    # log(1 + e^t) - y t, written stably
    per = np.logaddexp(0.0, t) - y * t
    return float(np.sum(sw * per) + 0.5 * l2 * np.dot(w, w)), t


def fit_detector(rows, labels, config: DetectorConfig = DetectorConfig(), sample_weight=None,
                 family: str = "", source: str = "") -> Detector:
    """L2-regularized logistic regression by full-batch gradient descent from zero.

    The loss is the weighted mean log-loss. The step is ``min(config.step, 1/L)``
    with ``L`` a bound on the loss curvature, so every iteration is a descent
    step; the loss history is checked for that.
    """
    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64).reshape(-1)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("rows must be 2-D with one label per row")
    if not (np.any(y == 1) and np.any(y == 0)) or np.any((y != 0) & (y != 1)):
        raise ValueError("detector training needs both labels 0 and 1")
    sw = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if sw.shape != y.shape or np.any(sw < 0) or not sw.sum() > 0:
        raise ValueError("sample weights must be non-negative, one per row")
    sw = sw / sw.sum()
    Xa = np.hstack([X, np.ones((len(X), 1))])
    curvature = 0.25 * np.linalg.eigvalsh((Xa * sw[:, None]).T @ Xa)[-1] + config.l2
    step = min(config.step, 1.0 / curvature)
    w = np.zeros(X.shape[1])
    b = 0.0
    loss, t = _logistic_loss(X, y, w, b, sw, config.l2)
    losses = [loss]
    for _ in range(config.iterations):
        r = sw * (_sigmoid(t) - y)
        w = w - step * (X.T @ r + config.l2 * w)
        b = b - step * float(np.sum(r))
        loss, t = _logistic_loss(X, y, w, b, sw, config.l2)
        if loss > losses[-1] + 1e-12 * max(1.0, abs(losses[-1])):
            raise ArithmeticError(f"detector loss increased: {losses[-1]!r} -> {loss!r}")
        losses.append(loss)
    return Detector(w, b, family, source, config.iterations, losses[-1], step, losses)


def score(detector: Detector, rows) -> np.ndarray:
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if X.shape[1] != len(detector.weights):
        raise ValueError(f"expected {len(detector.weights)} feature columns, got {X.shape[1]}")
    return _sigmoid(X @ detector.weights + detector.bias)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

ROW_FIELDS = ["dataset", "family", "source", "target", "protocol", "auc",
              "fit_normal", "fit_adversarial", "eval_normal", "eval_adversarial"]


@dataclass
class AucRow:
    dataset: str
    family: str
    source: str
    target: str
    protocol: str
    auc: float | None
    fit_normal: int = 0
    fit_adversarial: int = 0
    eval_normal: int = 0
    eval_adversarial: int = 0

    def as_csv(self) -> list:
        auc = "n/a" if self.auc is None else f"{self.auc:.6f}"
        return [self.dataset, self.family, self.source, self.target, self.protocol, auc,
                self.fit_normal, self.fit_adversarial, self.eval_normal, self.eval_adversarial]


def write_rows(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        w.writerows(r.as_csv() for r in rows)


def read_rows(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        out = []
        for r in csv.DictReader(f):
            auc = None if r["auc"] == "n/a" else float(r["auc"])
            out.append(AucRow(r["dataset"], r["family"], r["source"], r["target"], r["protocol"], auc,
                              *(int(r[k]) for k in ROW_FIELDS[6:])))
        return out


def _split(batch):
    """Normals are the attacked (correctly classified) originals; adversarials the successful ones."""
    return batch.originals, batch.adversarials[batch.success]


def _union(*batches):
    normals, advs = zip(*(_split(b) for b in batches))
    return np.concatenate(normals), np.concatenate(advs)


def _fit_and_eval(model, fit_sets, eval_sets, family, kd, lid, config, source):
    from .features import build_feature_matrix

    train = build_feature_matrix(model, *fit_sets, family, kd=kd, lid=lid)
    det = fit_detector(train.rows, train.labels, config, family=train.family, source=source)
    test = build_feature_matrix(model, *eval_sets, family, kd=kd, lid=lid, bounds=train.bounds)
    return roc_auc(score(det, test.rows), test.labels).auc, train, test


def detect_experiment(model, adv_train, adv_test, family: str, kd=None, lid=None,
                      config: DetectorConfig = DetectorConfig(), dataset: str = "synthetic") -> AucRow:
    """Fit on AdvTrain features, report AUC on AdvTest with AdvTrain normalization bounds."""
    from .features import family_tag

    family = family_tag(family)
    method = adv_train.config.method
    fit_sets, eval_sets = _split(adv_train), _split(adv_test)
    counts = [len(fit_sets[0]), len(fit_sets[1]), len(eval_sets[0]), len(eval_sets[1])]
    if min(counts) == 0:
        return AucRow(dataset, family, method, method, "advtrain->advtest", None, *counts)
    auc, _, _ = _fit_and_eval(model, fit_sets, eval_sets, family, kd, lid, config, method)
    return AucRow(dataset, family, method, method, "advtrain->advtest", auc, *counts)


def transfer_experiment(model, source: tuple, targets: dict, family: str, kd=None, lid=None,
                        config: DetectorConfig = DetectorConfig(), dataset: str = "synthetic",
                        held_out: bool = True) -> list:
    """Detectors fitted on one attack, scored on the others.

    ``source`` and each value of ``targets`` are ``(adv_train, adv_test)`` batch
    pairs. The ``union`` protocol fits on AdvTrain and AdvTest together and also
    evaluates on both; ``held_out`` fits on AdvTrain and evaluates on AdvTest.
    Targets using the source method are skipped.
    """
    from .features import family_tag

    family = family_tag(family)
    src = source[0].config.method
    protocols = [("union", _union(*source), lambda t: _union(*t))]
    if held_out:
        protocols.append(("held-out", _split(source[0]), lambda t: _split(t[1])))
    rows = []
    for name in sorted(targets):
        pair = targets[name]
        tgt = pair[0].config.method
        if tgt == src:
            continue
        for protocol, fit_sets, eval_of in protocols:
            eval_sets = eval_of(pair)
            counts = [len(fit_sets[0]), len(fit_sets[1]), len(eval_sets[0]), len(eval_sets[1])]
            auc = None
            if min(counts) > 0:
                auc = _fit_and_eval(model, fit_sets, eval_sets, family, kd, lid, config, src)[0]
            rows.append(AucRow(dataset, family, src, tgt, protocol, auc, *counts))
    return rows
