"""
White-box untargeted L-infinity attacks: FGSM, BIM, PGD and CW-L-infinity.

Budgets are quoted in 1/255 units of the 8-bit scale and converted to the
model's data range, so with the default range [-1, 1] an ``eps`` of 8 means
a per-pixel budget of 16/255.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .classifier import Model, forward, grad_input, predict
from .errors import ConfigError, FormatError
from .tensorio import load_tensor, save_tensor

METHODS = ("fgsm", "bim", "pgd", "cw")

# (steps, step size as a fraction of eps)
DEFAULT_SCHEDULE = {"fgsm": (1, 1.0), "bim": (40, 1 / 40), "pgd": (20, 1 / 10), "cw": (20, 1 / 10)}


@dataclass(frozen=True)
class AttackConfig:
    method: str
    eps: float
    alpha: float | None = None
    steps: int | None = None
    kappa: float = 0.0
    random_start: bool | None = None
    data_range: tuple = (-1.0, 1.0)
    seed: int = 0
    enforce_step_band: bool = True

    def __post_init__(self):
        method = self.method.lower()
        if method not in METHODS:
            raise ConfigError(f"unknown attack {self.method!r}; expected one of {METHODS}")
        steps, ratio = DEFAULT_SCHEDULE[method]
        object.__setattr__(self, "method", method)
        if self.steps is None:
            object.__setattr__(self, "steps", steps)
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.eps * ratio)
        if self.random_start is None:
            object.__setattr__(self, "random_start", method == "pgd")
        object.__setattr__(self, "data_range", tuple(float(v) for v in self.data_range))
        self.validate()

    def validate(self):
        lo, hi = self.data_range
        if not hi > lo:
            raise ConfigError("data range must satisfy lo < hi")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.kappa < 0:
            raise ConfigError("kappa must be non-negative")
        if self.method == "fgsm" and self.steps != 1:
            raise ConfigError("FGSM takes exactly one step")
        if self.method != "fgsm" and self.enforce_step_band and self.eps > 0:
            lower = self.eps / self.steps
            if not (lower * (1 - 1e-9) <= self.alpha < self.eps):
                raise ConfigError(
                    f"step size {self.alpha} outside [eps/T, eps) = [{lower}, {self.eps}); "
                    "pass enforce_step_band=False to override"
                )

    @property
    def scale(self) -> float:
        lo, hi = self.data_range
        return (hi - lo) / 255.0

    @property
    def eps_scaled(self) -> np.float32:
        return np.float32(self.eps * self.scale)

    @property
    def alpha_scaled(self) -> np.float32:
        return np.float32(self.alpha * self.scale)


def project_linf(candidate, origin, eps, data_range=(-1.0, 1.0)) -> np.ndarray:
    """Clamp into the eps-ball around ``origin``, then into the data range.

    ``eps`` is already in data-range units. Idempotent, and feasible inputs
    come back unchanged.
    """
    candidate = np.asarray(candidate, dtype=np.float32)
    origin = np.asarray(origin, dtype=np.float32)
    if candidate.shape != origin.shape:
        raise ValueError(f"shape mismatch {candidate.shape} vs {origin.shape}")
    eps = np.float32(eps)
    lo, hi = np.float32(data_range[0]), np.float32(data_range[1])
    out = np.minimum(np.maximum(candidate, origin - eps), origin + eps)
    return np.minimum(np.maximum(out, lo), hi)


def loss_gradient(model: Model, x, y) -> np.ndarray:
    """Input gradient of the cross-entropy, one row per sample."""
    z, tape = forward(model, x)
    loss = ad.softmax_cross_entropy(z, np.atleast_1d(y), "sum")
    return grad_input(tape, loss)


def cw_objective(logits, y, kappa: float = 0.0):
    """``max(z_y - max_{k != y} z_k, -kappa)`` for one logit row or a batch."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    margin = _margin(z, y)[0]
    f = np.maximum(margin, -kappa)
    return float(f[0]) if np.ndim(logits) == 1 else f


def _margin(z, y):
    rows = np.arange(len(y))
    others = z.copy()
    others[rows, y] = -np.inf
    runner_up = np.argmax(others, axis=1)  # lowest index on ties
    return z[rows, y] - z[rows, runner_up], runner_up


def margin_gradient(model: Model, x, y):
    """CW margin ``z_y - z_runner_up`` per sample and its input gradient."""
    z, tape = forward(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    margin, runner_up = _margin(z.value, y)
    seed = np.zeros_like(z.value)
    rows = np.arange(len(y))
    seed[rows, y] = 1
    seed[rows, runner_up] -= 1
    (g,) = tape.gradient(z, [tape.input], seed=seed)
    return margin, g.reshape(tape.input_shape)


def _batch(x, y):
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(yb) != len(xb):
        raise ValueError("one label per image required")
    return xb, yb, single


def _sign_steps(model, x, y, start, cfg: AttackConfig, trace=None):
    xa = start
    alpha, eps = cfg.alpha_scaled, cfg.eps_scaled
    for _ in range(cfg.steps):
        g = loss_gradient(model, xa, y)
        xa = project_linf(xa + alpha * np.sign(g), x, eps, cfg.data_range)
        if trace is not None:
            trace.append(xa)
    return xa


def fgsm(model: Model, x, y, config: AttackConfig) -> np.ndarray:
    xb, yb, single = _batch(x, y)
    g = loss_gradient(model, xb, yb)
    out = project_linf(xb + config.eps_scaled * np.sign(g), xb, config.eps_scaled, config.data_range)
    return out[0] if single else out


def bim(model: Model, x, y, config: AttackConfig, trace=None) -> np.ndarray:
    """``steps`` sign steps of size ``alpha`` from the clean image, projected each time."""
    xb, yb, single = _batch(x, y)
    out = _sign_steps(model, xb, yb, xb, config, trace)
    return out[0] if single else out


def random_start(x, config: AttackConfig, indices=None) -> np.ndarray:
    """Uniform start in the eps-ball, one generator per sample ``(seed, index)``."""
    eps = config.eps_scaled
    if indices is None:
        indices = range(len(x))
    noise = np.stack(
        [np.random.default_rng([config.seed, int(i)]).uniform(-eps, eps, size=x.shape[1:]) for i in indices]
    ).astype(np.float32)
    return project_linf(x + noise, x, eps, config.data_range)


def pgd(model: Model, x, y, config: AttackConfig, indices=None, trace=None) -> np.ndarray:
    xb, yb, single = _batch(x, y)
    start = random_start(xb, config, indices) if config.random_start else xb
    out = _sign_steps(model, xb, yb, start, config, trace)
    return out[0] if single else out


def cw_linf(model: Model, x, y, config: AttackConfig, trace=None) -> np.ndarray:
    """Projected sign descent on the CW margin; samples stop once it reaches ``-kappa``."""
    xb, yb, single = _batch(x, y)
    xa = xb.copy()
    alpha, eps = config.alpha_scaled, config.eps_scaled
    for _ in range(config.steps):
        margin, _ = _margin(_logits_of(model, xa), yb)
        active = np.nonzero(margin > -config.kappa)[0]
        if len(active) == 0:
            break
        _, g = margin_gradient(model, xa[active], yb[active])
        xa[active] = project_linf(xa[active] - alpha * np.sign(g), xb[active], eps, config.data_range)
        if trace is not None:
            trace.append(xa.copy())
    return xa[0] if single else xa


def _logits_of(model, x):
    z, _ = forward(model, x, record=False)
    return z.value


def run_attack(model: Model, x, y, config: AttackConfig, indices=None) -> np.ndarray:
    if config.method == "fgsm":
        return fgsm(model, x, y, config)
    if config.method == "bim":
        return bim(model, x, y, config)
    if config.method == "pgd":
        return pgd(model, x, y, config, indices)
    return cw_linf(model, x, y, config)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    ids: list
    pred_before: np.ndarray
    pred_after: np.ndarray
    success: np.ndarray
    config: AttackConfig
    excluded_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def excluded(self) -> int:
        return len(self.excluded_ids)

    @property
    def linf(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(0, dtype=np.float32)
        return np.abs(self.adversarials - self.originals).reshape(len(self), -1).max(axis=1)

    def accuracy(self) -> float:
        """Post-attack accuracy over all inputs, counting excluded (already wrong) samples as errors."""
        total = len(self) + self.excluded
        return float(np.sum(~self.success) / total) if total else 0.0

    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self) else 0.0


def attack_batch(model: Model, images, labels, config: AttackConfig, ids=None, batch_size: int = 100) -> AdvBatch:
    """Attack every correctly classified sample; misclassified ones are excluded and counted."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty input set")
    ids = [str(i) for i in (ids if ids is not None else range(len(images)))]
    before = np.atleast_1d(predict(model, images))
    keep = np.nonzero(before == labels)[0]
    excluded = [ids[i] for i in np.nonzero(before != labels)[0]]
    shape = images.shape[1:]
    advs = []
    for start in range(0, len(keep), batch_size):
        idx = keep[start:start + batch_size]
        advs.append(run_attack(model, images[idx], labels[idx], config, indices=idx))
    adversarials = np.concatenate(advs) if advs else np.zeros((0,) + shape, np.float32)
    after = np.atleast_1d(predict(model, adversarials)) if len(keep) else np.zeros(0, np.int64)
    return AdvBatch(
        originals=images[keep],
        adversarials=adversarials,
        labels=labels[keep],
        ids=[ids[i] for i in keep],
        pred_before=before[keep],
        pred_after=after,
        success=after != labels[keep],
        config=config,
        excluded_ids=excluded,
    )


def save_adv_batch(directory, batch: AdvBatch) -> None:
    os.makedirs(directory, exist_ok=True)
    shape = batch.originals.shape
    save_tensor(os.path.join(directory, "originals.tnsr"), batch.originals.reshape(shape))
    save_tensor(os.path.join(directory, "adversarials.tnsr"), batch.adversarials.reshape(shape))
    linf = batch.linf
    with open(os.path.join(directory, "manifest.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "label", "pred_before", "pred_after", "success", "linf"])
        for i in range(len(batch)):
            w.writerow([batch.ids[i], int(batch.labels[i]), int(batch.pred_before[i]), int(batch.pred_after[i]),
                        int(batch.success[i]), f"{float(linf[i]):.9g}"])
    meta = {"config": asdict(batch.config), "excluded_ids": batch.excluded_ids, "shape": list(shape[1:])}
    with open(os.path.join(directory, "attack.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def load_adv_batch(directory) -> AdvBatch:
    with open(os.path.join(directory, "attack.json"), encoding="utf-8") as f:
        meta = json.load(f)
    cfg = meta["config"]
    cfg["data_range"] = tuple(cfg["data_range"])
    config = AttackConfig(**cfg)
    originals = load_tensor(os.path.join(directory, "originals.tnsr"))
    adversarials = load_tensor(os.path.join(directory, "adversarials.tnsr"))
    rows = []
    with open(os.path.join(directory, "manifest.csv"), newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != len(originals) or originals.shape != adversarials.shape:
        raise FormatError(f"{directory}: manifest and tensors disagree")
    shape = tuple(meta["shape"])
    if len(rows) == 0:
        originals = originals.reshape((0,) + shape)
        adversarials = adversarials.reshape((0,) + shape)
    return AdvBatch(
        originals=originals,
        adversarials=adversarials,
        labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
        ids=[r["id"] for r in rows],
        pred_before=np.array([int(r["pred_before"]) for r in rows], dtype=np.int64),
        pred_after=np.array([int(r["pred_after"]) for r in rows], dtype=np.int64),
        success=np.array([r["success"] == "1" for r in rows], dtype=bool),
        config=config,
        excluded_ids=list(meta["excluded_ids"]),
    )
