"""
Interpretability tools: saliency and Grad-CAM maps, loss landscapes along
two adversarial directions, channel-averaged representation maps, and a
PCA embedding of feature matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from . import autodiff as ad
from .classifier import Model, activations, forward, sample_losses, tap_shapes
from .tensorio import map_to_uint8, save_tensor, write_pnm


@dataclass
class AttentionMap:
    values: np.ndarray  # (H, W), in [0, 1]
    source: str
    tap: str = ""


@dataclass
class LandscapeGrid:
    g: np.ndarray
    g_perp: np.ndarray
    eps1: np.ndarray  # 1/255 units
    eps2: np.ndarray
    loss: np.ndarray  # (len(eps1), len(eps2))

    @property
    def anchor(self) -> float:
        return float(self.loss[0, 0])

    @property
    def sharpness(self) -> float:
        return float(self.loss.max() - self.loss[0, 0])


def max_normalize(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    top = m.max() if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


def _loss_input_grad(model: Model, x, y) -> np.ndarray:
    z, tape = forward(model, x)
    loss = ad.softmax_cross_entropy(z, np.atleast_1d(y), "sum")
    (g,) = tape.gradient(loss, [tape.input])
    return g.reshape(np.shape(x))


def saliency_map(model: Model, x, y) -> AttentionMap:
    """Channel-max of the absolute input gradient of the loss."""
    g = _loss_input_grad(model, np.asarray(x, dtype=np.float32), int(y))
    return AttentionMap(max_normalize(np.abs(g).max(axis=-1)), "saliency")


def _spatial_tap(model: Model, tap: str):
    shapes = tap_shapes(model.config)
    if tap not in shapes:
        raise ValueError(f"unknown tap {tap!r}")
    if len(shapes[tap]) != 3:
        raise ValueError(f"tap {tap!r} has no spatial dimensions")
    return shapes[tap]


def upsample_bilinear(m, height: int, width: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (height, width):
        return m.copy()
    return zoom(m, (height / m.shape[0], width / m.shape[1]), order=1, mode="nearest", grid_mode=True)


def grad_cam(model: Model, x, k: int, tap: str = "relu3") -> AttentionMap:
    """Class-``k`` Grad-CAM at a spatial tap, upsampled to the input size."""
    _spatial_tap(model, tap)
    z, t = forward(model, np.asarray(x, dtype=np.float32))
    seed = np.zeros_like(z.value)
    seed[0, int(k)] = 1
    A = t.taps[tap]
    (dA,) = t.gradient(z, [A], seed=seed)
    weights = dA[0].mean(axis=(0, 1))
    cam = np.maximum(np.tensordot(A.value[0], weights, axes=([2], [0])), 0)
    h, w = model.config.input_shape[:2]
    return AttentionMap(max_normalize(np.maximum(upsample_bilinear(cam, h, w), 0)), "grad-cam", tap)


def representation_map(model: Model, x, tap: str) -> np.ndarray:
    """Channel mean of a spatial activation, max-normalized."""
    _spatial_tap(model, tap)
    a = activations(model, np.asarray(x, dtype=np.float32), tap)
    return max_normalize(a.mean(axis=-1))


def surrogate_direction(surrogates, x, y) -> np.ndarray:
    """Sign of the loss gradient of one surrogate model, or of the summed signs of several."""
    if isinstance(surrogates, Model):
        surrogates = [surrogates]
    x = np.asarray(x, dtype=np.float32)
    total = sum(np.sign(_loss_input_grad(m, x, int(y))) for m in surrogates)
    return np.sign(total).astype(np.float32)


def loss_direction(model: Model, x, y) -> np.ndarray:
    return surrogate_direction(model, x, y)


def loss_landscape(model: Model, x, y, g, g_perp, eps1=None, eps2=None, data_range=(-1.0, 1.0)) -> LandscapeGrid:
    """Loss at ``clamp(x + e1 g + e2 g_perp)`` over the grid of budgets (1/255 units).

    Every point runs its own single-image forward pass, the same computation
    as the clean loss, so the origin reproduces it exactly.
    """
    eps1 = np.arange(9, dtype=np.float64) if eps1 is None else np.asarray(eps1, dtype=np.float64)
    eps2 = eps1 if eps2 is None else np.asarray(eps2, dtype=np.float64)
    if eps1[0] != 0 or eps2[0] != 0:
        raise ValueError("landscape axes must start at 0")
    x = np.asarray(x, dtype=np.float32)
    g = np.asarray(g, dtype=np.float32)
    g_perp = np.asarray(g_perp, dtype=np.float32)
    lo, hi = data_range
    scale = (hi - lo) / 255.0
    loss = np.empty((len(eps1), len(eps2)))
    for i, a in enumerate(eps1):
        for j, b in enumerate(eps2):
            p = x + np.float32(a * scale) * g + np.float32(b * scale) * g_perp
            p = np.clip(p, np.float32(lo), np.float32(hi))
            loss[i, j] = sample_losses(model, p[None], [int(y)])[0]
    return LandscapeGrid(g, g_perp, eps1, eps2, loss)


def clean_loss(model: Model, x, y) -> float:
    return float(sample_losses(model, np.asarray(x, dtype=np.float32)[None], [int(y)])[0])


@dataclass
class Embedding:
    coords: np.ndarray
    components: np.ndarray  # (2, D)
    variances: np.ndarray  # variance along each component
    iterations: int


def embed_2d(rows, max_iter: int = 10000, tol: float = 1e-14) -> Embedding:
    """Project centered rows onto the top two principal directions.

    The directions come from subspace iteration on the covariance matrix with
    a Rayleigh-Ritz step, so no full eigen-decomposition is needed.
    """
    X = np.asarray(getattr(rows, "rows", rows), dtype=np.float64)
    if X.ndim != 2 or len(X) < 3:
        raise ValueError("embedding needs a 2-D matrix with at least 3 rows")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (len(X) - 1)
    d = C.shape[0]
    k = min(2, d)
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((d, k)))[0]
    previous = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Q = np.linalg.qr(C @ Q)[0]
        trace = float(np.trace(Q.T @ C @ Q))
        if abs(trace - previous) <= tol * max(1.0, abs(trace)):
            break
        previous = trace
    small = Q.T @ C @ Q
    vals, vecs = np.linalg.eigh((small + small.T) / 2)
    order = np.argsort(vals)[::-1]
    comps = (Q @ vecs[:, order]).T
    # deterministic orientation: largest-magnitude loading positive
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    if k < 2:
        comps = np.vstack([comps, np.zeros((1, d))])
        vals = np.r_[vals, 0.0]
    variances = np.maximum(vals[order] if k == 2 else vals, 0.0)
    return Embedding(Xc @ comps.T, comps, variances, it)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def write_map(path_stem, values) -> None:
    """``<stem>.pgm`` (8-bit) plus ``<stem>.tnsr`` (raw values)."""
    write_pnm(f"{path_stem}.pgm", map_to_uint8(values))
    save_tensor(f"{path_stem}.tnsr", np.asarray(values, dtype=np.float32))


def write_landscape_csv(path, grid: LandscapeGrid) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["eps1", "eps2", "loss"])
        for i, a in enumerate(grid.eps1):
            for j, b in enumerate(grid.eps2):
                w.writerow([f"{a:g}", f"{b:g}", repr(float(grid.loss[i, j]))])


def write_embedding_csv(path, coords, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (a, b), lab in zip(coords, labels):
            w.writerow([f"{a:.9g}", f"{b:.9g}", int(lab)])
