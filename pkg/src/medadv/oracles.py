"""
Independent reference implementations used to check the fast code paths.

Everything here is deliberately naive: explicit loops, float64, and no
shared code with the kernels under test beyond the model container.
"""

from __future__ import annotations

import math

import numpy as np

from .classifier import LayerSpec, Model, ModelConfig, build_model


# ---------------------------------------------------------------------------
# naive network evaluation
# ---------------------------------------------------------------------------

def naive_conv2d(x, w, b, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    xp = np.full((n, h + 2 * padding, wd + 2 * padding, c), 0.0)
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    # sum of shifted slices, one kernel offset at a time
    out = np.zeros((n, ho, wo, co)) + np.asarray(b, dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            window = xp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
            out += np.einsum("nhwc,co->nhwo", window, np.asarray(w[di, dj], dtype=np.float64))
    return out


def naive_maxpool(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, i, j] = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(1, 2))
    return out


def naive_forward(model: Model, x) -> np.ndarray:
    """Logits by direct evaluation of the recipe."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 3:
        h = h[None]
    p = {k: v.astype(np.float64) for k, v in model.params.items()}
    counts = {}
    for layer in model.config.layers:
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
        name = f"{layer.kind}{counts[layer.kind]}"
        if layer.kind == "conv":
            h = naive_conv2d(h, p[name + ".w"], p[name + ".b"], layer.stride, layer.padding)
        elif layer.kind == "dense":
            h = h @ p[name + ".w"] + p[name + ".b"]
        elif layer.kind == "relu":
            h = np.maximum(h, 0)
        elif layer.kind == "maxpool":
            h = naive_maxpool(h)
        elif layer.kind == "gap":
            h = h.mean(axis=(1, 2))
        elif layer.kind == "flatten":
            h = h.reshape(len(h), -1)
    return h


def naive_loss(z, y) -> float:
    """Summed cross-entropy computed from log-sum-exp, float64."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_1d(y)
    total = 0.0
    for row, label in zip(z, y):
        m = row.max()
        total += m + math.log(np.sum(np.exp(row - m))) - row[label]
    return total


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def random_small_net(rng: np.random.Generator, num_classes: int | None = None) -> tuple:
    """A random tiny recipe mixing conv, pooling, ReLU and dense layers, with an input batch."""
    k = int(num_classes or rng.integers(2, 5))
    side = int(rng.choice([4, 5, 6]))
    cin = int(rng.integers(1, 3))
    c1 = int(rng.integers(1, 4))
    width = int(rng.integers(2, 6))
    layers = [LayerSpec("conv", c1, int(rng.choice([1, 3])), 1, 1 if rng.random() < 0.7 else 0), LayerSpec("relu")]
    if rng.random() < 0.5:
        layers.append(LayerSpec("maxpool"))
    if rng.random() < 0.5:
        layers += [LayerSpec("conv", int(rng.integers(1, 4)), 1, 1, 0), LayerSpec("relu")]
    layers.append(LayerSpec("gap") if rng.random() < 0.5 else LayerSpec("flatten"))
    layers += [LayerSpec("dense", width), LayerSpec("relu", tap="penultimate"), LayerSpec("dense", k, tap="logits")]
    cfg = ModelConfig((side, side, cin), k, tuple(layers), width, int(rng.integers(0, 2**31)))
    model = build_model(cfg)
    for name, v in model.params.items():
        if name.endswith(".b"):
            model.params[name] = (0.3 * rng.standard_normal(v.shape)).astype(np.float32)
    n = int(rng.integers(1, 4))
    x = rng.uniform(-1, 1, size=(n, side, side, cin)).astype(np.float32)
    y = rng.integers(0, k, size=n)
    return model, x, y


def _with_param(model: Model, name: str, value) -> Model:
    params = dict(model.params)
    params[name] = value
    return Model(model.config, params)


def central_difference(f, x, h: float = 1e-3, coords=None) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64).

    Returns the estimate and a mask of coordinates where halving the step
    changes the estimate noticeably, which flags a nearby ReLU or max-pool
    kink; callers skip those coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    est = np.zeros(flat.size)
    kink = np.zeros(flat.size, dtype=bool)
    for i in coords:
        vals = []
        for step in (h, h / 2):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += step
            xm[i] -= step
            vals.append((f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * step))
        est[i] = vals[0]
        kink[i] = abs(vals[0] - vals[1]) > 1e-5 * max(1.0, abs(vals[0]))
    return est.reshape(x.shape), kink.reshape(x.shape)


def relative_error(analytic, numeric, mask=None) -> float:
    """Largest elementwise error relative to the local magnitude (floored by the tensor scale)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = np.ones(a.size, bool) if mask is None else ~np.asarray(mask).reshape(-1)
    if not keep.any():
        return 0.0
    a, b = a[keep], b[keep]
    scale = max(np.abs(b).max(), np.abs(a).max())
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3 * scale) + 1e-12
    return float(np.max(np.abs(a - b) / denom))


def input_gradient_fd(model: Model, x, y, h: float = 1e-3):
    return central_difference(lambda v: naive_loss(naive_forward(model, v), y), x, h)


def param_gradient_fd(model: Model, name: str, x, y, h: float = 1e-3, coords=None):
    base = model.params[name].astype(np.float64)

    def f(v):
        return naive_loss(naive_forward(_with_param(model, name, v), x), y)

    return central_difference(f, base, h, coords)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def brute_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


def brute_lid(distances) -> float:
    r = sorted(float(d) for d in distances)
    return -1.0 / (sum(math.log(d / r[-1]) for d in r) / len(r))


def brute_kd(query, reference, sigma) -> float:
    q = np.asarray(query, dtype=np.float64)
    total = 0.0
    for r in np.asarray(reference, dtype=np.float64):
        total += math.exp(-float(np.sum((q - r) ** 2)) / sigma**2)
    return total / len(reference)


def top2_variance(rows) -> np.ndarray:
    """Two largest covariance eigenvalues from a dense symmetric eigensolver."""
    X = np.asarray(rows, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    vals = np.linalg.eigh(Xc.T @ Xc / (len(X) - 1))[0]
    return vals[::-1][:2]
