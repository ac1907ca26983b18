"""Quick oracle checks run by ``medadv selftest``."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import oracles
from .analysis import embed_2d
from .attacks import AttackConfig, bim, fgsm, pgd, project_linf
from .classifier import forward
from .detectors import roc_auc
from .features import kernel_density, lid_estimate
from .tensorio import decode_tensor, encode_tensor


def _gradients(rng) -> bool:
    worst = 0.0
    for _ in range(10):
        model, x, y = oracles.random_small_net(rng)
        z, tape = forward(model, x, dtype=np.float64)
        (g,) = tape.gradient(ad.softmax_cross_entropy(z, y, "sum"), [tape.input])
        num, kink = oracles.input_gradient_fd(model, x, y)
        worst = max(worst, oracles.relative_error(g, num, kink))
    return worst < 1e-3


def _auc(rng) -> bool:
    for _ in range(100):
        n = int(rng.integers(2, 40))
        labels = np.r_[0, 1, rng.integers(0, 2, n)]
        scores = rng.integers(0, 5, len(labels)) / 4.0
        if abs(roc_auc(scores, labels).auc - oracles.brute_auc(scores, labels)) > 1e-9:
            return False
    return True


def _estimators(rng) -> bool:
    ok = abs(lid_estimate([1.0, 2.0]) - 2 / math.log(2)) < 1e-12
    r = np.sort(rng.uniform(0.1, 2.0, 20))
    ok &= abs(lid_estimate(r) - lid_estimate(r * 7.3)) < 1e-9
    ok &= abs(lid_estimate(r) - oracles.brute_lid(r)) < 1e-9
    ok &= abs(kernel_density(np.array([1.0, 0.0]), np.array([[0.0, 0.0]]), 1.0) - math.exp(-1)) < 1e-12
    ref = rng.standard_normal((10, 4))
    q = rng.standard_normal(4)
    ok &= abs(kernel_density(q, ref, 1.3) - oracles.brute_kd(q, ref, 1.3)) < 1e-12
    return bool(ok)


def _attacks(rng) -> bool:
    model, x, y = oracles.random_small_net(rng, num_classes=2)
    x = np.clip(x, -1, 1)
    a = fgsm(model, x, y, AttackConfig("fgsm", 4.0))
    b = bim(model, x, y, AttackConfig("bim", 4.0, alpha=4.0, steps=1, enforce_step_band=False))
    c = bim(model, x, y, AttackConfig("bim", 4.0, steps=5, alpha=1.0))
    d = pgd(model, x, y, AttackConfig("pgd", 4.0, steps=5, alpha=1.0, random_start=False))
    p = project_linf(c + 0.3, x, np.float32(8 / 255))
    return (np.array_equal(a, b) and np.array_equal(c, d)
            and np.array_equal(project_linf(p, x, np.float32(8 / 255)), p)
            and float(np.abs(c - x).max()) <= 8 / 255 + 1e-6)


def _pca(rng) -> bool:
    rows = rng.standard_normal((300, 6)) * np.arange(1, 7)
    return bool(np.allclose(embed_2d(rows).variances, oracles.top2_variance(rows), rtol=0, atol=1e-6))


def _codec(rng) -> bool:
    t = rng.standard_normal((2, 3, 4)).astype(np.float32)
    return np.array_equal(decode_tensor(encode_tensor(t)), t)


CHECKS = [
    ("autodiff vs finite differences", _gradients),
    ("roc_auc vs pairwise count", _auc),
    ("LID and KD hand values", _estimators),
    ("attack reduction laws and projection", _attacks),
    ("PCA vs dense eigensolver", _pca),
    ("TNSR round trip", _codec),
]


def run_selftest(log=print) -> bool:
    rng = np.random.default_rng(0)
    ok = True
    for name, check in CHECKS:
        passed = bool(check(rng))
        ok &= passed
        log(f"{'PASS' if passed else 'FAIL'} {name}")
    return ok
