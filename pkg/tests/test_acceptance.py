"""
Acceptance suite. Every criterion prints one PASS/FAIL line to the terminal.

The shared lab trains the 2-class reference model (and one surrogate) at the
harness defaults; criteria 3, 5, 6 and 8 run on it. Sample counts are fixed
here, before any result is looked at, and sized for a single CPU core.
"""

import filecmp
import math
import os
import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from medadv import autodiff as ad
from medadv import harness, oracles
from medadv.analysis import clean_loss, loss_direction, loss_landscape, surrogate_direction
from medadv.attacks import AttackConfig, attack_batch, bim, fgsm, pgd
from medadv.classifier import evaluate, forward
from medadv.detectors import detect_experiment, roc_auc, transfer_experiment
from medadv.features import kernel_density, lid_estimate

SWEEP = (1, 2, 4, 8)
SWEEP_SAMPLES = 400
DETECT_EPS = 3.0
TABLE3_EPS = 4.0
TABLE3_SEEDS = (1, 2, 3)
TABLE3_SAMPLES = 400
LANDSCAPE_SAMPLES = 20


def _verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    return ok


def _quiet(*_a, **_k):
    pass


def _probe_set(data, limit):
    """AdvTest first, topped up from AdvTrain: both are held out from training."""
    te, tr = data["AdvTest"], data["AdvTrain"]
    extra = max(0, limit - len(te.labels))
    images = np.concatenate([te.images, tr.images[:extra]])
    labels = np.concatenate([te.labels, tr.labels[:extra]])
    return images[:limit], labels[:limit]


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    spec = harness.load_spec(text="[experiment]\nseed = 0\nname = acceptance\n")
    out = str(tmp_path_factory.mktemp("lab"))
    start = time.perf_counter()
    models = harness.cmd_train(spec, out, log=_quiet)
    train_seconds = time.perf_counter() - start
    data = harness.load_data(spec)
    return {"spec": spec, "data": data, "model": models["model"], "surrogate": models["surrogate1"],
            "train_seconds": train_seconds}


@pytest.fixture(scope="module")
def detect_pairs(lab):
    """(AdvTrain, AdvTest) attack batches at the detection budget, per method."""
    spec, data, model = lab["spec"], lab["data"], lab["model"]
    pairs = {}
    for method in ("fgsm", "bim", "pgd", "cw"):
        cfg = harness.attack_config(spec, method, DETECT_EPS)
        pairs[method] = tuple(attack_batch(model, data[s].images, data[s].labels, cfg, data[s].ids)
                              for s in ("AdvTrain", "AdvTest"))
    return pairs


@pytest.fixture(scope="module")
def detect_settings(lab):
    return harness.feature_settings(lab["spec"], lab["model"], lab["data"])


# --- 1 ---------------------------------------------------------------------------

def test_criterion_1_gradients_match_finite_differences(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_in = worst_par = 0.0
    nets = 100
    for _ in range(nets):
        m, x, y = oracles.random_small_net(rng)
        z, tape = forward(m, x, dtype=np.float64)
        names = list(tape.params)
        grads = tape.gradient(ad.softmax_cross_entropy(z, y, "sum"), [tape.input] + [tape.params[n] for n in names])
        num, kink = oracles.input_gradient_fd(m, x, y, h=1e-3)
        worst_in = max(worst_in, oracles.relative_error(grads[0], num, kink))
        for name, g in zip(names, grads[1:]):
            coords = rng.choice(g.size, size=min(g.size, 8), replace=False)
            num, kink = oracles.param_gradient_fd(m, name, x, y, h=1e-3, coords=coords)
            skip = np.ones(g.size, bool)
            skip[coords] = False
            worst_par = max(worst_par, oracles.relative_error(g, num, skip.reshape(g.shape) | kink))
    seconds = time.perf_counter() - start
    ok = worst_in < 1e-3 and worst_par < 1e-3 and seconds < 30
    _verdict(capsys, 1, ok, f"{nets} nets, max rel err input {worst_in:.2e} params {worst_par:.2e}, {seconds:.1f}s")
    assert ok


# --- 2 ---------------------------------------------------------------------------

def test_criterion_2_attack_constraints(capsys, lab, detect_pairs):
    checked, violations = 0, 0
    for pair in detect_pairs.values():
        for b in pair:
            bound = b.config.eps_scaled + 1e-6
            violations += int(np.sum(b.linf > bound))
            violations += int(np.sum((b.adversarials < -1) | (b.adversarials > 1)))
            checked += len(b)
    x = lab["data"]["AdvTest"].images[:100]
    y = lab["data"]["AdvTest"].labels[:100]
    model = lab["model"]
    law1 = np.array_equal(bim(model, x, y, AttackConfig("bim", 4.0, alpha=4.0, steps=1, enforce_step_band=False)),
                          fgsm(model, x, y, AttackConfig("fgsm", 4.0)))
    law2 = np.array_equal(pgd(model, x, y, AttackConfig("pgd", 4.0, alpha=0.5, steps=10, random_start=False)),
                          bim(model, x, y, AttackConfig("bim", 4.0, alpha=0.5, steps=10)))
    ok = checked >= 1000 and violations == 0 and law1 and law2
    _verdict(capsys, 2, ok, f"{checked} adversarial samples, {violations} violations; "
                            f"BIM(T=1)==FGSM {law1}, PGD(no start)==BIM {law2}")
    assert ok


# --- 3 ---------------------------------------------------------------------------

def test_criterion_3_accuracy_falls_with_eps(capsys, lab):
    model = lab["model"]
    images, labels = _probe_set(lab["data"], SWEEP_SAMPLES)
    clean, _ = evaluate(model, images, labels)
    start = time.perf_counter()
    acc, succ = {}, {}
    for method in ("fgsm", "bim", "pgd"):
        for eps in SWEEP:
            b = attack_batch(model, images, labels, AttackConfig(method, eps, seed=harness.derive_seed(0, method)))
            acc[method, eps], succ[method, eps] = b.accuracy(), b.success_rate()
    seconds = time.perf_counter() - start + lab["train_seconds"]
    pgd_curve = [acc["pgd", e] for e in SWEEP]
    monotone = all(b <= a + 0.02 for a, b in zip(pgd_curve, pgd_curve[1:]))
    monotone &= all(acc[m, e2] <= acc[m, e1] + 0.02 for m in ("fgsm", "bim") for e1, e2 in zip(SWEEP, SWEEP[1:]))
    ordering = all(succ["pgd", e] >= succ["bim", e] - 0.02 and succ["bim", e] >= succ["fgsm", e] - 0.02 for e in SWEEP)
    ok = clean >= 0.95 and acc["pgd", 8] < 0.10 and monotone and ordering and seconds < 600
    curves = "; ".join(f"{m} " + ",".join(f"{acc[m, e]:.3f}" for e in SWEEP) for m in ("fgsm", "bim", "pgd"))
    _verdict(capsys, 3, ok, f"clean {clean:.3f} on {len(labels)}; accuracy at eps {SWEEP}: {curves}; "
                            f"monotone {monotone}, ordering {ordering}, {seconds:.0f}s incl. training")
    assert ok


# --- 4 ---------------------------------------------------------------------------

def test_criterion_4_more_classes_more_vulnerable(capsys, tmp_path):
    results = []
    for seed in TABLE3_SEEDS:
        row = {}
        for k in (2, 3):
            spec = harness.load_spec(text=f"[experiment]\nseed = {seed}\n[data]\nnum_classes = {k}\n"
                                          "[train]\nsurrogates = 0\n")
            model = harness.cmd_train(spec, str(tmp_path / f"s{seed}k{k}"), log=_quiet)["model"]
            images, labels = _probe_set(harness.load_data(spec), TABLE3_SAMPLES)
            cfg = AttackConfig("pgd", TABLE3_EPS, seed=harness.derive_seed(seed, "attack:pgd"))
            row[k] = attack_batch(model, images, labels, cfg).accuracy()
        results.append(row)
    ok = all(r[2] >= 0.20 and r[3] <= r[2] + 0.02 for r in results)
    detail = ", ".join(f"seed {s}: K=2 {r[2]:.3f} K=3 {r[3]:.3f}" for s, r in zip(TABLE3_SEEDS, results))
    _verdict(capsys, 4, ok, f"PGD accuracy at eps {TABLE3_EPS:g}/255: {detail}")
    assert ok


# --- 5 ---------------------------------------------------------------------------

def test_criterion_5_detection_auc(capsys, lab, detect_pairs, detect_settings):
    kd, lid, det = detect_settings
    aucs = {}
    for family in ("DFeat", "KD"):
        for method in ("bim", "pgd", "cw"):
            row = detect_experiment(lab["model"], *detect_pairs[method], family, kd=kd, lid=lid, config=det)
            aucs[family, method] = row.auc if row.auc is not None else float("nan")
    floor = {"DFeat": 0.90, "KD": 0.85}
    ok = all(aucs[f, m] >= floor[f] for f, m in aucs)
    detail = ", ".join(f"{f}/{m} {a:.4f}" for (f, m), a in aucs.items())
    _verdict(capsys, 5, ok, f"AdvTest AUC at eps {DETECT_EPS:g}/255: {detail}")
    assert ok


# --- 6 ---------------------------------------------------------------------------

def test_criterion_6_transfer(capsys, lab, detect_pairs, detect_settings):
    kd, lid, det = detect_settings
    model = lab["model"]
    same = {m: detect_experiment(model, *detect_pairs[m], "DFeat", kd=kd, lid=lid, config=det).auc
            for m in detect_pairs}
    gaps, lines = [], []
    for src in ("fgsm", "pgd"):
        for row in transfer_experiment(model, detect_pairs[src], detect_pairs, "DFeat", kd=kd, lid=lid, config=det):
            if row.protocol != "union":
                continue
            gap = row.auc - same[row.target]
            gaps.append(gap)
            lines.append(f"{src}->{row.target} {row.auc:.4f} (same {same[row.target]:.4f})")
    ok = len(gaps) == 6 and min(gaps) >= -0.05
    _verdict(capsys, 6, ok, "DFeat union protocol: " + ", ".join(lines))
    assert ok


# --- 7 ---------------------------------------------------------------------------

def test_criterion_7_estimator_oracles(capsys):
    rng = np.random.default_rng(77)
    auc_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        labels = np.r_[0, 1, rng.integers(0, 2, n)]
        scores = np.round(rng.standard_normal(len(labels)), int(rng.integers(0, 3)))
        auc_err = max(auc_err, abs(roc_auc(scores, labels).auc - oracles.brute_auc(scores, labels)))
    r = rng.uniform(0.01, 3.0, 20)
    lid_scale = max(abs(lid_estimate(r) - lid_estimate(r * c)) for c in (1e-3, 0.37, 5.0, 1e4))
    lid_hand = abs(lid_estimate([1.0, 2.0]) - 2 / math.log(2))
    cube = {}
    for d in (2, 5, 8):
        pts = np.random.default_rng(d).uniform(size=(10_000, d))
        dist, _ = cKDTree(pts).query(pts[:500], k=101)
        cube[d] = float(np.median([lid_estimate(row[1:]) for row in dist]))
    # one reference row at distance sigma, the rest far away
    kd_hand = []
    for size in (1, 4, 10):
        ref = np.full((size, 3), 100.0)
        ref[0] = [0.0, 0.0, 2.0]
        kd_hand.append(abs(kernel_density(np.zeros(3), ref, 2.0) - math.exp(-1) / size))
    ok = (auc_err <= 1e-9 and lid_scale <= 1e-9 and lid_hand <= 1e-12 and max(kd_hand) <= 1e-12
          and all(abs(v - d) <= 0.4 * d for d, v in cube.items()))
    cubes = ", ".join(f"d={d}: {v:.2f}" for d, v in cube.items())
    _verdict(capsys, 7, ok, f"AUC err {auc_err:.1e}, LID scale err {lid_scale:.1e}, hand err {lid_hand:.1e}, "
                            f"cube medians {cubes}, KD err {max(kd_hand):.1e}")
    assert ok


# --- 8 ---------------------------------------------------------------------------

def test_criterion_8_landscape_anchor(capsys, lab):
    model, surrogate = lab["model"], lab["surrogate"]
    ds = lab["data"]["AdvTest"]
    exact, sharp = 0, 0
    for x, y in zip(ds.images[:LANDSCAPE_SAMPLES], ds.labels[:LANDSCAPE_SAMPLES]):
        grid = loss_landscape(model, x, y, loss_direction(model, x, y), surrogate_direction(surrogate, x, y))
        exact += grid.anchor == clean_loss(model, x, y)
        sharp += grid.sharpness > 0
    ok = exact == LANDSCAPE_SAMPLES and sharp >= math.ceil(0.95 * LANDSCAPE_SAMPLES)
    _verdict(capsys, 8, ok, f"anchor bit-exact on {exact}/{LANDSCAPE_SAMPLES}, "
                            f"sharpness > 0 on {sharp}/{LANDSCAPE_SAMPLES}")
    assert ok


# --- 9 ---------------------------------------------------------------------------

PIPELINE_SPEC = """\
[experiment]
seed = 11
name = determinism

[data]
count = 200
ratios = 0.5, 0.3, 0.2

[train]
epochs = 3

[attack]
eps = 1, 4
detect_eps = 4

[detect]
lid_n = 5
lid_batch = 20
iterations = 200

[analyze]
samples = 2
grid_steps = 3
"""


def _tree(root):
    found = []
    for base, _, files in os.walk(root):
        found += [os.path.relpath(os.path.join(base, f), root) for f in files]
    return sorted(found)


def test_criterion_9_pipeline_is_deterministic(capsys, tmp_path):
    from medadv.cli import main

    spec = tmp_path / "spec.ini"
    spec.write_text(PIPELINE_SPEC)
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", str(spec), "--out", str(o)]) for o in outs]
    reports = [_tree(o / "report") for o in outs]
    same_names = reports[0] == reports[1] and len(reports[0]) > 0
    _, mismatch, errors = filecmp.cmpfiles(outs[0] / "report", outs[1] / "report", reports[0], shallow=False)
    everything = _tree(outs[0]) == _tree(outs[1])
    _, deep_mismatch, _ = filecmp.cmpfiles(outs[0], outs[1], _tree(outs[0]), shallow=False)
    ok = codes == [0, 0] and same_names and not mismatch and not errors
    _verdict(capsys, 9, ok, f"exit codes {codes}, {len(reports[0])} report files, {len(mismatch)} differ; "
                            f"whole tree identical: {everything and not deep_mismatch}")
    assert ok
