import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medadv import oracles
from medadv.attacks import AttackConfig, attack_batch
from medadv.detectors import (AucRow, Detector, DetectorConfig, detect_experiment, fit_detector, read_rows, roc_auc,
                              score, transfer_experiment, write_roc_csv, write_rows)
from medadv.errors import ConfigError


# --- ROC / AUC ------------------------------------------------------------------------

def test_auc_hand_values():
    assert roc_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]).auc == pytest.approx(0.75)
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.5, 0.5], [1, 0]).auc == 0.5


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))  # rounding forces ties
        assert abs(roc_auc(s, y).auc - oracles.brute_auc(s, y)) < 1e-9


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 50))
def test_auc_properties(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.uniform(-2, 2, n)
    curve = roc_auc(s, y)
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0) and (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert abs(curve.auc - np.trapezoid(curve.tpr, curve.fpr)) < 1e-9
    assert abs(roc_auc(3 * s + 1, y).auc - curve.auc) < 1e-12
    assert abs(roc_auc(s**3, y).auc - curve.auc) < 1e-12
    assert abs(curve.auc + roc_auc(s, 1 - y).auc - 1) < 1e-9


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 2])


def test_roc_csv(tmp_path):
    write_roc_csv(tmp_path / "r.csv", roc_auc([0.9, 0.1], [1, 0]))
    assert (tmp_path / "r.csv").read_text().splitlines() == ["fpr,tpr", "0,0", "0,1", "1,1"]


# --- logistic detector --------------------------------------------------------------

def test_separable_fit():
    X = np.r_[np.full(10, 0.1), np.full(10, 0.9)][:, None]
    y = np.r_[np.zeros(10), np.ones(10)]
    det = fit_detector(X, y)
    assert roc_auc(score(det, X), y).auc == 1.0
    assert det.weights[0] > 0


def test_loss_non_increasing():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(200, 6))
    y = (X @ rng.standard_normal(6) + 0.3 * rng.standard_normal(200) > 0).astype(int)
    det = fit_detector(X, y, DetectorConfig(iterations=300, step=10.0))
    assert all(b <= a + 1e-12 for a, b in zip(det.losses, det.losses[1:]))
    assert det.step <= 10.0 and len(det.losses) == 301


def test_shuffled_labels_give_null_auc():
    aucs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X = rng.uniform(size=(400, 8))
        y = rng.permutation(np.r_[np.zeros(200), np.ones(200)])
        det = fit_detector(X[:200], y[:200])
        aucs.append(roc_auc(score(det, X[200:]), y[200:]).auc)
    assert all(abs(a - 0.5) <= 0.1 for a in aucs)


def test_duplicates_equal_weights():
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(30, 3))
    y = rng.integers(0, 2, 30)
    y[:2] = [0, 1]
    counts = rng.integers(1, 4, 30)
    dup = fit_detector(np.repeat(X, counts, axis=0), np.repeat(y, counts))
    weighted = fit_detector(X, y, sample_weight=counts)
    np.testing.assert_allclose(dup.weights, weighted.weights, atol=1e-4)
    assert dup.bias == pytest.approx(weighted.bias, abs=1e-4)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_detector(np.zeros((3, 2)), [1, 1, 1])
    with pytest.raises(ConfigError):
        DetectorConfig(iterations=0)


def test_score_contract():
    det = Detector(np.zeros(3), 0.0)
    np.testing.assert_array_equal(score(det, np.ones((4, 3))), 0.5)
    det = Detector(np.array([1.0, -2.0, 0.5]), 0.1)
    base = np.array([[0.2, 0.3, 0.4]])
    bumped = base.copy()
    bumped[0, 0] += 0.1
    assert score(det, bumped)[0] > score(det, base)[0]
    assert score(det, base).tobytes() == score(det, base).tobytes()
    with pytest.raises(ValueError):
        score(det, np.ones((1, 2)))


# --- rows ---------------------------------------------------------------------------------

def test_rows_round_trip(tmp_path):
    rows = [AucRow("synthetic", "KD", "pgd", "pgd", "advtrain->advtest", 0.93, 10, 4, 5, 2),
            AucRow("synthetic", "DFeat", "fgsm", "cw", "union", None, 1, 0, 1, 0)]
    write_rows(tmp_path / "t.csv", rows)
    assert read_rows(tmp_path / "t.csv") == [rows[0].__class__(**{**rows[0].__dict__, "auc": 0.93}), rows[1]]
    text = (tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "dataset,family,source,target,protocol,auc,fit_normal,fit_adversarial,eval_normal,eval_adversarial"
    assert text[2].split(",")[5] == "n/a"


# --- experiments on the shared model ------------------------------------------------

@pytest.fixture(scope="module")
def attacked(desk):
    out = {}
    for method in ("fgsm", "pgd", "cw"):
        cfg = AttackConfig(method, 3.0)
        out[method] = (attack_batch(desk.model, desk.adv_train.images, desk.adv_train.labels, cfg),
                       attack_batch(desk.model, desk.adv_test.images, desk.adv_test.labels, cfg))
    return out


def test_detect_experiment_row(desk, attacked):
    tr, te = attacked["pgd"]
    row = detect_experiment(desk.model, tr, te, "qfeat")
    assert row.family == "QFeat" and row.source == row.target == "pgd"
    assert row.fit_normal == len(tr) and row.fit_adversarial == tr.success.sum()
    assert row.eval_adversarial == te.success.sum()
    assert row.auc is not None and row.auc > 0.8


def test_detect_experiment_no_successes(desk):
    x, y = desk.adv_test.images[:10], desk.adv_test.labels[:10]
    batch = attack_batch(desk.model, x, y, AttackConfig("fgsm", 0.0))
    row = detect_experiment(desk.model, batch, batch, "dfeat")
    assert row.auc is None and row.as_csv()[5] == "n/a"


def test_transfer_rows(desk, attacked):
    rows = transfer_experiment(desk.model, attacked["fgsm"], attacked, "dfeat")
    assert {(r.target, r.protocol) for r in rows} == {(t, p) for t in ("cw", "pgd") for p in ("union", "held-out")}
    union = [r for r in rows if r.protocol == "union"][0]
    src_tr, src_te = attacked["fgsm"]
    assert union.fit_normal == len(src_tr) + len(src_te)
    assert all(r.source == "fgsm" for r in rows)
