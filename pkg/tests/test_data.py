import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medadv import tensorio
from medadv.data import (Dataset, DatasetManifest, ManifestEntry, SynthConfig, crop_or_pad, generate_synthetic,
                         learnability_check,
                         load_images, manifest_splits, read_manifest, split_dataset, split_sizes,
                         threshold_baseline, to_unit_range, write_manifest)
from medadv.errors import ConfigError, FormatError


# --- synthetic generator ------------------------------------------------------

def test_generator_is_bit_reproducible():
    a = generate_synthetic(SynthConfig(seed=9), 40)
    b = generate_synthetic(SynthConfig(seed=9), 40)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels) and a.ids == b.ids
    c = generate_synthetic(SynthConfig(seed=10), 40)
    assert a.images.tobytes() != c.images.tobytes()


def test_generator_balance_and_range():
    d = generate_synthetic(SynthConfig(seed=2), 100)
    assert np.bincount(d.labels).tolist() == [50, 50]
    assert d.images.min() >= -1 and d.images.max() <= 1
    assert d.images.shape == (100, 32, 32, 3) and d.images.dtype == np.float32
    d3 = generate_synthetic(SynthConfig(num_classes=3, seed=2), 100)
    assert sorted(np.bincount(d3.labels).tolist()) == [33, 33, 34]


def test_reference_config_is_learnable_by_threshold():
    d = generate_synthetic(SynthConfig(seed=0), 400)
    assert threshold_baseline(d.images, d.labels, 2) >= 0.7
    assert learnability_check(SynthConfig(seed=0)) >= 0.7


def test_unlearnable_config_rejected():
    flat = SynthConfig(seed=0, tone_step=0.0, lesion_texture=0.0)
    with pytest.raises(ConfigError):
        generate_synthetic(flat, 200)


@pytest.mark.parametrize("k", [1, 5])
def test_class_count_bounds(k):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(num_classes=k), 20)


def test_threshold_baseline_hand_case():
    imgs = np.array([-0.5, -0.4, 0.4, 0.5, -0.45]).reshape(5, 1, 1, 1)
    assert threshold_baseline(imgs, np.array([0, 0, 1, 1, 1]), 2) == pytest.approx(0.8)


# --- splits -------------------------------------------------------------------

def _toy(n):
    return Dataset(np.zeros((n, 2, 2, 1)), np.arange(n) % 2, [f"t{i}" for i in range(n)], 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 10**6),
       st.tuples(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10)).filter(lambda t: sum(t) > 0))
def test_split_is_a_partition(n, seed, weights):
    ratios = np.array(weights) / sum(weights)
    parts = split_dataset(_toy(n), ratios, seed)
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids) == sorted(_toy(n).ids)
    assert len(set(ids)) == n
    assert [p.split for p in parts] == ["Train", "AdvTrain", "AdvTest"]


def test_split_same_seed_same_partition():
    a = split_dataset(_toy(50), seed=4)
    b = split_dataset(_toy(50), seed=4)
    assert [p.ids for p in a] == [p.ids for p in b]


def test_split_all_train():
    tr, a, b = split_dataset(_toy(17), (1, 0, 0))
    assert len(tr) == 17 and len(a) == 0 and len(b) == 0


def test_split_sizes_follow_ratio():
    # a Test subset of 10644 cut 80/20, as in the fundus dataset counts
    assert split_sizes(10644, (0.0, 0.8, 0.2)) == [0, 8515, 2129]


def test_split_rejects_bad_input():
    with pytest.raises(ValueError):
        split_dataset(_toy(0))
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.6, 0.1))
    with pytest.raises(ValueError):
        split_sizes(10, (1.2, -0.2, 0.0))


# --- pixel mapping and geometry -----------------------------------------------

def test_unit_range_endpoints():
    v = to_unit_range([0, 255, 128])
    assert v[0] == -1.0 and v[1] == 1.0
    assert v[2] == pytest.approx(128 * 2 / 255 - 1, abs=1e-7)


def test_crop_or_pad():
    img = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    np.testing.assert_array_equal(crop_or_pad(img, 2, 2)[..., 0], [[5, 6], [9, 10]])
    padded = crop_or_pad(img, 6, 6)
    assert padded[0, 0, 0] == -1 and padded[5, 5, 0] == -1
    np.testing.assert_array_equal(padded[1:5, 1:5], img)


# --- codecs -------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2**32 - 1))
def test_tnsr_round_trip_is_bit_exact(shape, seed):
    a = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    assert tensorio.decode_tensor(tensorio.encode_tensor(a)).tobytes() == a.tobytes()


def test_tnsr_layout():
    raw = tensorio.encode_tensor(np.array([[1.0, 2.0]], np.float32))
    assert raw[:5] == b"TNSR\x01"
    assert raw[5:9] == (2).to_bytes(4, "little")
    assert raw[9:17] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[17:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x02" + b[5:],
    lambda b: b[:-1],
    lambda b: b[:7],
    lambda b: b + b"\x00",
])
def test_corrupt_tnsr_is_format_error(mutate):
    raw = tensorio.encode_tensor(np.ones((2, 3), np.float32))
    with pytest.raises(FormatError):
        tensorio.decode_tensor(mutate(raw))


def test_named_tensor_round_trip():
    tensors = {"a": np.ones(3, np.float32), "b.w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    out, meta = tensorio.decode_named_tensors(tensorio.encode_named_tensors(tensors, "{\"k\": 1}"))
    assert meta == "{\"k\": 1}" and list(out) == ["a", "b.w"]
    assert all(np.array_equal(out[k], tensors[k]) for k in tensors)
    with pytest.raises(FormatError):
        tensorio.decode_named_tensors(tensorio.encode_named_tensors(tensors)[:20])


def test_pnm_round_trip_and_comments():
    gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
    back = tensorio.decode_pnm(tensorio.encode_pnm(gray))
    assert back.shape == (3, 4, 1) and np.array_equal(back[..., 0], gray)
    rgb = np.random.default_rng(0).integers(0, 256, (2, 5, 3)).astype(np.uint8)
    assert np.array_equal(tensorio.decode_pnm(tensorio.encode_pnm(rgb)), rgb)
    commented = b"P5\n# a comment\n2 1\n255\n" + bytes([0, 255])
    assert tensorio.decode_pnm(commented)[..., 0].tolist() == [[0, 255]]


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n1 1\n65535\n\x00\x00", b"P5\n2 2\n255\n\x00", b"P5\n"])
def test_bad_pnm_is_format_error(data):
    with pytest.raises(FormatError):
        tensorio.decode_pnm(data)


def test_map_to_uint8():
    assert tensorio.map_to_uint8([0.0, 0.5, 1.0, 2.0]).tolist() == [0, 128, 255, 255]


# --- manifests ------------------------------------------------------------------

def _write_images(tmp_path):
    tensorio.write_pnm(tmp_path / "a.pgm", np.array([[0, 255], [128, 64]], np.uint8))
    tensorio.write_pnm(tmp_path / "b.ppm", np.full((2, 2, 3), 255, np.uint8))
    tensorio.save_tensor(tmp_path / "c.tnsr", np.full((2, 2, 3), 0.5, np.float32))
    (tmp_path / "m.csv").write_text("id,path,label,split\na,a.pgm,0,Train\nb,b.ppm,1,AdvTrain\nc,c.tnsr,1,AdvTest\n")
    return tmp_path / "m.csv"


def test_manifest_load_and_split(tmp_path):
    m = read_manifest(_write_images(tmp_path), 2, (2, 2, 3))
    d = load_images(m)
    assert d.images.shape == (3, 2, 2, 3)
    assert d.images[0, 0, 0].tolist() == [-1.0, -1.0, -1.0] and d.images[0, 0, 1, 0] == 1.0
    assert np.all(d.images[1] == 1.0) and np.all(d.images[2] == 0.5)
    groups = manifest_splits(m)
    assert sorted(groups) == ["AdvTest", "AdvTrain", "Train"]
    assert [e.id for e in groups["Train"].entries] == ["a"]


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest([ManifestEntry("x", "/tmp/x.pgm", 1, "Train")], 2, (4, 4, 1))
    write_manifest(tmp_path / "m.csv", m)
    assert read_manifest(tmp_path / "m.csv", 2, (4, 4, 1)).entries == m.entries


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("id,file,label\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.csv")
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("x", "p", 3)], 2, (1, 1, 1))
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("x", "p", 0), ManifestEntry("x", "q", 1)], 2, (1, 1, 1))
    (tmp_path / "m.csv").write_text("id,path,label,split\nz,missing.pgm,0,Train\n")
    with pytest.raises(FormatError, match="missing.pgm"):
        load_images(read_manifest(tmp_path / "m.csv", 2, (2, 2, 1)))
