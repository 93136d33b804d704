import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flats import data as D
from flats.errors import ConfigError, FormatError, InputError


def write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    D.write_idx(ip, lp, images, labels)
    return ip, lp


# ---------------------------------------------------------------- IDX


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1, 5], np.uint8)
    ds = D.load_idx(*write_pair(tmp_path, images, labels))
    assert ds.images.shape == (5, 1, 28, 28) and ds.images.dtype == np.float32
    np.testing.assert_allclose(ds.images[:, 0] * 255, images, atol=1e-4)
    assert ds.labels.tolist() == [3, 1, 4, 1, 5]
    assert ds.n_classes == 6


def test_idx_header_bytes_for_ten_thousand_images(tmp_path):
    images = np.zeros((10000, 28, 28), np.uint8)
    ip, lp = write_pair(tmp_path, images, np.zeros(10000, np.uint8))
    assert ip.read_bytes()[:16].hex() == "00000803" "00002710" "0000001c" "0000001c"
    assert lp.read_bytes()[:8].hex() == "00000801" "00002710"
    assert len(D.load_idx(ip, lp, n_classes=10)) == 10000


def test_idx_scaling_extremes(tmp_path):
    ds = D.load_idx(*write_pair(tmp_path, np.array([[[0, 255]]], np.uint8), np.array([0], np.uint8)))
    assert ds.images.ravel().tolist() == [0.0, 1.0]


def test_idx_truncated_payload_reports_offset(tmp_path):
    ip, lp = write_pair(tmp_path, np.ones((3, 4, 4), np.uint8), np.zeros(3, np.uint8))
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-5])
    with pytest.raises(FormatError) as err:
        D.load_idx(ip, lp)
    assert err.value.offset == len(raw) - 5
    assert "offset" in str(err.value)


def test_idx_truncated_header(tmp_path):
    ip, lp = write_pair(tmp_path, np.ones((3, 4, 4), np.uint8), np.zeros(3, np.uint8))
    ip.write_bytes(ip.read_bytes()[:10])
    with pytest.raises(FormatError):
        D.load_idx(ip, lp)


def test_idx_bad_magic_and_trailing_bytes(tmp_path):
    ip, lp = write_pair(tmp_path, np.ones((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    good = ip.read_bytes()
    ip.write_bytes(struct.pack(">I", 0x0801) + good[4:])
    with pytest.raises(FormatError) as err:
        D.load_idx(ip, lp)
    assert err.value.offset == 0
    ip.write_bytes(good + b"\x00")
    with pytest.raises(FormatError) as err:
        D.load_idx(ip, lp)
    assert err.value.offset == len(good)


def test_idx_count_mismatch(tmp_path):
    ip, lp = write_pair(tmp_path, np.ones((3, 2, 2), np.uint8), np.zeros(3, np.uint8))
    D.write_idx(tmp_path / "x", lp, np.ones((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(FormatError):
        D.load_idx(ip, lp)


# ---------------------------------------------------------------- datasets


def test_dataset_validation_and_immutability():
    ds = D.LabeledDataset(np.zeros((2, 1, 2, 2)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1
    with pytest.raises(InputError):
        D.LabeledDataset(np.full((1, 1, 2, 2), 1.5), np.array([0]), 2)
    with pytest.raises(InputError):
        D.LabeledDataset(np.zeros((1, 1, 2, 2)), np.array([2]), 2)
    with pytest.raises(InputError):
        D.LabeledDataset(np.zeros((2, 1, 2, 2)), np.array([0]), 2)


def test_synthetic_data_is_seeded_and_balanced():
    a = D.synth_dataset(3, 20)
    b = D.synth_dataset(3, 20)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, D.synth_dataset(4, 20).images)
    assert a.label_histogram().tolist() == [20] * 10
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0


def test_synth_split_shares_templates():
    train, test = D.synth_split(1, 10, 5, n_classes=4)
    assert len(train) == 40 and len(test) == 20
    # class means of train and test agree far better than across classes
    mt = np.stack([train.images[train.labels == c].mean(0) for c in range(4)])
    ms = np.stack([test.images[test.labels == c].mean(0) for c in range(4)])
    same = np.mean([np.abs(mt[c] - ms[c]).mean() for c in range(4)])
    other = np.mean([np.abs(mt[c] - ms[(c + 1) % 4]).mean() for c in range(4)])
    assert same < other / 2


# ---------------------------------------------------------------- manipulations


def test_brightness_identity_is_bit_exact():
    x = D.synth_dataset(0, 5).images
    out = D.apply_brightness(x, 1.0)
    assert out.dtype == x.dtype and out.tobytes() == x.tobytes()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), r1=st.floats(0.01, 5), r2=st.floats(0.01, 5))
def test_brightness_monotone_in_ratio(seed, r1, r2):
    lo, hi = sorted((r1, r2))
    x = np.random.default_rng(seed).uniform(size=(2, 1, 4, 4)).astype(np.float32)
    a, b = D.apply_brightness(x, lo), D.apply_brightness(x, hi)
    assert np.all(a <= b)
    assert np.all(b <= 1.0) and np.all(a >= 0.0)


def test_brightness_examples():
    x = np.array([0.0, 0.2, 0.5, 1.0], np.float32)
    np.testing.assert_allclose(D.apply_brightness(x, 2.3), [0.0, 0.46, 1.0, 1.0], rtol=1e-6)
    np.testing.assert_allclose(D.apply_brightness(x, 0.15), [0.0, 0.03, 0.075, 0.15], rtol=1e-6)
    with pytest.raises(ConfigError):
        D.apply_brightness(x, 0.0)


@pytest.mark.parametrize("h", [32, 224, 28, 7])
def test_occlusion_zeroes_floor_rows(h):
    x = np.ones((2, 3, h, 5), np.float32)
    frac = 120 / 224
    out = D.occlude_eyes(x, frac)
    rows = math.floor(frac * h)
    assert np.all(out[..., :rows, :] == 0)
    assert np.all(out[..., rows:, :] == 1)
    assert np.all(x == 1)  # input untouched


def test_occlusion_default_band_on_224_rows():
    out = D.occlude_eyes(np.ones((1, 1, 224, 2), np.float32), D.DEFAULT_OCCLUSION_FRACTION)
    assert int((out[0, 0, :, 0] == 0).sum()) == 120


@settings(max_examples=30, deadline=None)
@given(v=st.floats(0, 1), factor=st.sampled_from([2, 4, 8]))
def test_degrade_keeps_constant_images(v, factor):
    x = np.full((1, 2, 16, 8), v, np.float32)
    np.testing.assert_array_equal(D.degrade_pixels(x, factor), x)


def test_degrade_nearest_neighbour():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4) / 16
    out = D.degrade_pixels(x, 2)
    expected = np.array([[0, 0, 2, 2], [0, 0, 2, 2], [8, 8, 10, 10], [8, 8, 10, 10]], np.float32) / 16
    np.testing.assert_array_equal(out[0, 0], expected)
    with pytest.raises(ConfigError):
        D.degrade_pixels(np.zeros((1, 1, 6, 6)), 4)


def test_manipulation_spec_validation():
    with pytest.raises(ConfigError):
        D.ManipulationSpec("brightness", -1)
    with pytest.raises(ConfigError):
        D.ManipulationSpec("degrade", 2.5)
    with pytest.raises(ConfigError):
        D.ManipulationSpec("occlude", 1.0)
    assert str(D.ManipulationSpec("brightness", 0.15)) == "brightness(0.15)"


# ---------------------------------------------------------------- test data types


def test_tdt_sizes_and_order():
    base = D.synth_dataset(0, 3, n_classes=2)
    assert len(D.build_test_set(base, "clean")) == 6
    assert len(D.build_test_set(base, "bright_clean")) == 12
    assert len(D.build_test_set(base, "dark_clean")) == 12
    bdc = D.build_test_set(base, "bright_dark_clean")
    assert len(bdc) == 18
    np.testing.assert_array_equal(bdc.images[:6], D.apply_brightness(base.images, D.BRIGHT_BR))
    np.testing.assert_array_equal(bdc.images[6:12], D.apply_brightness(base.images, D.DARK_BR))
    np.testing.assert_array_equal(bdc.images[12:], base.images)
    assert bdc.labels.tolist() == base.labels.tolist() * 3


# ---------------------------------------------------------------- partitions


def covers_exactly(plan, n):
    allidx = np.concatenate(list(plan.assignments.values()))
    return len(allidx) == n and len(np.unique(allidx)) == n


@settings(max_examples=30, deadline=None)
@given(n=st.integers(5, 300), j=st.integers(1, 5), seed=st.integers(0, 1000))
def test_iid_partition_covers_and_balances(n, j, seed):
    ds = D.LabeledDataset(np.zeros((n, 1, 1, 1)), np.arange(n) % 3, 3)
    plan = D.partition_iid(ds, j, seed)
    assert plan.n_clients == j and covers_exactly(plan, n)
    sizes = list(plan.sizes().values())
    assert max(sizes) - min(sizes) <= 1


@settings(max_examples=30, deadline=None)
@given(n=st.integers(10, 300), j=st.integers(1, 8), seed=st.integers(0, 1000),
       conc=st.floats(0.05, 5), spread=st.floats(0.1, 2))
def test_noniid_partition_covers_everything(n, j, seed, conc, spread):
    labels = np.random.default_rng(seed).integers(0, 4, n)
    ds = D.LabeledDataset(np.zeros((n, 1, 1, 1)), labels, 4)
    plan = D.partition_noniid(ds, j, seed, conc, spread)
    assert plan.n_clients == j and covers_exactly(plan, n)
    assert min(plan.sizes().values()) >= 1


def test_noniid_is_skewed_and_iid_is_not():
    ds = D.synth_dataset(0, 100)
    iid_tv, non_tv, size_cv = [], [], []
    for seed in range(10):
        glob = ds.label_histogram() / len(ds)
        for plan, bucket in ((D.partition_iid(ds, 5, seed), iid_tv), (D.partition_noniid(ds, 5, seed), non_tv)):
            for idx in plan.assignments.values():
                h = np.bincount(ds.labels[idx], minlength=10) / len(idx)
                bucket.append(0.5 * np.abs(h - glob).sum())
        sizes = np.array(list(D.partition_noniid(ds, 5, seed).sizes().values()))
        size_cv.append(sizes.std() / sizes.mean())
    assert np.mean(non_tv) > 3 * np.mean(iid_tv)
    assert np.mean(non_tv) > 0.3
    assert np.mean(size_cv) > 0.2


def test_partition_is_seeded():
    ds = D.synth_dataset(0, 20)
    a, b = D.partition_noniid(ds, 4, 3), D.partition_noniid(ds, 4, 3)
    assert all(np.array_equal(a.assignments[c], b.assignments[c]) for c in range(4))


def test_too_many_clients():
    ds = D.LabeledDataset(np.zeros((3, 1, 1, 1)), np.zeros(3, int), 1)
    with pytest.raises(ConfigError):
        D.partition_iid(ds, 4, 0)


def test_manipulations_applied_to_chosen_clients_only():
    ds = D.synth_dataset(0, 10, n_classes=2, height=8, width=8)
    plan = D.partition_iid(ds, 4, 0)
    spec = D.ManipulationSpec("brightness", 0.15)
    plan = D.assign_manipulations(plan, 2, spec, seed=1)
    chosen = [c for c, s in plan.manipulations.items() if s is not None]
    assert len(chosen) == 2
    local = D.client_datasets(ds, plan)
    for cid, part in local.items():
        raw = ds.images[plan.assignments[cid]]
        expect = D.apply_brightness(raw, 0.15) if cid in chosen else raw
        np.testing.assert_array_equal(part.images, expect)


# ---------------------------------------------------------------- image dumps


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.integers(0, 256, (3, 5, 7)) / 255).astype(np.float32)
    D.write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    np.testing.assert_allclose(D.read_ppm(tmp_path / "a.ppm"), img, atol=1e-6)
    gray = img[:1]
    D.write_ppm(tmp_path / "g.ppm", gray)
    back = D.read_ppm(tmp_path / "g.ppm")
    np.testing.assert_allclose(back, np.repeat(gray, 3, 0), atol=1e-6)


def test_hand_built_idx_fixture(tmp_path):
    img = bytes(range(0, 32 * 8, 8))  # 32 pixels: two 4x4 images
    (tmp_path / "i").write_bytes(bytes.fromhex("00000803 00000002 00000004 00000004") + img)
    (tmp_path / "l").write_bytes(bytes.fromhex("00000801 00000002") + bytes([1, 0]))
    ds = D.load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(ds.images.ravel(), np.frombuffer(img, np.uint8).astype(np.float32) / 255)
    assert ds.labels.tolist() == [1, 0] and ds.n_classes == 2


def test_smallest_synthetic_dataset():
    assert len(D.synth_dataset(0, 1, n_classes=2)) == 2


def test_iid_sizes_examples():
    for n, expected in ((100, [20] * 5), (101, [20, 20, 20, 20, 21])):
        ds = D.LabeledDataset(np.zeros((n, 1, 1, 1)), np.zeros(n, int), 1)
        assert sorted(D.partition_iid(ds, 5, 0).sizes().values()) == expected


def test_noniid_concentration_limits():
    ds = D.synth_dataset(0, 100)
    glob = ds.label_histogram() / len(ds)
    worst, skewed = 0.0, 0
    for seed in range(10):
        plan = D.partition_noniid(ds, 5, seed, label_concentration=1e6)
        for idx in plan.assignments.values():
            h = np.bincount(ds.labels[idx], minlength=10) / len(idx)
            worst = max(worst, np.abs(h - glob).max())
        plan = D.partition_noniid(ds, 5, seed, label_concentration=0.1)
        tops = [np.bincount(ds.labels[idx], minlength=10).max() / len(idx) for idx in plan.assignments.values()]
        skewed += max(tops) > 0.5
    assert worst < 0.05
    assert skewed == 10


def test_noniid_size_ratio():
    ds = D.synth_dataset(0, 100)
    for seed in range(10):
        sizes = list(D.partition_noniid(ds, 5, seed, size_spread=0.5).sizes().values())
        assert max(sizes) / min(sizes) > 1.2


def test_small_manipulation_examples():
    assert D.apply_brightness(np.array([0.5], np.float32), 2.3).item() == 1.0
    checker = (np.indices((4, 4)).sum(0) % 2).astype(np.float32)[None, None]
    out = D.degrade_pixels(checker, 2)[0, 0]
    np.testing.assert_array_equal(out, np.zeros((4, 4)))  # every 2x2 block takes its top-left value 0
    x = np.ones((1, 1, 4, 4), np.float32)
    assert np.flatnonzero((D.occlude_eyes(x, 0.5)[0, 0] == 0).all(axis=1)).tolist() == [0, 1]
    np.testing.assert_array_equal(D.occlude_eyes(np.ones((1, 1, 32, 32)), 0.01), np.ones((1, 1, 32, 32)))
    assert len(D.build_test_set(D.synth_dataset(0, 10), "bright_dark_clean")) == 300


def test_desk_model_learns_synthetic_data():
    from flats.evaluation import accuracy, train_surrogate
    from flats import nn
    train, test = D.synth_split(7, 200, 50)
    model = train_surrogate(train, nn.small_cnn(), seed=0, epochs=5, lr=0.05, batch_size=64)
    assert accuracy(model, test) >= 0.9
