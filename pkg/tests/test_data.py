import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ganaug import data as D
from ganaug import metrics as M
from ganaug.data import DataError, PhantomParams


def test_select_slice():
    vol = np.arange(155)[:, None, None] * np.ones((155, 4, 4))
    assert D.select_slice(vol)[0, 0] == 64
    assert D.select_slice(vol, 0)[0, 0] == 0
    with pytest.raises(DataError):
        D.select_slice(vol, 155)
    with pytest.raises(DataError):
        D.select_slice(vol, -1)


def test_zero_pad_examples():
    img = np.ones((240, 240))
    out, (top, left) = D.zero_pad(img, 256)
    assert out.shape == (256, 256) and (top, left) == (8, 8)
    assert out[:8].sum() == 0 and out[-8:].sum() == 0
    same, offs = D.zero_pad(np.arange(16.0).reshape(4, 4), 4)
    np.testing.assert_array_equal(same, np.arange(16.0).reshape(4, 4))
    assert offs == (0, 0)
    small, offs = D.zero_pad(np.ones((3, 3)), 6)
    assert offs == (1, 1)
    assert small[1:4, 1:4].sum() == 9 and small[0].sum() == 0 and small[4:].sum() == 0
    with pytest.raises(DataError):
        D.zero_pad(np.ones((5, 3)), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 6), st.integers(0, 10**6))
def test_pad_crop_round_trip(h, w, extra, seed):
    img = np.random.default_rng(seed).integers(0, 65535, size=(h, w))
    target = max(h, w) + extra
    padded, offs = D.zero_pad(img, target)
    np.testing.assert_array_equal(D.crop_back(padded, (h, w), offs), img)


def test_normalize_examples():
    raw = np.arange(101.0).reshape(1, 101)
    out = D.normalize_intensity(raw)
    assert out.min() == -1.0 and out.max() == 1.0
    x = np.linspace(-1, 1, 9)
    np.testing.assert_allclose(D.normalize_intensity(x), x, atol=1e-15)
    with pytest.warns(RuntimeWarning):
        const = D.normalize_intensity(np.full((3, 3), 7.0))
    assert np.all(const == -1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-1e5, 1e5)), st.sampled_from([None, 6, 8]))
def test_pipeline_output_in_range(raw, target):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out, _ = D.preprocess_slice(raw, target)
    assert out.min() >= -1.0 and out.max() <= 1.0
    assert out.shape == ((target, target) if target else raw.shape)


def test_padding_happens_before_normalisation():
    raw = np.full((2, 2), 50.0)
    raw[0, 0] = 100.0
    out, _ = D.preprocess_slice(raw, 4)
    assert out[0, 0] == -1.0  # padded raw zero is the minimum
    assert out[1, 1] == 1.0


# augmentation ------------------------------------------------------------------------


def test_augment_identities(rng):
    x = rng.uniform(-1, 1, size=(1, 8, 8))
    np.testing.assert_array_equal(D.classic_augment(D.classic_augment(x, "hflip"), "hflip"), x)
    np.testing.assert_array_equal(D.classic_augment(D.classic_augment(x, "vflip"), "vflip"), x)
    np.testing.assert_array_equal(D.classic_augment(x, "rotate90k", k=4), x)
    np.testing.assert_array_equal(D.classic_augment(x, "translate", dx=0, dy=0), x)
    np.testing.assert_array_equal(D.classic_augment(x, "center_crop", f=1.0), x)


def test_translate_fill_and_errors(rng):
    x = rng.uniform(-0.5, 0.5, size=(4, 4))
    out = D.classic_augment(x, "translate", dx=1, dy=-2)
    assert np.all(out[:, 0] == D.FILL) and np.all(out[2:, :] == D.FILL)
    np.testing.assert_array_equal(out[:2, 1:], x[2:, :3])
    with pytest.raises(DataError):
        D.classic_augment(x, "translate", dx=4)
    with pytest.raises(DataError):
        D.classic_augment(x, "center_crop", f=0.0)
    with pytest.raises(DataError):
        D.classic_augment(x, "shear")


def test_center_crop_nearest():
    x = np.arange(16.0).reshape(4, 4) / 16
    out = D.classic_augment(x, "center_crop", f=0.5)
    np.testing.assert_array_equal(out, np.repeat(np.repeat(x[1:3, 1:3], 2, 0), 2, 1))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["hflip", "vflip", "rotate90k"]), st.integers(-3, 7), st.integers(0, 10**6))
def test_flips_rotations_preserve_pixel_multiset(op, k, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(6, 6))
    out = D.classic_augment(x, op, k=k)
    np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(x.ravel()))


def test_augmenter_transformer(rng):
    X = rng.uniform(-1, 1, size=(3, 1, 4, 4))
    np.testing.assert_array_equal(D.ClassicAugmenter("hflip").fit(X).transform(X), X[..., ::-1])
    with pytest.raises(DataError):
        D.ClassicAugmenter("blur").fit(X)
    assert D.ClassicAugmenter(op="rotate90k", k=2).get_params()["k"] == 2


def test_slice_preprocessor():
    X = np.random.default_rng(0).integers(0, 1000, size=(2, 6, 5)).astype(float)
    out = D.SlicePreprocessor(target=8).fit_transform(X)
    assert out.shape == (2, 8, 8) and out.min() == -1.0 and out.max() == 1.0


# phantoms -------------------------------------------------------------------------------


def test_phantom_determinism_and_range():
    a = D.stack_records(D.phantom_generate(PhantomParams(seed=3), 10))
    b = D.stack_records(D.phantom_generate(PhantomParams(seed=3), 10))
    c = D.stack_records(D.phantom_generate(PhantomParams(seed=4), 10))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (10, 1, 32, 32) and a.min() >= -1 and a.max() <= 1
    np.testing.assert_array_equal(D.stack_records(D.phantom_generate(PhantomParams(seed=3), 4)), a[:4])


def test_phantom_noise_free_is_piecewise():
    x = D.phantom_generate(PhantomParams(noise_sigma=0.0, resolution=16, supersample=1), 1)[0].pixels
    assert len(np.unique(x)) <= 2 + 3 + 1 + 1


def test_phantom_params_validation():
    with pytest.raises(DataError):
        PhantomParams(resolution=24)
    with pytest.raises(DataError):
        PhantomParams(tumor_intensity=0.0)
    with pytest.raises(DataError):
        PhantomParams(noise_sigma=-1)


def test_phantom_speed():
    t = time.perf_counter()
    recs = D.phantom_generate(PhantomParams(resolution=32), 259)
    assert time.perf_counter() - t < 5.0
    assert len(recs) == 259


def test_phantom_family_is_diverse():
    imgs = D.stack_records(D.phantom_generate(PhantomParams(resolution=64, seed=0), 200))
    a, b = M.to_unit_range(imgs[:100]), M.to_unit_range(imgs[100:])
    assert M.ms_ssim_batch(a, b).mean() < 0.9


# batching -------------------------------------------------------------------------------


def test_iterate_batches_per_epoch():
    imgs = np.zeros((259, 1, 4, 4))
    imgs[:, 0, 0, 0] = np.arange(259)
    batches = list(D.dataset_iterate(imgs, 32, 0, epochs=1))
    assert len(batches) == 8
    seen = np.concatenate([b[:, 0, 0, 0] for b in batches])
    assert len(np.unique(seen)) == 256


def test_iterate_full_batch_is_permutation():
    imgs = np.arange(10.0)[:, None, None, None] * np.ones((10, 1, 2, 2))
    (only,) = list(D.dataset_iterate(imgs, 10, 5, epochs=1))
    assert sorted(only[:, 0, 0, 0]) == list(range(10))


def test_iterate_deterministic_and_errors():
    imgs = np.random.default_rng(0).uniform(-1, 1, size=(20, 1, 4, 4))
    a = list(D.dataset_iterate(imgs, 3, 9, epochs=2))
    b = list(D.dataset_iterate(imgs, 3, 9, epochs=2))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(DataError):
        next(D.dataset_iterate(imgs, 21))
    with pytest.raises(DataError):
        D.stack_records([])


def test_batch_stream_resume():
    imgs = np.random.default_rng(0).uniform(-1, 1, size=(13, 1, 4, 4))
    full = D.BatchStream(imgs, 4, seed=2)
    seq = [full.next() for _ in range(10)]
    resumed = D.BatchStream(imgs, 4, seed=2, position=6)
    for want in seq[6:]:
        np.testing.assert_array_equal(resumed.next(), want)
    assert resumed.position == 10


# files ---------------------------------------------------------------------------------


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_round_trip(tmp_path, maxval):
    v = np.random.default_rng(maxval).integers(0, maxval + 1, size=(5, 7))
    D.write_pgm(tmp_path / "a.pgm", v, maxval)
    got, mv = D.read_pgm(tmp_path / "a.pgm")
    assert mv == maxval
    np.testing.assert_array_equal(got, v)


def test_pgm_big_endian_and_comments(tmp_path):
    raw = b"P5\n# comment line\n2 1\n65535\n" + bytes([0x01, 0x02, 0xFF, 0x00])
    (tmp_path / "c.pgm").write_bytes(raw)
    got, _ = D.read_pgm(tmp_path / "c.pgm")
    assert got.tolist() == [[0x0102, 0xFF00]]


def test_pgm_errors(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(DataError):
        D.read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(DataError):
        D.read_pgm(tmp_path / "short.pgm")


def test_records_save_load(tmp_path):
    recs = D.phantom_generate(PhantomParams(resolution=8), 5)
    manifest = D.save_records(recs, tmp_path)
    rows = D.read_manifest(manifest)
    assert rows[0] == ("phantom0000", 0, "phantom0000_000.pgm")
    back = D.load_records(tmp_path)
    for a, b in zip(recs, back):
        assert a.source_id == b.source_id
        assert np.abs(a.pixels - b.pixels).max() <= 1.0 / 65535 + 1e-12


def test_convert_directory(tmp_path):
    src = tmp_path / "raw"
    src.mkdir()
    rng = np.random.default_rng(0)
    for case in ("caseA", "caseB"):
        for s in range(3):
            D.write_pgm(src / f"{case}_{s:03d}.pgm", rng.integers(0, 4000, size=(6, 6)))
    manifest = D.convert_directory(src, tmp_path / "out", slice_index=1, pad=8)
    recs = D.load_records(manifest.parent)
    assert [r.source_id for r in recs] == ["caseA", "caseB"]
    assert all(r.pixels.shape == (1, 8, 8) and r.slice_index == 1 for r in recs)
    with pytest.raises(DataError):
        D.convert_directory(src, tmp_path / "o2", slice_index=5)


def test_load_records_missing_dir(tmp_path):
    with pytest.raises(DataError):
        D.load_records(tmp_path / "nope")
    with pytest.raises(DataError):
        D.load_records(tmp_path)


def test_slice_record_validation():
    with pytest.raises(DataError):
        D.SliceRecord(np.full((1, 4, 4), 1.5), "x")
    with pytest.raises(DataError):
        D.SliceRecord(np.zeros((1, 4, 4)), "x", 0, (4, 4), (1, 0))


def test_resize_pow2():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(D.resize_pow2(x, 2)[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(DataError):
        D.resize_pow2(x, 3)
