import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from metadip.errors import DataError, DegenerateInputError, DimensionError
from metadip.imaging import (
    DatasetSource,
    EmaAccumulator,
    ImageDataset,
    add_gaussian_noise,
    check_image,
    clamp01,
    ema_update,
    load_dataset,
    nmse,
    psnr,
    read_image,
    save_png,
    to_uint8,
    total_variation,
)

unit_images = arrays(
    np.float64,
    st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3])),
    elements=st.floats(0.0, 1.0, allow_nan=False),
)


# -- check_image -------------------------------------------------------------


def test_check_image_promotes_grayscale():
    out = check_image(np.zeros((4, 5)))
    assert out.shape == (4, 5, 1) and out.dtype == np.float64


@pytest.mark.parametrize("shape", [(4,), (2, 2, 2), (2, 2, 4), (1, 2, 3, 4), (0, 3, 3)])
def test_check_image_rejects_bad_shapes(shape):
    with pytest.raises(DimensionError):
        check_image(np.zeros(shape))


def test_check_image_rejects_nan():
    img = np.zeros((2, 2, 1))
    img[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        check_image(img)


# -- PSNR / NMSE -----------------------------------------------------------------


def test_psnr_hand_values():
    ref = np.zeros((4, 4, 1))
    assert psnr(ref, np.full_like(ref, 0.1)) == pytest.approx(20.0, abs=1e-9)
    est = ref.copy()
    est[:2] = 0.5  # half the pixels off by 0.5: mse 0.125
    assert psnr(ref, est) == pytest.approx(-10 * math.log10(0.125), abs=1e-9)


def test_psnr_identical_is_capped():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(img, img) == 100.0
    assert psnr(img, img + 3e-6) == 100.0  # mse 9e-12 < 1e-10


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)))


def test_psnr_awgn_sigma25_matches_theory():
    clean = np.full((128, 128, 3), 0.5)
    expected = 20 * math.log10(255 / 25)  # 20.172 dB
    for seed in range(3):
        noisy = add_gaussian_noise(clean, 25, seed)
        assert abs(psnr(clean, noisy) - expected) <= 0.1


def test_psnr_decreases_as_noise_grows():
    clean = np.full((64, 64, 3), 0.5)
    sigmas = [5, 10, 15, 25, 50]
    means = [np.mean([psnr(clean, add_gaussian_noise(clean, s, seed)) for seed in range(5)]) for s in sigmas]
    assert all(a > b for a, b in zip(means, means[1:]))


def test_nmse_hand_values():
    ref = np.array([1.0, 2.0, 2.0]).reshape(1, 3, 1)
    assert nmse(ref, np.array([1.0, 2.0, 5.0]).reshape(1, 3, 1)) == pytest.approx(1.0)
    assert nmse(ref, np.zeros_like(ref)) == pytest.approx(1.0)
    assert nmse(ref, 2 * ref) == pytest.approx(1.0)
    assert nmse(ref, ref) == 0.0


def test_nmse_zero_reference():
    with pytest.raises(DegenerateInputError):
        nmse(np.zeros((2, 2, 1)), np.ones((2, 2, 1)))


@settings(max_examples=50, deadline=None)
@given(unit_images, st.integers(0, 2**31))
def test_psnr_symmetric_and_bounded(img, seed):
    other = np.random.default_rng(seed).random(img.shape)
    p = psnr(img, other)
    assert p == psnr(other, img)
    assert 0.0 <= p <= 100.0  # unit-range images: mse <= 1


# -- total variation -----------------------------------------------------------------


def test_tv_hand_values():
    assert total_variation(np.array([[0.0, 1.0], [1.0, 3.0]])) == pytest.approx(6.0)
    assert total_variation(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(4.0)
    assert total_variation(np.full((5, 5, 3), 0.7)) == 0.0
    assert total_variation(np.ones((1, 1, 1))) == 0.0
    # channels add
    ramp = np.arange(3, dtype=float).reshape(1, 3, 1)
    assert total_variation(np.concatenate([ramp, 2 * ramp, 0 * ramp], axis=2)) == pytest.approx(6.0)


def test_tv_torch_matches_numpy():
    img = np.random.default_rng(1).random((6, 7, 3))
    assert float(total_variation(torch.from_numpy(img))) == pytest.approx(total_variation(img))


@settings(max_examples=50, deadline=None)
@given(unit_images, st.floats(-2, 2))
def test_tv_properties(img, offset):
    tv = total_variation(img)
    assert tv >= 0
    assert total_variation(img + offset) == pytest.approx(tv, abs=1e-9)
    assert total_variation(img[::-1, ::-1]) == pytest.approx(tv, abs=1e-9)
    assert total_variation(2 * img) == pytest.approx(2 * tv, abs=1e-9)


def test_tv_is_zero_only_for_per_channel_constants():
    img = np.zeros((3, 3, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.1, 0.5, 0.9
    assert total_variation(img) == 0.0
    img[1, 1, 2] = 0.8
    assert total_variation(img) == pytest.approx(0.4)  # four unit-spaced neighbours differ by 0.1


# -- EMA -----------------------------------------------------------------------


def ema_closed_form(values, decay):
    """avg_k = d^(k-1) v_1 + sum_{i>=2} (1-d) d^(k-i) v_i."""
    k = len(values)
    out = decay ** (k - 1) * values[0]
    for i in range(1, k):
        out = out + (1 - decay) * decay ** (k - 1 - i) * values[i]
    return out


@pytest.mark.parametrize("decay", [0.0, 0.5, 0.9, 0.99])
def test_ema_matches_closed_form(decay):
    rng = np.random.default_rng(2)
    values = [rng.random((3, 3, 1)) for _ in range(100)]
    acc = EmaAccumulator(decay)
    for k, v in enumerate(values, start=1):
        ema_update(acc, v)
        np.testing.assert_allclose(acc.average, ema_closed_form(values[:k], decay), rtol=1e-12)
    assert acc.count == 100


def test_ema_first_update_copies():
    v = np.ones((2, 2, 1))
    acc = EmaAccumulator(0.99).update(v)
    v[:] = 5
    assert np.all(acc.average == 1)


def test_ema_validation():
    with pytest.raises(ValueError):
        EmaAccumulator(1.0)
    acc = EmaAccumulator(0.5).update(np.zeros((2, 2, 1)))
    with pytest.raises(DimensionError):
        acc.update(np.zeros((3, 2, 1)))


# -- noise -----------------------------------------------------------------------


def test_noise_is_seeded_and_unclamped():
    img = np.zeros((16, 16, 1))
    a = add_gaussian_noise(img, 25, 7)
    b = add_gaussian_noise(img, 25, 7)
    np.testing.assert_array_equal(a, b)
    assert a.min() < 0  # no clamping
    assert not np.array_equal(a, add_gaussian_noise(img, 25, 8))
    np.testing.assert_array_equal(add_gaussian_noise(img, 0, 7), img)
    with pytest.raises(ValueError):
        add_gaussian_noise(img, -1, 0)


# -- 8-bit IO ----------------------------------------------------------------------


def test_to_uint8_rounds_half_up_and_clamps():
    vals = np.array([0.0, 0.5, 0.5 / 255, 0.2, 1.0, 1.2, -0.1]).reshape(1, 7, 1)
    np.testing.assert_array_equal(to_uint8(vals).ravel(), [0, 128, 1, 51, 255, 255, 0])
    np.testing.assert_array_equal(clamp01(vals).ravel()[-2:], [1.0, 0.0])


def test_png_round_trip_is_exact_on_8bit_grid(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, (5, 6, 3)) / 255.0
    save_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)
    gray = img[:, :, :1]
    save_png(tmp_path / "g.png", gray)
    np.testing.assert_array_equal(read_image(tmp_path / "g.png", channels=1), gray)


# -- datasets ---------------------------------------------------------------------


def _write(path, size, value=128):
    Image.fromarray(np.full((size, size, 3), value, np.uint8)).save(path)


def test_load_dataset_sorted_center_crop_and_skips(tmp_path):
    _write(tmp_path / "b.png", 10, 20)
    _write(tmp_path / "a.bmp", 9, 10)
    _write(tmp_path / "c.png", 4)  # too small
    (tmp_path / "d.png").write_bytes(b"not an image")
    (tmp_path / "notes.txt").write_text("ignored")
    with pytest.warns(UserWarning, match="skipped 2") as record:
        ds = load_dataset(DatasetSource(tmp_path, patch_size=8))
    assert ds.names == ["a.bmp", "b.png"]
    assert ds.shape == (8, 8, 3)
    assert ds.skipped == 2
    assert len(record) == 1
    assert ds[0][0, 0, 0] == pytest.approx(10 / 255)


def test_center_crop_takes_central_window(tmp_path):
    big = np.random.default_rng(4).integers(0, 256, (256, 256, 3), dtype=np.uint8)
    Image.fromarray(big).save(tmp_path / "big.png")
    ds = load_dataset(DatasetSource(tmp_path, patch_size=128))
    np.testing.assert_array_equal(ds[0], big[64:192, 64:192] / 255.0)


def test_full_size_patch_is_the_whole_image(tmp_path):
    img = np.random.default_rng(6).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "x.png")
    ds = load_dataset(DatasetSource(tmp_path, crop="random-patch", patch_size=16, patches_per_image=2, seed=1))
    for patch in ds:
        np.testing.assert_array_equal(patch, img / 255.0)


def test_load_dataset_random_patches_deterministic(tmp_path):
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (20, 20, 3), dtype=np.uint8)).save(tmp_path / "x.png")
    src = DatasetSource(tmp_path, crop="random-patch", patch_size=8, patches_per_image=3, seed=5)
    a, b = load_dataset(src), load_dataset(src)
    assert len(a) == 3
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(DatasetSource(tmp_path / "missing"))
    with pytest.raises(DataError):
        load_dataset(DatasetSource(tmp_path))
    with pytest.raises(ValueError):
        DatasetSource(tmp_path, crop="zoom")


def test_split_is_deterministic_and_disjoint():
    imgs = [np.full((2, 2, 1), i / 100) for i in range(100)]
    ds = ImageDataset(imgs, [f"img{i:03d}.png" for i in range(100)])
    tr, va = ds.split(0.1)
    tr2, va2 = ds.split(0.1)
    assert tr.names == tr2.names and va.names == va2.names
    assert set(tr.names).isdisjoint(va.names)
    assert len(tr) + len(va) == 100
    assert 2 <= len(va) <= 25
    # membership depends only on the name, not on the rest of the dataset
    sub = ImageDataset(imgs[:50], ds.names[:50])
    assert set(sub.split(0.1)[1].names) == set(va.names) & set(ds.names[:50])
