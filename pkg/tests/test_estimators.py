import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ganaug import data as D
from ganaug.estimators import AlphaGANGP, ProgressiveGAN, check_images, check_latents


@pytest.fixture(scope="module")
def images():
    return D.stack_records(D.phantom_generate(D.PhantomParams(resolution=16, seed=4), 24))


def small_pg(**kw):
    base = dict(latent_dim=8, final_resolution=8, total_iterations=12, batch_size=4, channel_cap=4, precision=64, seed=1)
    base.update(kw)
    return ProgressiveGAN(**base)


def test_check_images_shapes():
    assert check_images(np.zeros((2, 8, 8))).shape == (2, 1, 8, 8)
    assert check_images(np.zeros((2, 1, 4, 4)), resolution=4).dtype == np.float64


@pytest.mark.parametrize(
    "bad,match",
    [
        (np.zeros((8, 8)), "shape"),
        (np.zeros((2, 3, 8, 8)), "shape"),
        (np.zeros((2, 8, 4)), "square"),
        (np.zeros((2, 12, 12)), "power-of-two"),
        (np.zeros((0, 8, 8)), "no images"),
        (np.full((1, 8, 8), np.nan), "NaN"),
        (np.full((1, 8, 8), 1.5), r"\[-1, 1\]"),
    ],
)
def test_check_images_errors(bad, match):
    with pytest.raises(ValueError, match=match):
        check_images(bad)


def test_check_images_resolution_mismatch():
    with pytest.raises(ValueError, match="16x16"):
        check_images(np.zeros((1, 8, 8)), resolution=16)


def test_check_latents():
    with pytest.raises(ValueError):
        check_latents(np.zeros((3, 4)), 5)
    with pytest.raises(ValueError):
        check_latents(np.array([[np.inf]]), 1)


def test_params_and_clone():
    est = small_pg(use_ssim=True)
    p = est.get_params()
    assert p["use_ssim"] and p["final_resolution"] == 8
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(seed=9)
    assert est.seed == 9
    assert AlphaGANGP().get_params()["lambda1"] == 10.0


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        small_pg().sample(2)
    with pytest.raises(NotFittedError):
        AlphaGANGP(final_resolution=8).transform(np.zeros((1, 8, 8)))


def test_progressive_fit_sample(images):
    est = small_pg().fit(images)
    assert est.n_iter_ == 12 and len(est.history_) == 12
    out = est.sample(5, seed=3)
    assert out.shape == (5, 1, 8, 8) and np.abs(out).max() <= 1
    np.testing.assert_array_equal(out, est.sample(5, seed=3))
    again = small_pg().fit(images)
    np.testing.assert_array_equal(out, again.sample(5, seed=3))


def test_progressive_ssim_model_name(images):
    est = small_pg(use_ssim=True).fit(images)
    assert est.run_.config.model == "pggan-ssim"
    assert est.history_[-1]["ssim_term"] is None  # 8x8 is below the SSIM window


def test_progressive_score(images):
    est = small_pg(final_resolution=16, total_iterations=12).fit(images)
    s = est.score(images, provider="random-conv")
    assert np.isfinite(s) and s <= 0


def test_alpha_transform_round_trip(images):
    est = AlphaGANGP(latent_dim=8, final_resolution=8, total_iterations=3, batch_size=4, channel_cap=4, precision=64).fit(images)
    X = D.resize_pow2(images[:6], 8)
    Z = est.transform(X)
    assert Z.shape == (6, 8)
    rec = est.inverse_transform(Z)
    assert rec.shape == X.shape
    assert est.reconstruction_error(X) == pytest.approx(np.abs(rec - X).mean())
    with pytest.raises(ValueError):
        est.transform(images[:2])  # 16x16 into an 8x8 model
