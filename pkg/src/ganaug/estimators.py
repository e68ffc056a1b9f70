"""scikit-learn style wrappers around :class:`ganaug.trainer.TrainingRun`.

>>> gan = ProgressiveGAN(final_resolution=16, total_iterations=60, channel_cap=8)
>>> gan.fit(images).sample(8).shape          # doctest: +SKIP
(8, 1, 16, 16)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics as M
from . import tensor as T
from . import trainer as TR
from .data import resize_pow2


def check_images(X, resolution: int | None = None) -> np.ndarray:
    """Validate and coerce a batch of square single-channel images in [-1, 1].

    Accepts [N,H,W] or [N,1,H,W]; returns float64 [N,1,H,W].

    Raises:
        ValueError: wrong rank, non-square or non power-of-two extent,
            non-finite values, values outside [-1, 1], or a resolution mismatch.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected [N,H,W] or [N,1,H,W] images, got shape {X.shape}")
    h, w = X.shape[-2:]
    if h != w or h < 4 or h & (h - 1):
        raise ValueError(f"images must be square with a power-of-two side >= 4, got {h}x{w}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.min() < -1.0 or X.max() > 1.0:
        raise ValueError("images must lie in [-1, 1]")
    if resolution is not None and h != resolution:
        raise ValueError(f"expected {resolution}x{resolution} images, got {h}x{w}")
    return X


def check_latents(Z, dim: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != dim:
        raise ValueError(f"expected [N,{dim}] latent codes, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("latent codes contain NaN or Inf")
    return Z


class _GANBase(BaseEstimator):
    _model = "pggan"

    def _config(self) -> TR.RunConfig:
        params = {k: v for k, v in self.get_params().items() if k not in ("use_ssim", "verbose")}
        return TR.RunConfig(model=self._model_name(), **params)

    def _model_name(self) -> str:
        return self._model

    def fit(self, X, y=None):
        """Train on images ``X`` (resampled to ``final_resolution`` by 2x2 averaging)."""
        X = resize_pow2(check_images(X), self.final_resolution)
        config = self._config()
        self.run_ = TR.TrainingRun(config, images=X)
        self.history_ = []
        every = max(1, config.total_iterations // 10)
        while not self.run_.done:
            report = self.run_.step()
            self.history_.append(report)
            if self.verbose and report["iter"] % every == 0:
                print(report)
        self.n_iter_ = self.run_.global_iter
        return self

    def sample(self, n_samples: int = 64, seed: int = 0) -> np.ndarray:
        """Draw generated images [n_samples, 1, R, R] in [-1, 1]."""
        check_is_fitted(self, "run_")
        with T.precision(self.precision):
            return TR.generate_samples(self.run_.generator, n_samples, seed)

    def score(self, X, y=None, provider="pixel-downsample", seed: int = 0) -> float:
        """Negative FID between ``X`` and an equal number of samples (higher is better)."""
        X = check_images(X, self.final_resolution)
        fake = self.sample(len(X), seed)
        return -M.fid_protocol(X, fake, provider, samples=len(X), seed=seed)


class ProgressiveGAN(_GANBase):
    """Progressive-growing WGAN-GP, optionally with the intra-batch SSIM diversity term.

    Parameters mirror :class:`ganaug.trainer.RunConfig`. After ``fit``,
    ``run_`` holds the full training state and ``history_`` the per-step reports.
    """

    def __init__(
        self,
        use_ssim: bool = False,
        latent_dim: int = 512,
        final_resolution: int = 32,
        total_iterations: int = 2000,
        batch_size: int = 32,
        learning_rate: float = 0.001,
        lambda_gp: float = 10.0,
        lambda_ssim: float = 10.0,
        seed: int = 0,
        channel_cap: int | None = 32,
        precision: int = 32,
        n_critic: int = 1,
        verbose: bool = False,
    ):
        self.use_ssim = use_ssim
        self.latent_dim = latent_dim
        self.final_resolution = final_resolution
        self.total_iterations = total_iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_gp = lambda_gp
        self.lambda_ssim = lambda_ssim
        self.seed = seed
        self.channel_cap = channel_cap
        self.precision = precision
        self.n_critic = n_critic
        self.verbose = verbose

    def _model_name(self) -> str:
        return "pggan-ssim" if self.use_ssim else "pggan"


class AlphaGANGP(TransformerMixin, _GANBase):
    """Fixed-resolution alpha-GAN with gradient penalties.

    ``transform`` encodes images to latent codes and ``inverse_transform``
    decodes codes back to images, so ``inverse_transform(transform(X))`` is
    the reconstruction.
    """

    _model = "alpha-gan-gp"

    def __init__(
        self,
        latent_dim: int = 512,
        final_resolution: int = 32,
        total_iterations: int = 1000,
        batch_size: int = 32,
        learning_rate: float = 0.001,
        lambda1: float = 10.0,
        lambda2: float = 10.0,
        seed: int = 0,
        channel_cap: int | None = 32,
        precision: int = 32,
        verbose: bool = False,
    ):
        self.latent_dim = latent_dim
        self.final_resolution = final_resolution
        self.total_iterations = total_iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.seed = seed
        self.channel_cap = channel_cap
        self.precision = precision
        self.verbose = verbose

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "run_")
        X = check_images(X, self.final_resolution)
        with T.precision(self.precision), T.no_grad():
            return self.run_.nets["E"](T.Tensor(X)).data.astype(np.float64)

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "run_")
        Z = check_latents(Z, self.latent_dim)
        with T.precision(self.precision), T.no_grad():
            return self.run_.generator(T.Tensor(Z)).data.astype(np.float64)

    def reconstruction_error(self, X) -> float:
        """Mean absolute error of G(E(x))."""
        X = check_images(X, self.final_resolution)
        return float(np.abs(self.inverse_transform(self.transform(X)) - X).mean())
