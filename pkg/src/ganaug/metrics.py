"""SSIM, MS-SSIM and Frechet distance, with the sampling protocols and embedders.

Metric entry points take numpy images in ``[0, 1]`` and compute in 64-bit.
The protocol functions take model-range images in ``[-1, 1]`` and remap them
first. :func:`ssim_per_sample` works on engine tensors so the diversity loss
can differentiate through it.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as T
from .linalg import matrix_sqrt_psd, trace_sqrt_product  # noqa: F401
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
FID_CLAMP = 1e-6
EMB_MAGIC = b"EMB1"


class ProviderError(ValueError):
    """Unknown embedding provider or malformed embedding file."""


@dataclass(frozen=True)
class SsimParams:
    k1: float = 0.01
    k2: float = 0.03
    window_size: int = 11
    window_sigma: float = 1.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size % 2 == 0 or self.window_size < 1:
            raise ValueError(f"window_size must be odd, got {self.window_size}")
        if self.window_sigma <= 0:
            raise ValueError("window_sigma must be positive")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stabilising constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window_1d(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0 or size < 1:
        raise ValueError(f"window size must be odd, got {size}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Separable 2-D Gaussian window summing to one."""
    g = gaussian_window_1d(size, sigma)
    w = np.outer(g, g)
    return w / w.sum()


# SSIM on tensors -------------------------------------------------------------


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None] if x.shape[0] != 1 else x[None]
    if x.ndim == 4:
        return x
    raise ShapeError(f"expected an image or image batch, got shape {x.shape}")


def _band(n_in: int, g: np.ndarray) -> np.ndarray:
    """Valid-region correlation with ``g`` as an [n_in-k+1, n_in] matrix."""
    k = g.size
    m = np.zeros((n_in - k + 1, n_in))
    for i in range(n_in - k + 1):
        m[i, i : i + k] = g
    return m


class _Window:
    def __init__(self, h: int, w: int, params: SsimParams):
        if min(h, w) < params.window_size:
            raise ShapeError(f"image {h}x{w} is smaller than the {params.window_size}-pixel window")
        g = gaussian_window_1d(params.window_size, params.window_sigma)
        self.rows, self.cols = _band(h, g), _band(w, g)

    def __call__(self, x: Tensor) -> Tensor:
        return T.separable_filter(x, self.rows, self.cols)


def _flat(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.reshape(x, (n * c, h, w))


def _combine(mu_x, mu_y, ex2, ey2, exy, params: SsimParams) -> tuple[Tensor, Tensor]:
    mu_xx, mu_yy, mu_xy = T.square(mu_x), T.square(mu_y), T.mul(mu_x, mu_y)
    lum = T.div(
        T.add_scalar(T.scale(mu_xy, 2.0), params.c1),
        T.add_scalar(T.add(mu_xx, mu_yy), params.c1),
    )
    cs = T.div(
        T.add_scalar(T.scale(T.sub(exy, mu_xy), 2.0), params.c2),
        T.add_scalar(T.add(T.sub(ex2, mu_xx), T.sub(ey2, mu_yy)), params.c2),
    )
    return lum, cs


def _ssim_terms(x: Tensor, y: Tensor, params: SsimParams) -> tuple[Tensor, Tensor]:
    """Per-pixel luminance and contrast-structure maps over the valid region, [N*C, h, w]."""
    if x.shape != y.shape:
        raise ShapeError(f"ssim operands differ in shape: {x.shape} vs {y.shape}")
    win = _Window(x.shape[2], x.shape[3], params)
    x, y = _flat(x), _flat(y)
    return _combine(win(x), win(y), win(T.square(x)), win(T.square(y)), win(T.mul(x, y)), params)


def _per_sample_mean(lum: Tensor, cs: Tensor, n: int, c: int) -> Tensor:
    per = T.reduce_mean(T.reshape(T.mul(lum, cs), (lum.shape[0], -1)), axis=1)
    if c != 1:
        per = T.reduce_mean(T.reshape(per, (n, c)), axis=1)
    return per


def ssim_per_sample(x: Tensor, y: Tensor, params: SsimParams | None = None) -> Tensor:
    """Differentiable SSIM for each sample of two [N,C,H,W] tensors in [0, L]."""
    params = params or SsimParams()
    lum, cs = _ssim_terms(x, y, params)
    return _per_sample_mean(lum, cs, x.shape[0], x.shape[1])


def ssim_pairs(x: Tensor, i, j, params: SsimParams | None = None) -> Tensor:
    """SSIM between ``x[i[k]]`` and ``x[j[k]]`` for each k.

    Same values as ``ssim_per_sample(take(x, i), take(x, j))``, but the
    per-image moments are filtered once instead of once per pair.
    """
    params = params or SsimParams()
    n, c, h, w = x.shape
    win = _Window(h, w, params)
    flat = _flat(x)
    mu, e2 = win(flat), win(T.square(flat))
    i, j = np.asarray(i), np.asarray(j)
    if c != 1:
        # expand image indices to channel-plane indices
        i = (i[:, None] * c + np.arange(c)).ravel()
        j = (j[:, None] * c + np.arange(c)).ravel()
    xi, xj = T.take(flat, i), T.take(flat, j)
    lum, cs = _combine(T.take(mu, i), T.take(mu, j), T.take(e2, i), T.take(e2, j), win(T.mul(xi, xj)), params)
    return _per_sample_mean(lum, cs, len(i) // c, c)


def ssim_map(x, y, params: SsimParams | None = None) -> np.ndarray:
    """Per-pixel SSIM over the valid region, [N, C, H - k + 1, W - k + 1]."""
    params = params or SsimParams()
    xb = _as_batch(x)
    with T.precision(64), T.no_grad():
        lum, cs = _ssim_terms(T.Tensor(xb), T.Tensor(_as_batch(y)), params)
        return (lum.data * cs.data).reshape(xb.shape[:2] + lum.shape[1:])


def ssim(x, y, params: SsimParams | None = None) -> float:
    """Mean SSIM of two images (or the mean over two aligned batches)."""
    with T.precision(64), T.no_grad():
        per = ssim_per_sample(T.Tensor(_as_batch(x)), T.Tensor(_as_batch(y)), params)
        return float(per.data.mean())


# MS-SSIM ----------------------------------------------------------------------


def feasible_scales(height: int, width: int, window_size: int = 11, limit: int = 5) -> int:
    scales, size = 0, min(height, width)
    while scales < limit and size >= window_size:
        scales += 1
        size //= 2
    return scales


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    x = x[..., : h - h % 2, : w - w % 2]
    return x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))


def ms_ssim_batch(
    x, y, params: SsimParams | None = None, scales: int | None = None, weights=None
) -> np.ndarray:
    """MS-SSIM for each aligned pair of two batches of [0, 1] images.

    ``scales=None`` uses the largest feasible count (at most five) with the
    leading weights renormalised to sum to one. Negative contrast-structure
    means are clamped to zero before exponentiation.
    """
    params = params or SsimParams()
    xb, yb = _as_batch(x), _as_batch(y)
    if xb.shape != yb.shape:
        raise ShapeError(f"ms_ssim operands differ in shape: {xb.shape} vs {yb.shape}")
    available = feasible_scales(*xb.shape[-2:], params.window_size)
    if scales is None:
        scales = available
        if scales == 0:
            raise ShapeError(f"image {xb.shape[-2:]} is smaller than the window")
    elif scales > available:
        raise ShapeError(f"{xb.shape[-2]}x{xb.shape[-1]} images support only {available} scales")
    if weights is None:
        weights = np.asarray(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
        weights = weights / weights.sum()
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.size != scales:
            raise ValueError("need one weight per scale")
    result = np.ones(xb.shape[0], dtype=np.float64)
    with T.precision(64), T.no_grad():
        for j in range(scales):
            lum, cs = _ssim_terms(T.Tensor(xb), T.Tensor(yb), params)
            n = xb.shape[0]
            if j == scales - 1:
                term = (lum.data * cs.data).reshape(n, -1).mean(axis=1)
            else:
                term = cs.data.reshape(n, -1).mean(axis=1)
            result *= np.maximum(term, 0.0) ** weights[j]
            xb, yb = _halve(xb), _halve(yb)
    return result


def ms_ssim(x, y, params: SsimParams | None = None, scales: int | None = None, weights=None) -> float:
    return float(ms_ssim_batch(x, y, params, scales, weights).mean())


def to_unit_range(images) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) + 1.0) / 2.0


ImageSource = Union[np.ndarray, Callable[[int, np.random.Generator], np.ndarray]]


def _draw_pairs(source: ImageSource, pairs: int, rng: np.random.Generator):
    if callable(source):
        first = np.asarray(source(pairs, rng))
        second = np.asarray(source(pairs, rng))
        if len(first) < pairs or len(second) < pairs:
            raise RuntimeError("image source exhausted before the requested pair count")
        return first[:pairs], second[:pairs]
    pool = np.asarray(source)
    if len(pool) < 2:
        if len(pool) == 1:
            return np.repeat(pool, pairs, axis=0), np.repeat(pool, pairs, axis=0)
        raise RuntimeError("image source is empty")
    i = rng.integers(0, len(pool), size=pairs)
    j = (i + rng.integers(1, len(pool), size=pairs)) % len(pool)
    return pool[i], pool[j]


def ms_ssim_protocol(
    source: ImageSource,
    pairs: int = 2000,
    seed: int = 0,
    params: SsimParams | None = None,
    chunk: int = 500,
) -> float:
    """Mean MS-SSIM over ``pairs`` independently drawn pairs of model-range images.

    Pairs are fixed by the seed before evaluation; the chunked loop only
    batches work and does not affect the result.
    """
    rng = np.random.default_rng(seed)
    a, b = _draw_pairs(source, pairs, rng)
    a, b = to_unit_range(a), to_unit_range(b)
    values = [ms_ssim_batch(a[k : k + chunk], b[k : k + chunk], params) for k in range(0, pairs, chunk)]
    return float(np.concatenate(values).mean())


# Frechet distance ---------------------------------------------------------------


def frechet_distance(mu1, sigma1, mu2, sigma2, flags: list | None = None) -> float:
    """Squared Frechet distance between two Gaussians.

    Negative results in ``[-1e-6, 0)`` from the matrix square root are clamped
    to zero (and ``"fid_clamped"`` appended to ``flags``); anything lower
    raises, since it points to a numerical or logic error.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    d = mu1.shape[0]
    if mu2.shape != (d,) or s1.shape != (d, d) or s2.shape != (d, d):
        raise ValueError("mean and covariance dimensions do not agree")
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * trace_sqrt_product(s1, s2))
    if value < 0:
        if value < -FID_CLAMP:
            raise ArithmeticError(f"Frechet distance {value:.3e} is negative beyond tolerance")
        if flags is not None:
            flags.append("fid_clamped")
        value = 0.0
    return value


def gaussian_stats(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(vectors, dtype=np.float64)
    return v.mean(axis=0), np.cov(v, rowvar=False, ddof=1).reshape(v.shape[1], v.shape[1])


# embeddings ----------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    provider_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ProviderError("embeddings must form a 2-D matrix")
        n, d = self.vectors.shape
        if n < d + 1:
            warnings.warn(f"{n} samples for a {d}-dimensional covariance is rank deficient", stacklevel=2)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(images: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel bilinear resampling of [N,1,H,W] images to size x size."""
    images = _as_batch(images)
    rows = _resize_matrix(images.shape[-2], size)
    cols = _resize_matrix(images.shape[-1], size)
    return np.einsum("ih,nchw,jw->ncij", rows, images, cols)


class PixelDownsampleEmbedder(TransformerMixin, BaseEstimator):
    """Bilinear resize to ``size`` x ``size`` and flatten."""

    provider_id = "pixel-downsample"

    def __init__(self, size: int = 16):
        self.size = size

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        out = bilinear_resize(X, self.size)
        return out.reshape(out.shape[0], -1)


class RandomConvEmbedder(TransformerMixin, BaseEstimator):
    """Fixed-seed three-layer random conv net followed by global average pooling."""

    provider_id = "random-conv"

    def __init__(self, seed: int = 0, widths=(16, 32, 64), batch_size: int = 256):
        self.seed = seed
        self.widths = widths
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        rng = np.random.default_rng(self.seed)
        chans = (1,) + tuple(self.widths)
        self.kernels_ = [
            rng.standard_normal((co, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9)) for ci, co in zip(chans, chans[1:])
        ]
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "kernels_"):
            self.fit()
        X = _as_batch(X)
        out = []
        with T.precision(64), T.no_grad():
            for k in range(0, len(X), self.batch_size):
                h = T.Tensor(X[k : k + self.batch_size])
                for i, w in enumerate(self.kernels_):
                    h = T.leaky_relu(T.conv2d(h, T.Tensor(w), 1, 1), 0.2)
                    if i < len(self.kernels_) - 1 and h.shape[-1] % 2 == 0 and h.shape[-1] > 1:
                        h = T.avgpool2x(h)
                out.append(h.data.mean(axis=(2, 3)))
        return np.concatenate(out, axis=0)


class ExternalFileEmbedder(TransformerMixin, BaseEstimator):
    """Precomputed vectors read from an ``EMB1`` file; the images are ignored."""

    provider_id = "external-file"

    def __init__(self, path: str | None = None):
        self.path = path

    def fit(self, X=None, y=None):
        return self

    def transform(self, X=None) -> np.ndarray:
        if self.path is None:
            raise ProviderError("external-file provider needs a path")
        return read_embeddings(self.path)


PROVIDERS = {
    "pixel-downsample": PixelDownsampleEmbedder,
    "random-conv": RandomConvEmbedder,
    "external-file": ExternalFileEmbedder,
}


def get_provider(provider, **kwargs):
    if isinstance(provider, BaseEstimator):
        return provider
    try:
        return PROVIDERS[provider](**kwargs)
    except KeyError:
        raise ProviderError(f"unknown embedding provider {provider!r}") from None


def embed(provider, images) -> EmbeddingSet:
    prov = get_provider(provider)
    return EmbeddingSet(prov.fit().transform(images), prov.provider_id)


def write_embeddings(path, vectors) -> None:
    v = np.ascontiguousarray(vectors, dtype="<f4")
    if v.ndim != 2:
        raise ProviderError("embeddings must form a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", *v.shape) + v.tobytes())


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != EMB_MAGIC:
        raise ProviderError(f"{path}: not an EMB1 embedding file")
    n, d = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * n * d:
        raise ProviderError(f"{path}: expected {n}x{d} float32 values, file size disagrees")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)


# FID protocol -----------------------------------------------------------------------


def _draw(source: ImageSource, count: int, rng: np.random.Generator, flags: list, label: str) -> np.ndarray:
    if callable(source):
        images = np.asarray(source(count, rng))
        if len(images) < count:
            raise RuntimeError(f"{label} source yielded {len(images)} of {count} images")
        return images[:count]
    pool = np.asarray(source)
    if len(pool) >= count:
        return pool[rng.permutation(len(pool))[:count]]
    flags.append(f"{label}_with_replacement")
    return pool[rng.integers(0, len(pool), size=count)]


def fid_protocol(
    real_source: ImageSource,
    fake_source: ImageSource,
    provider="pixel-downsample",
    samples: int = 10000,
    seed: int = 0,
    flags: list | None = None,
) -> float:
    """FID between ``samples`` embedded draws from each source.

    Pool sources smaller than ``samples`` are sampled with replacement and
    flagged. Both draws use a generator seeded identically, so passing the
    same pool twice compares a set against itself.
    """
    flags = [] if flags is None else flags
    prov = get_provider(provider).fit()
    real = _draw(real_source, samples, np.random.default_rng(seed), flags, "real")
    fake = _draw(fake_source, samples, np.random.default_rng(seed), flags, "fake")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        er = EmbeddingSet(prov.transform(real), prov.provider_id)
        ef = EmbeddingSet(prov.transform(fake), prov.provider_id)
    if er.d != ef.d:
        raise ProviderError(f"embedding dimensions disagree: {er.d} vs {ef.d}")
    return frechet_distance(*gaussian_stats(er.vectors), *gaussian_stats(ef.vectors), flags=flags)


@dataclass
class MetricReport:
    fid: float
    ms_ssim: float
    pair_count_fid: int
    pair_count_msssim: int
    provider_id: str
    seed: int
    model_id: str
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not -1.0 <= self.ms_ssim <= 1.0:
            raise ValueError(f"ms_ssim {self.ms_ssim} outside [-1, 1]")
        if self.fid < 0:
            raise ValueError("fid must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))
