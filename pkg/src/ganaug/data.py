"""Slice ingestion, preprocessing, classical augmentation and synthetic phantoms.

Raw slices are padded first and then min-max normalised per slice to [-1, 1],
so padding takes the raw background value. On disk, slices are binary PGM
(P5) files named ``<case>_<slice>.pgm``, optionally listed in a tab-separated
manifest of ``source_id, slice_index, relative path``.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

DEFAULT_SLICE_INDEX = 64
MANIFEST_NAME = "manifest.tsv"


class DataError(ValueError):
    """Bad input data or data parameters."""


@dataclass
class SliceRecord:
    pixels: np.ndarray
    source_id: str
    slice_index: int = 0
    original_extent: tuple[int, int] | None = None
    pad_applied: tuple[int, int] = (0, 0)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or px.shape[0] != 1:
            raise DataError(f"pixels must be [1,H,W], got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < -1.0 or px.max() > 1.0:
            raise DataError(f"record {self.source_id!r} has pixels outside [-1, 1]")
        self.pixels = px
        if self.original_extent is None:
            self.original_extent = px.shape[1:]
        h, w = px.shape[1:]
        oh, ow = self.original_extent
        if h < oh or w < ow or self.pad_applied[0] > h - oh or self.pad_applied[1] > w - ow:
            raise DataError("pad_applied is inconsistent with the extents")

    @property
    def resolution(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PhantomParams:
    """Knobs for the synthetic head-slice family.

    ``ellipse_count`` is the maximum number of interior tissue ellipses; each
    phantom draws between one and that many.
    """

    resolution: int = 32
    ellipse_count: int = 3
    tumor_intensity: float = 0.95
    noise_sigma: float = 0.03
    seed: int = 0
    supersample: int = 4

    def __post_init__(self):
        r = self.resolution
        if r < 4 or r & (r - 1):
            raise DataError(f"phantom resolution must be a power of two >= 4, got {r}")
        if not 0.0 < self.tumor_intensity <= 1.0:
            raise DataError("tumor_intensity must lie in (0, 1]")
        if self.ellipse_count < 1:
            raise DataError("ellipse_count must be at least 1")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be non-negative")
        if self.supersample < 1:
            raise DataError("supersample must be >= 1")


# preprocessing -----------------------------------------------------------------


def select_slice(volume, index: int = DEFAULT_SLICE_INDEX) -> np.ndarray:
    """Pick one axial slice from a [depth, H, W] stack.

    The default skips the near-empty slices at either end of a brain volume,
    which carry little anatomy.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DataError(f"expected a [depth,H,W] stack, got shape {volume.shape}")
    if not 0 <= index < volume.shape[0]:
        raise DataError(f"slice index {index} out of range for depth {volume.shape[0]}")
    return volume[index]


def zero_pad(image, target: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Centre ``image`` in a ``target`` square of zeros.

    Odd remainders go to the bottom/right. Returns the padded image and the
    (top, left) offsets.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    if h > target or w > target:
        raise DataError(f"image {h}x{w} is larger than the {target}x{target} target")
    top, left = (target - h) // 2, (target - w) // 2
    out = np.zeros((target, target), dtype=image.dtype)
    out[top : top + h, left : left + w] = image
    return out, (top, left)


def crop_back(image, original_extent: tuple[int, int], pad: tuple[int, int]) -> np.ndarray:
    image = np.asarray(image)
    (h, w), (top, left) = original_extent, pad
    return image[..., top : top + h, left : left + w]


def normalize_intensity(image) -> np.ndarray:
    """Per-slice affine map with min -> -1 and max -> +1."""
    x = np.asarray(image, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        warnings.warn("constant slice normalised to all -1", RuntimeWarning, stacklevel=2)
        return np.full_like(x, -1.0)
    out = (x - lo) * (2.0 / (hi - lo)) - 1.0
    return np.clip(out, -1.0, 1.0)


def preprocess_slice(raw, target: int | None = None) -> tuple[np.ndarray, tuple[int, int]]:
    raw = np.asarray(raw, dtype=np.float64)
    pad = (0, 0)
    if target is not None:
        raw, pad = zero_pad(raw, target)
    return normalize_intensity(raw), pad


# classical augmentation --------------------------------------------------------

FILL = -1.0
AUGMENT_OPS = ("hflip", "vflip", "rotate90k", "translate", "center_crop")


def _nearest_resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    ih, iw = image.shape[-2:]
    rows = np.minimum((np.arange(h) * ih) // h, ih - 1)
    cols = np.minimum((np.arange(w) * iw) // w, iw - 1)
    return image[..., rows[:, None], cols[None, :]]


def classic_augment(image, op: str, **kw) -> np.ndarray:
    """Deterministic flip / rotation / translation / crop on the last two axes.

    Args:
        image: array whose last two axes are (H, W).
        op: one of ``AUGMENT_OPS``.
        k: quarter turns for ``rotate90k``.
        dx, dy: integer shift for ``translate`` (right/down positive); vacated
            pixels take the value -1.
        f: kept fraction in (0, 1] for ``center_crop``; the crop is resized
            back with nearest-neighbour sampling.
    """
    x = np.asarray(image)
    if x.ndim < 2:
        raise DataError("image needs at least two axes")
    if op == "hflip":
        return x[..., :, ::-1].copy()
    if op == "vflip":
        return x[..., ::-1, :].copy()
    if op == "rotate90k":
        k = int(kw.get("k", 1))
        return np.rot90(x, k=k, axes=(-2, -1)).copy()
    if op == "translate":
        dx, dy = int(kw.get("dx", 0)), int(kw.get("dy", 0))
        h, w = x.shape[-2:]
        if abs(dx) >= w or abs(dy) >= h:
            raise DataError(f"shift ({dx},{dy}) moves the image out of frame")
        out = np.full_like(x, FILL)
        src_r = slice(max(0, -dy), h - max(0, dy))
        dst_r = slice(max(0, dy), h - max(0, -dy))
        src_c = slice(max(0, -dx), w - max(0, dx))
        dst_c = slice(max(0, dx), w - max(0, -dx))
        out[..., dst_r, dst_c] = x[..., src_r, src_c]
        return out
    if op == "center_crop":
        f = float(kw.get("f", 1.0))
        if not 0.0 < f <= 1.0:
            raise DataError(f"crop fraction must lie in (0, 1], got {f}")
        h, w = x.shape[-2:]
        ch, cw = max(1, round(h * f)), max(1, round(w * f))
        top, left = (h - ch) // 2, (w - cw) // 2
        return _nearest_resize(x[..., top : top + ch, left : left + cw], h, w)
    raise DataError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")


# phantoms ----------------------------------------------------------------------


def _ellipse_mask(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _phantom_raw(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    n = params.resolution * params.supersample
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((n, n))

    hy, hx = rng.uniform(0.72, 0.88), rng.uniform(0.62, 0.80)
    hcy, hcx = rng.uniform(-0.05, 0.05, size=2)
    htheta = rng.uniform(-0.15, 0.15)
    head = _ellipse_mask(yy, xx, hcy, hcx, hy, hx, htheta)
    img[head] = 0.5

    for _ in range(int(rng.integers(1, params.ellipse_count + 1))):
        ry, rx = rng.uniform(0.15, 0.45) * hy, rng.uniform(0.15, 0.45) * hx
        cy = hcy + rng.uniform(-0.4, 0.4) * hy
        cx = hcx + rng.uniform(-0.4, 0.4) * hx
        m = _ellipse_mask(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi)) & head
        img[m] = rng.uniform(0.2, 0.7)

    r = rng.uniform(0.08, 0.2)
    ty = hcy + rng.uniform(-0.5, 0.5) * hy
    tx = hcx + rng.uniform(-0.5, 0.5) * hx
    tumor = _ellipse_mask(yy, xx, ty, tx, r * rng.uniform(0.7, 1.3), r, rng.uniform(0, np.pi)) & head
    img[tumor] = params.tumor_intensity

    s = params.supersample
    img = img.reshape(params.resolution, s, params.resolution, s).mean(axis=(1, 3))
    if params.noise_sigma > 0:
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def phantom_generate(params: PhantomParams, count: int = 259) -> list[SliceRecord]:
    """Seeded synthetic FLAIR-like slices: head ellipse, tissue ellipses, one bright blob.

    Phantom ``i`` depends only on ``(params, i)``, so a prefix of a larger set
    equals a smaller set.
    """
    if count < 0:
        raise DataError("count must be non-negative")
    records = []
    for i in range(count):
        rng = np.random.default_rng([params.seed, i])
        px = normalize_intensity(_phantom_raw(params, rng))
        records.append(SliceRecord(px[None], f"phantom{i:04d}", 0, px.shape, (0, 0)))
    return records


# batching ----------------------------------------------------------------------


def stack_records(records: Sequence[SliceRecord]) -> np.ndarray:
    if not records:
        raise DataError("empty dataset")
    shapes = {r.pixels.shape for r in records}
    if len(shapes) != 1:
        raise DataError(f"records have mixed shapes {sorted(shapes)}")
    return np.stack([r.pixels for r in records])


def dataset_iterate(records, batch: int, shuffle_seed: int = 0, epochs: int | None = None) -> Iterator[np.ndarray]:
    """Epoch-wise shuffled [batch,1,H,W] minibatches; the partial tail batch is dropped."""
    images = records if isinstance(records, np.ndarray) else stack_records(records)
    n = images.shape[0]
    if n == 0:
        raise DataError("empty dataset")
    if not 1 <= batch <= n:
        raise DataError(f"batch {batch} must lie in [1, {n}]")
    rng = np.random.default_rng(shuffle_seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(n)
        for k in range(n // batch):
            yield images[order[k * batch : (k + 1) * batch]]
        epoch += 1


class BatchStream:
    """Resumable epoch-shuffled batch stream.

    Same batches as :func:`dataset_iterate`; ``position`` counts batches drawn
    so a stream can be rebuilt at a saved point.
    """

    def __init__(self, images: np.ndarray, batch: int, seed: int = 0, position: int = 0):
        n = images.shape[0]
        if n == 0:
            raise DataError("empty dataset")
        if not 1 <= batch <= n:
            raise DataError(f"batch {batch} must lie in [1, {n}]")
        self.images, self.batch, self.seed = images, batch, seed
        self.per_epoch = n // batch
        self.position = 0
        self._it = dataset_iterate(images, batch, seed)
        for _ in range(position):
            self.next()

    def next(self) -> np.ndarray:
        self.position += 1
        return next(self._it)


# PGM and manifests ---------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Binary P5 PGM -> (integer array [H,W], maxval)."""
    path = Path(path)
    buf = path.read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise DataError(f"{path}: invalid PGM header values")
    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise DataError(f"{path}: raster is shorter than {w}x{h}")
    raster = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return raster.astype(np.int64), maxval


def write_pgm(path, values, maxval: int = 65535) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"PGM needs a 2-D raster, got shape {values.shape}")
    if values.min() < 0 or values.max() > maxval:
        raise DataError("raster values exceed [0, maxval]")
    dtype = ">u2" if maxval > 255 else np.uint8
    h, w = values.shape
    data = b"P5\n%d %d\n%d\n" % (w, h, maxval) + values.astype(dtype).tobytes()
    Path(path).write_bytes(data)


def image_to_pgm_values(image, maxval: int = 65535) -> np.ndarray:
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 0.5 * maxval).astype(np.int64)


def pgm_values_to_image(values, maxval: int) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) / maxval * 2.0 - 1.0


def write_manifest(path, rows: Sequence[tuple[str, int, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for source_id, index, rel in rows:
            fh.write(f"{source_id}\t{index}\t{rel}\n")


def read_manifest(path) -> list[tuple[str, int, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{n}: expected 3 tab-separated fields")
            rows.append((parts[0], int(parts[1]), parts[2]))
    return rows


_NAME = re.compile(r"^(?P<case>.+)_(?P<slice>\d+)\.pgm$")


def save_records(records: Sequence[SliceRecord], out_dir) -> Path:
    """Write each record as a 16-bit PGM plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        rel = f"{rec.source_id}_{rec.slice_index:03d}.pgm"
        write_pgm(out / rel, image_to_pgm_values(rec.pixels[0]))
        rows.append((rec.source_id, rec.slice_index, rel))
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, rows)
    return manifest


def load_records(data_dir) -> list[SliceRecord]:
    """Load normalised slices from a directory (manifest order when present)."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        rows = read_manifest(manifest)
    else:
        rows = []
        for p in sorted(root.glob("*.pgm")):
            m = _NAME.match(p.name)
            rows.append((m["case"], int(m["slice"])) + (p.name,) if m else (p.stem, 0, p.name))
    if not rows:
        raise DataError(f"no PGM slices found in {root}")
    records = []
    for source_id, index, rel in rows:
        values, maxval = read_pgm(root / rel)
        records.append(SliceRecord(pgm_values_to_image(values, maxval)[None], source_id, index))
    return records


def read_volumes(in_dir) -> dict[str, np.ndarray]:
    """Group ``<case>_<slice>.pgm`` files into raw [depth,H,W] stacks ordered by slice number."""
    groups: dict[str, list[tuple[int, Path]]] = {}
    for p in sorted(Path(in_dir).glob("*.pgm")):
        m = _NAME.match(p.name)
        if not m:
            raise DataError(f"{p}: name does not follow <case>_<slice>.pgm")
        groups.setdefault(m["case"], []).append((int(m["slice"]), p))
    volumes = {}
    for case, items in sorted(groups.items()):
        items.sort()
        volumes[case] = np.stack([read_pgm(p)[0] for _, p in items])
    return volumes


def convert_directory(in_dir, out_dir, slice_index: int = DEFAULT_SLICE_INDEX, pad: int | None = None) -> Path:
    """Raw volumes -> one padded, normalised slice per case. Single-slice cases use that slice."""
    volumes = read_volumes(in_dir)
    if not volumes:
        raise DataError(f"no PGM slices found in {in_dir}")
    records = []
    for case, vol in volumes.items():
        idx = slice_index if vol.shape[0] > 1 else 0
        raw = select_slice(vol, idx)
        px, offset = preprocess_slice(raw, pad)
        records.append(SliceRecord(px[None], case, idx, raw.shape, offset))
    return save_records(records, out_dir)


def resize_pow2(images: np.ndarray, resolution: int) -> np.ndarray:
    """Average-pool a square batch down (power-of-two ratio) to ``resolution``."""
    images = np.asarray(images, dtype=np.float64)
    r = images.shape[-1]
    if images.shape[-2] != r:
        raise DataError("images must be square")
    if r < resolution or r % resolution or (r // resolution) & (r // resolution - 1):
        raise DataError(f"cannot reduce {r}x{r} to {resolution}x{resolution} by halving")
    while images.shape[-1] > resolution:
        h = images.shape[-1] // 2
        images = images.reshape(images.shape[:-2] + (h, 2, h, 2)).mean(axis=(-3, -1))
    return images


# sklearn-style transformers ----------------------------------------------------------


class SlicePreprocessor(TransformerMixin, BaseEstimator):
    """Stateless pad-then-normalise transform over [N,H,W] raw slices."""

    def __init__(self, target: int | None = 256):
        self.target = target

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 2:
            X = X[None]
        return np.stack([preprocess_slice(x, self.target)[0] for x in X])


class ClassicAugmenter(TransformerMixin, BaseEstimator):
    """Applies a fixed :func:`classic_augment` op to every image."""

    def __init__(self, op: str = "hflip", k: int = 1, dx: int = 0, dy: int = 0, f: float = 1.0):
        self.op = op
        self.k = k
        self.dx = dx
        self.dy = dy
        self.f = f

    def fit(self, X=None, y=None):
        if self.op not in AUGMENT_OPS:
            raise DataError(f"unknown augmentation {self.op!r}")
        return self

    def transform(self, X) -> np.ndarray:
        return classic_augment(X, self.op, k=self.k, dx=self.dx, dy=self.dy, f=self.f)
