"""Progressive schedule, Adam, alternating GAN updates, checkpoints and run management.

A run is one :class:`TrainingRun`: it owns the networks, optimiser moments,
random streams and batch position, and can be saved and restored exactly.
Random streams are derived from the root seed with fixed labels, so turning
the SSIM term on or off leaves latents, penalty mixes and batch order untouched.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import crcmod
import numpy as np

from . import data as datamod
from . import losses as L
from . import nn
from . import tensor as T
from .metrics import ssim_per_sample
from .tensor import NonFiniteError

MODELS = ("pggan", "pggan-ssim", "alpha-gan-gp")
SSIM_MODES = ("pairwise", "reconstruction")
CHECKPOINT_MAGIC = b"PGLB"
CHECKPOINT_VERSION = 1
META_KEY = "__meta__"

# CRC-64/XZ (ECMA-182 polynomial, reflected)
crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)


class ConfigError(ValueError):
    """Invalid run configuration; the message names the field."""


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


# configuration -------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything that defines a training run.

    Defaults follow the reference experiment (batch 32, lr 0.001, 12000
    iterations, all loss weights 10, latent 512). ``channel_cap`` and
    ``precision`` are desk-scale knobs.
    """

    model: str = "pggan"
    latent_dim: int = 512
    final_resolution: int = 256
    total_iterations: int = 12000
    batch_size: int = 32
    learning_rate: float = 0.001
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda_gp: float = 10.0
    lambda_ssim: float = 10.0
    seed: int = 0
    data_dir: str | None = None
    out_dir: str = "run"
    phantom: bool = False
    phantom_count: int = 259
    phantom_seed: int = 0
    channel_cap: int | None = 32
    precision: int = 32
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    n_critic: int = 1
    checkpoint_every: int = 500
    ssim_mode: str = "pairwise"
    strict_paper_losses: bool = False

    # fields that do not change the numbers a run produces
    NON_IDENTITY = ("out_dir", "checkpoint_every")

    def validate(self, require_data: bool = True) -> "RunConfig":
        def bad(name, why):
            raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        if self.model not in MODELS:
            bad("model", f"must be one of {MODELS}")
        for name in ("latent_dim", "total_iterations", "batch_size", "n_critic", "checkpoint_every", "phantom_count"):
            if not isinstance(getattr(self, name), (int, np.integer)) or getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        r = self.final_resolution
        if not isinstance(r, (int, np.integer)) or r < 4 or r & (r - 1):
            bad("final_resolution", "must be a power of two >= 4")
        if not self.learning_rate > 0:
            bad("learning_rate", "must be positive")
        for name in ("lambda1", "lambda2", "lambda_gp", "lambda_ssim"):
            if getattr(self, name) < 0:
                bad(name, "must be non-negative")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            bad("adam_beta1", "betas must lie in [0, 1)")
        if self.precision not in (32, 64):
            bad("precision", "must be 32 or 64")
        if self.channel_cap is not None and self.channel_cap < 1:
            bad("channel_cap", "must be positive")
        if self.ssim_mode not in SSIM_MODES:
            bad("ssim_mode", f"must be one of {SSIM_MODES}")
        if self.strict_paper_losses:
            bad("strict_paper_losses", "the literal printed loss forms cannot train; inspect them with losses.printed_wgan_losses")
        if require_data and not self.phantom and not self.data_dir:
            bad("data_dir", "required unless phantom mode is enabled")
        if self.batch_size < 2 and self.model == "pggan-ssim" and self.ssim_mode == "pairwise":
            bad("batch_size", "the pairwise SSIM term needs at least two images")
        return self

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda1, self.lambda2, self.lambda_gp, self.lambda_ssim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def identity(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in self.NON_IDENTITY}

    def hash(self) -> bytes:
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True).encode()).digest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration key")
        return cls(**d)


# schedule --------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    resolution: int
    kind: str  # "fade" or "stabilize"
    iters: int


@dataclass
class PhaseState:
    resolution: int
    phase: str
    iter_in_phase: int
    global_iter: int
    fade_alpha: float


@dataclass
class TrainSchedule:
    start_resolution: int
    final_resolution: int
    phases: list[Phase]
    batch_size: int = 32
    learning_rate: float = 0.001
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    seed: int = 0

    @property
    def total_iterations(self) -> int:
        return sum(p.iters for p in self.phases)

    @property
    def iterations_per_phase(self) -> dict[int, tuple[int, int]]:
        out: dict[int, list[int]] = {}
        for p in self.phases:
            slot = out.setdefault(p.resolution, [0, 0])
            slot[0 if p.kind == "fade" else 1] += p.iters
        return {r: tuple(v) for r, v in out.items()}

    @property
    def resolutions(self) -> list[int]:
        return list(self.iterations_per_phase)

    def state_at(self, step: int) -> PhaseState:
        """Phase state for 1-based global step ``step``."""
        if not 1 <= step <= self.total_iterations:
            raise IndexError(f"step {step} outside 1..{self.total_iterations}")
        done = 0
        for p in self.phases:
            if step <= done + p.iters:
                k = step - done
                alpha = min(1.0, k / p.iters) if p.kind == "fade" else 1.0
                return PhaseState(p.resolution, p.kind, k, step, alpha)
            done += p.iters
        raise AssertionError("unreachable")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phases"] = [dataclasses.asdict(p) for p in self.phases]
        return d


def schedule_plan(config: RunConfig, start_resolution: int = 4) -> TrainSchedule:
    """Even split of the budget across resolutions.

    The start resolution only stabilises; every later one fades for half its
    share and stabilises for the rest. The division remainder goes to the
    final stabilise phase. The alpha-GAN model trains one fixed-resolution phase.
    """
    total, final = config.total_iterations, config.final_resolution
    if config.model == "alpha-gan-gp":
        phases = [Phase(final, "stabilize", total)]
    else:
        if final < start_resolution:
            raise ConfigError(f"final_resolution: below the start resolution {start_resolution}")
        ladder = [start_resolution]
        while ladder[-1] < final:
            ladder.append(ladder[-1] * 2)
        share = total // len(ladder)
        phases = []
        for r in ladder:
            if r == start_resolution:
                phases.append(Phase(r, "stabilize", share))
            else:
                phases.append(Phase(r, "fade", share // 2))
                phases.append(Phase(r, "stabilize", share - share // 2))
        last = phases[-1]
        phases[-1] = Phase(last.resolution, last.kind, last.iters + total - share * len(ladder))
    short = [p for p in phases if p.iters < 2]
    if short:
        raise ConfigError(
            f"total_iterations: {total} leaves the {short[0].kind} phase at {short[0].resolution} "
            f"with {short[0].iters} iteration(s); each phase needs at least 2"
        )
    return TrainSchedule(
        start_resolution if config.model != "alpha-gan-gp" else final,
        final,
        phases,
        config.batch_size,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.seed,
    )


# Adam ------------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moments and step counts.

    Counts are kept per parameter so blocks added at a grow event start their
    own bias correction from one.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)


def adam_step(
    params: dict[str, T.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.0, 0.99),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` listed in ``grads``.

    All gradients are checked first; a non-finite one aborts the whole step
    with nothing modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise T.ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    b1, b2 = betas
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        t = state.steps.get(name, 0) + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        state.m[name], state.v[name], state.steps[name] = m.astype(p.data.dtype), v.astype(p.data.dtype), t


def _update(net: nn.NetworkState, loss: T.Tensor, opt: AdamState, hp: "Hyper") -> None:
    names = list(net.active_parameters())
    gs = T.grad(loss, [net.parameters[n] for n in names], allow_unused=True)
    grads = {n: g.data for n, g in zip(names, gs) if g is not None}
    adam_step(net.parameters, grads, opt, hp.lr, hp.betas, hp.eps)


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.001
    betas: tuple[float, float] = (0.0, 0.99)
    eps: float = 1e-8
    n_critic: int = 1
    ssim_mode: str = "pairwise"

    @classmethod
    def from_config(cls, c: RunConfig) -> "Hyper":
        return cls(c.learning_rate, (c.adam_beta1, c.adam_beta2), c.adam_eps, c.n_critic, c.ssim_mode)


# random streams --------------------------------------------------------------------


def child_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(label.encode())])


@dataclass
class Streams:
    latent: np.random.Generator
    gp: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        return cls(child_rng(seed, "latent"), child_rng(seed, "gradient-penalty"))

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("latent", "gp")}

    def restore(self, states: dict) -> None:
        for k, s in states.items():
            getattr(self, k).bit_generator.state = s


def shuffle_seed(seed: int) -> int:
    return int(child_rng(seed, "shuffle").integers(2**63))


def _latents(rng: np.random.Generator, n: int, dim: int) -> T.Tensor:
    return T.Tensor(rng.standard_normal((n, dim)))


# training steps ----------------------------------------------------------------------


def real_pyramid(batch: np.ndarray, phase: PhaseState) -> np.ndarray:
    """Average-pool real images to the phase resolution, blending with the coarser level during fade."""
    batch = np.asarray(batch)
    r = phase.resolution
    if batch.ndim != 4 or batch.shape[2] != batch.shape[3]:
        raise T.ShapeError(f"real batch must be [N,C,R,R], got {batch.shape}")
    if batch.shape[-1] < r or batch.shape[-1] % r:
        raise T.ShapeError(f"real batch at {batch.shape[-1]} cannot feed resolution {r}")
    x = datamod.resize_pow2(batch, r)
    if phase.phase == "fade" and phase.fade_alpha < 1.0 and r > 4:
        n, c = x.shape[:2]
        low = x.reshape(n, c, r // 2, 2, r // 2, 2).mean(axis=(3, 5))
        low = low.repeat(2, axis=2).repeat(2, axis=3)
        x = phase.fade_alpha * x + (1.0 - phase.fade_alpha) * low
    return x


def _finite(report: dict) -> dict:
    for k, v in report.items():
        if isinstance(v, float) and not np.isfinite(v):
            raise NonFiniteError(f"{k} became non-finite ({v})")
    return report


def _ssim_term(fake: T.Tensor, real: T.Tensor, weights: L.LossWeights, mode: str) -> T.Tensor | None:
    if min(fake.shape[-2:]) < 11:
        return None
    if mode == "pairwise":
        return L.ssim_diversity_loss(fake, weights)
    unit = lambda t: T.add_scalar(T.scale(t, 0.5), 0.5)  # noqa: E731
    sim = T.reduce_mean(ssim_per_sample(unit(fake), unit(real)))
    return T.scale(T.sub(T.Tensor(1.0), sim), weights.lambda_ssim)


def train_step_pggan(
    G: nn.NetworkState,
    D: nn.NetworkState,
    batch: np.ndarray,
    phase: PhaseState,
    weights: L.LossWeights,
    use_ssim: bool,
    rng: Streams,
    opt_g: AdamState,
    opt_d: AdamState,
    hp: Hyper = Hyper(),
) -> dict:
    """One critic update then one generator update; returns the step report.

    ``G`` and ``D`` must already sit at ``phase.resolution``; their fade alpha
    is set from the phase.
    """
    if G.resolution_active != phase.resolution or D.resolution_active != phase.resolution:
        raise T.ShapeError(
            f"networks at {G.resolution_active}/{D.resolution_active}, phase at {phase.resolution}"
        )
    G.fade_alpha = D.fade_alpha = phase.fade_alpha
    real = T.Tensor(real_pyramid(batch, phase))
    n, zdim = real.shape[0], G.spec.latent_dim

    for _ in range(hp.n_critic):
        with T.no_grad():
            fake = G(_latents(rng.latent, n, zdim))
        d_loss, gp = L.wgan_d_loss(D, real, fake, weights, rng.gp, return_penalty=True)
        _update(D, d_loss, opt_d, hp)

    fake = G(_latents(rng.latent, n, zdim))
    g_loss = L.wgan_g_loss(D, fake)
    report = {"d_loss": d_loss.item(), "gp_value": gp.item(), "g_loss": g_loss.item()}
    total = g_loss
    if use_ssim:
        term = _ssim_term(fake, real, weights, hp.ssim_mode)
        report["ssim_term"] = None if term is None else term.item()
        if term is not None:
            total = T.add(total, term)
    _update(G, total, opt_g, hp)
    return _finite(report)


def train_step_alpha_gan(
    E: nn.NetworkState,
    G: nn.NetworkState,
    D_D: nn.NetworkState,
    D_L: nn.NetworkState,
    batch: np.ndarray,
    weights: L.LossWeights,
    rng: Streams,
    opts: dict[str, AdamState],
    hp: Hyper = Hyper(),
) -> dict:
    """Updates D_D, then D_L, then E and G, each from its own objective.

    Encoder codes and images are recomputed after the critic updates so that
    the encoder and generator gradients see the updated critics.
    """
    real = T.Tensor(batch)
    if real.shape[-1] != G.resolution_active:
        raise T.ShapeError(f"batch at {real.shape[-1]} but networks at {G.resolution_active}")
    n, zdim = real.shape[0], G.spec.latent_dim
    z = _latents(rng.latent, n, zdim)

    with T.no_grad():
        z_hat = E(real)
        recon, fake = G(z_hat), G(z)
    dd = L.alpha_discriminator_loss(D_D, real, recon, fake, weights, rng.gp)
    _update(D_D, dd, opts["D_D"], hp)
    dl = L.alpha_latent_discriminator_loss(D_L, z_hat, z, weights, rng.gp)
    _update(D_L, dl, opts["D_L"], hp)

    z_hat = E(real)
    recon, fake = G(z_hat), G(z)
    g_loss = L.alpha_generator_loss(D_D, real, recon, fake, weights)
    e_loss = L.alpha_encoder_loss(D_L, z_hat)
    l1 = L.l1_reconstruction(real, recon).item()
    _update(G, g_loss, opts["G"], hp)
    _update(E, e_loss, opts["E"], hp)
    return _finite(
        {
            "generator": g_loss.item(),
            "encoder": e_loss.item(),
            "discriminator": dd.item(),
            "latent_discriminator": dl.item(),
            "l1": l1,
        }
    )


# sampling --------------------------------------------------------------------------


def generate_samples(G: nn.NetworkState, count: int, seed: int = 0, chunk: int = 64) -> np.ndarray:
    """``count`` images [count,1,R,R] in [-1, 1] from seeded unit-normal latents."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, G.spec.latent_dim))
    out = []
    with T.no_grad():
        for k in range(0, count, chunk):
            out.append(G(T.Tensor(z[k : k + chunk])).data)
    if not out:
        r = G.resolution_active
        return np.zeros((0, G.spec.image_channels, r, r))
    return np.concatenate(out).astype(np.float64)


def mosaic(images: np.ndarray, grid: int = 8) -> np.ndarray:
    """Tile up to grid*grid images into one square raster; blank tiles are -1."""
    images = np.asarray(images)[:, 0]
    r = images.shape[-1]
    canvas = np.full((grid * r, grid * r), -1.0)
    for k, img in enumerate(images[: grid * grid]):
        i, j = divmod(k, grid)
        canvas[i * r : (i + 1) * r, j * r : (j + 1) * r] = img
    return canvas


# checkpoint format -------------------------------------------------------------------

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODES = {(dt.kind, dt.itemsize): code for code, dt in _DTYPES.items()}


def encode_checkpoint(config_hash: bytes, tensors: dict[str, np.ndarray]) -> bytes:
    """Serialise a tensor table; names are written in sorted order."""
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), config_hash]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get((arr.dtype.kind, arr.dtype.itemsize))
        if code is None:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def decode_checkpoint(buf: bytes) -> tuple[bytes, dict[str, np.ndarray]]:
    if len(buf) < 48 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic); version mismatch")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if crc64(body) != stored:
        raise CheckpointError("checksum mismatch; the file is corrupted")
    config_hash = body[8:40]
    pos, tensors = 40, {}
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + n].decode()
            pos += 4 + n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CheckpointError(f"{name}: data runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed tensor table: {exc}") from exc
    return config_hash, tensors


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# run management ----------------------------------------------------------------------

ROLE_OF = {"G": "generator", "D": "discriminator", "E": "encoder", "D_D": "discriminator", "D_L": "latent-discriminator"}


def load_training_images(config: RunConfig) -> np.ndarray:
    """[N,1,R,R] training images at the final resolution."""
    if config.phantom:
        params = datamod.PhantomParams(resolution=config.final_resolution, seed=config.phantom_seed)
        images = datamod.stack_records(datamod.phantom_generate(params, config.phantom_count))
    else:
        images = datamod.stack_records(datamod.load_records(config.data_dir))
        images = datamod.resize_pow2(images, config.final_resolution)
    if images.shape[0] < config.batch_size:
        raise datamod.DataError(f"{images.shape[0]} images cannot fill a batch of {config.batch_size}")
    return images


def network_spec(config: RunConfig, role: str) -> nn.NetworkSpec:
    return nn.NetworkSpec(
        role,
        latent_dim=config.latent_dim,
        max_resolution=config.final_resolution,
        channel_cap=config.channel_cap,
    )


class TrainingRun:
    """Mutable state of one run, advanced one step at a time.

    Args:
        config: validated run configuration.
        images: training images; loaded from the config when omitted.
    """

    def __init__(self, config: RunConfig, images: np.ndarray | None = None):
        self.config = config.validate(require_data=images is None)
        self.schedule = schedule_plan(config)
        self.hyper = Hyper.from_config(config)
        self.weights = config.weights
        self.images = load_training_images(config) if images is None else np.asarray(images, dtype=np.float64)
        self.global_iter = 0
        self.streams = Streams.from_seed(config.seed)
        self.stream = datamod.BatchStream(self.images, config.batch_size, shuffle_seed(config.seed))
        with T.precision(config.precision):
            self.nets = self._build_networks()
        self.opts = {k: AdamState() for k in self.nets}

    @property
    def alpha_gan(self) -> bool:
        return self.config.model == "alpha-gan-gp"

    def _build_networks(self) -> dict[str, nn.NetworkState]:
        c, seed = self.config, self.config.seed
        if self.alpha_gan:
            r = c.final_resolution
            return {
                "E": nn.build_encoder(network_spec(c, "encoder"), child_seed(seed, "E"), r),
                "G": nn.build_generator(network_spec(c, "generator"), child_seed(seed, "G"), r),
                "D_D": nn.build_discriminator(network_spec(c, "discriminator"), child_seed(seed, "D_D"), r),
                "D_L": nn.build_latent_discriminator(network_spec(c, "latent-discriminator"), child_seed(seed, "D_L")),
            }
        start = self.schedule.start_resolution
        return {
            "G": nn.build_generator(network_spec(c, "generator"), child_seed(seed, "G"), start),
            "D": nn.build_discriminator(network_spec(c, "discriminator"), child_seed(seed, "D"), start),
        }

    @property
    def generator(self) -> nn.NetworkState:
        return self.nets["G"]

    @property
    def done(self) -> bool:
        return self.global_iter >= self.schedule.total_iterations

    def phase(self) -> PhaseState:
        return self.schedule.state_at(min(self.global_iter, self.schedule.total_iterations - 1) + 1)

    def step(self) -> dict:
        if self.done:
            raise RuntimeError("schedule already complete")
        phase = self.schedule.state_at(self.global_iter + 1)
        batch = self.stream.next()
        with T.precision(self.config.precision):
            if self.alpha_gan:
                n = self.nets
                report = train_step_alpha_gan(
                    n["E"], n["G"], n["D_D"], n["D_L"], batch, self.weights, self.streams, self.opts, self.hyper
                )
            else:
                for key in ("G", "D"):
                    while self.nets[key].resolution_active < phase.resolution:
                        self.nets[key] = nn.grow(self.nets[key], self.nets[key].resolution_active * 2)
                report = train_step_pggan(
                    self.nets["G"],
                    self.nets["D"],
                    batch,
                    phase,
                    self.weights,
                    self.config.model == "pggan-ssim",
                    self.streams,
                    self.opts["G"],
                    self.opts["D"],
                    self.hyper,
                )
        self.global_iter += 1
        return {
            "iter": self.global_iter,
            "resolution": phase.resolution,
            "phase": phase.phase,
            "alpha": phase.fade_alpha,
            **report,
        }

    # checkpointing

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        nets_meta = {}
        for key, net in self.nets.items():
            for name, p in net.parameters.items():
                tensors[f"{key}/{name}"] = p.data
            opt = self.opts[key]
            for name in opt.m:
                tensors[f"adam.m.{key}/{name}"] = opt.m[name]
                tensors[f"adam.v.{key}/{name}"] = opt.v[name]
            nets_meta[key] = {
                "resolution_active": net.resolution_active,
                "fade_alpha": net.fade_alpha,
                "seed": net.seed,
                "adam_steps": dict(sorted(opt.steps.items())),
            }
        meta = {
            "config": self.config.identity(),
            "schedule": self.schedule.to_dict(),
            "global_iter": self.global_iter,
            "phase": dataclasses.asdict(self.phase()),
            "rng": self.streams.state(),
            "data_position": self.stream.position,
            "networks": nets_meta,
        }
        tensors[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        return tensors

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self.config.hash(), self.state_tensors())

    def save(self, path) -> Path:
        atomic_write(path, self.to_bytes())
        return Path(path)

    @classmethod
    def from_bytes(cls, buf: bytes, images: np.ndarray | None = None, **overrides) -> "TrainingRun":
        config_hash, tensors = decode_checkpoint(buf)
        if META_KEY not in tensors:
            raise CheckpointError("checkpoint has no metadata record")
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode())
        config = RunConfig.from_dict({**meta["config"], **overrides})
        if RunConfig.from_dict(meta["config"]).hash() != config_hash:
            raise CheckpointError("stored configuration does not match the header hash")
        run = cls.__new__(cls)
        run.config = config.validate(require_data=images is None)
        run.schedule = schedule_plan(config)
        if run.schedule.to_dict() != meta["schedule"]:
            raise CheckpointError("schedule in the checkpoint differs from the configuration's plan")
        run.hyper = Hyper.from_config(config)
        run.weights = config.weights
        run.images = load_training_images(config) if images is None else np.asarray(images, dtype=np.float64)
        run.global_iter = meta["global_iter"]
        run.streams = Streams.from_seed(config.seed)
        run.streams.restore(meta["rng"])
        run.stream = datamod.BatchStream(run.images, config.batch_size, shuffle_seed(config.seed), meta["data_position"])
        run.nets, run.opts = {}, {}
        with T.precision(config.precision):
            for key, nm in meta["networks"].items():
                prefix = f"{key}/"
                params = {k[len(prefix) :]: T.Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith(prefix)}
                spec = network_spec(config, ROLE_OF[key])
                run.nets[key] = nn.NetworkState(spec, params, nm["resolution_active"], nm["fade_alpha"], nm["seed"])
                opt = AdamState(steps=dict(nm["adam_steps"]))
                for name in opt.steps:
                    opt.m[name] = tensors[f"adam.m.{key}/{name}"]
                    opt.v[name] = tensors[f"adam.v.{key}/{name}"]
                run.opts[key] = opt
        return run

    @classmethod
    def load(cls, path, images: np.ndarray | None = None, **overrides) -> "TrainingRun":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"{path}: {exc.strerror}") from exc
        return cls.from_bytes(buf, images, **overrides)


def load_generator(path) -> tuple[nn.NetworkState, RunConfig]:
    """Generator state and run configuration from a checkpoint, without rebuilding the run."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    _, tensors = decode_checkpoint(buf)
    meta = json.loads(tensors.pop(META_KEY).tobytes().decode())
    config = RunConfig.from_dict(meta["config"])
    nm = meta["networks"]["G"]
    with T.precision(config.precision):
        params = {k[2:]: T.Tensor(v) for k, v in tensors.items() if k.startswith("G/")}
        G = nn.NetworkState(network_spec(config, "generator"), params, nm["resolution_active"], nm["fade_alpha"], nm["seed"])
    return G, config


def checkpoint_model_id(path, config: RunConfig) -> str:
    return f"{config.model}-z{config.latent_dim}-{Path(path).stem}-{config.hash().hex()[:12]}"


def child_seed(seed: int, label: str) -> int:
    return int(child_rng(seed, label).integers(2**31))


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.pglb"


def run_training(
    run: TrainingRun,
    out_dir,
    checkpoint_every: int | None = None,
    until: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> Path:
    """Advance ``run`` to the end of its schedule (or ``until``), writing the run directory.

    Layout: ``checkpoints/``, ``samples/`` (8x8 PGM mosaic per checkpoint),
    ``logs/train.jsonl`` and ``reports/``. Returns the last checkpoint written.
    A non-finite loss propagates as :class:`NonFiniteError`; checkpoints already
    on disk are left in place.
    """
    out = Path(out_dir)
    for sub in ("checkpoints", "samples", "logs", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    every = checkpoint_every or run.config.checkpoint_every
    stop = run.schedule.total_iterations if until is None else min(until, run.schedule.total_iterations)
    last = None
    with open(out / "logs" / "train.jsonl", "a", encoding="utf-8") as log:
        while run.global_iter < stop:
            report = run.step()
            log.write(json.dumps(report, sort_keys=True) + "\n")
            log.flush()
            if on_step:
                on_step(report)
            if run.global_iter % every == 0 or run.global_iter == stop:
                last = write_checkpoint(run, out)
    return last if last is not None else write_checkpoint(run, out)


def write_checkpoint(run: TrainingRun, out: Path) -> Path:
    path = run.save(out / "checkpoints" / checkpoint_name(run.global_iter))
    with T.precision(run.config.precision):
        samples = generate_samples(run.generator, 64, seed=child_seed(run.config.seed, "preview"))
    datamod.write_pgm(out / "samples" / f"samples_{run.global_iter:06d}.pgm", datamod.image_to_pgm_values(mosaic(samples)))
    return path
