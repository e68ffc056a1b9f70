"""Progressive-growing layers and the four network builders.

Networks are plain parameter maps (:class:`NetworkState`) plus an ordered
list of :class:`LayerSpec` per block; forward passes interpret those lists.
Weights are drawn from a unit normal and scaled at runtime by the He constant
(equalized learning rate), so every block's initial values depend only on the
root seed and the block name. Growing a network therefore yields the same
parameters as building it at the larger resolution directly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ROLES = ("generator", "discriminator", "encoder", "latent-discriminator")
LAYER_KINDS = (
    "equalized-conv",
    "equalized-dense",
    "pixelnorm",
    "minibatch-stddev",
    "upsample",
    "downsample",
    "leaky-relu",
    "reshape",
    "to-image",
    "from-image",
    "fade-in",
)
SLOPE = 0.2


class SpecError(ValueError):
    """A network spec or growth request is invalid."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("equalized-conv", "equalized-dense", "to-image", "from-image")


@dataclass
class NetworkSpec:
    """Architecture description shared by all four roles.

    ``channel_cap`` bounds every feature width for desk-scale runs; the
    uncapped schedule is ``min(fmap_max, fmap_base // R)``.
    """

    role: str
    latent_dim: int = 512
    max_resolution: int = 256
    start_resolution: int = 4
    image_channels: int = 1
    fmap_base: int = 4096
    fmap_max: int = 256
    channel_cap: int | None = None
    hidden_dim: int | None = None

    def validate(self) -> "NetworkSpec":
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}")
        if self.latent_dim <= 0:
            raise SpecError("latent_dim must be positive")
        for name in ("max_resolution", "start_resolution"):
            r = getattr(self, name)
            if r < 4 or r & (r - 1):
                raise SpecError(f"{name} must be a power of two >= 4, got {r}")
        if self.start_resolution > self.max_resolution:
            raise SpecError("start_resolution exceeds max_resolution")
        if self.image_channels != 1:
            raise SpecError("only single-channel images are supported")
        if self.channel_cap is not None and self.channel_cap < 1:
            raise SpecError("channel_cap must be positive")
        return self

    def channels(self, resolution: int) -> int:
        width = min(self.fmap_max, self.fmap_base // resolution)
        if self.channel_cap is not None:
            width = min(width, self.channel_cap)
        return max(1, width)

    @property
    def latent_hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else min(self.latent_dim, 256)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class NetworkState:
    spec: NetworkSpec
    parameters: dict[str, Tensor]
    resolution_active: int
    fade_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fade_alpha <= 1.0:
            raise SpecError(f"fade_alpha must lie in [0, 1], got {self.fade_alpha}")

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    @property
    def role(self) -> str:
        return self.spec.role

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def active_parameters(self) -> dict[str, Tensor]:
        """Parameters that influence the output at the current resolution and alpha."""
        blocks = set(_active_blocks(self))
        return {k: v for k, v in self.parameters.items() if k.split(".")[0] in blocks}

    def clone(self) -> "NetworkState":
        params = {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.parameters.items()}
        return NetworkState(self.spec, params, self.resolution_active, self.fade_alpha, self.seed)


# layer primitives -----------------------------------------------------------


def he_constant(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def fan_in(weight_shape) -> int:
    if len(weight_shape) == 2:
        return int(weight_shape[0])
    return int(np.prod(weight_shape[1:]))


def _add_bias(y: Tensor, bias: Tensor) -> Tensor:
    if y.ndim == 2:
        return T.add(y, T.broadcast_to(T.reshape(bias, (1, -1)), y.shape))
    return T.add(y, T.broadcast_to(T.reshape(bias, (1, -1, 1, 1)), y.shape))


def equalized_forward(layer: LayerSpec, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense or conv layer whose unit-normal weight is scaled by sqrt(2/fan_in) at runtime."""
    c = he_constant(fan_in(weight.shape))
    w = T.scale(weight, c)
    if layer.kind == "equalized-dense":
        if x.ndim != 2 or x.shape[1] != weight.shape[0]:
            raise ShapeError(f"dense layer {layer.name} expects [N,{weight.shape[0]}], got {x.shape}")
        return _add_bias(T.matmul(x, w), bias)
    if layer.kind in ("equalized-conv", "to-image", "from-image"):
        k = weight.shape[2]
        return _add_bias(T.conv2d(x, w, 1, k // 2), bias)
    raise SpecError(f"{layer.kind} is not an equalized layer")


def pixelnorm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each pixel's feature vector by its root mean square over channels."""
    if x.ndim < 2 or x.shape[1] < 1:
        raise ShapeError("pixelnorm needs a channel axis")
    ms = T.reduce_mean(T.square(x), axis=1, keepdims=True)
    return T.div(x, T.broadcast_to(T.sqrt(T.add_scalar(ms, eps)), x.shape))


def minibatch_stddev(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Append the batch-averaged feature standard deviation as one constant map.

    Each (channel, pixel) population deviation is computed as
    ``var / sqrt(var + eps)``: exactly zero when every sample agrees, within
    ``eps / (2 var)`` relative of ``sqrt(var)`` otherwise, and with a finite
    gradient everywhere. ``eps=0`` gives the plain square root.
    """
    n, c, h, w = x.shape
    if n < 2:
        raise ShapeError("minibatch_stddev needs at least two samples")
    # shifting by the first sample keeps an all-identical batch exactly zero
    first = T.broadcast_to(T.narrow(x, 0, 0, 1), x.shape)
    shifted = T.sub(x, first)
    mu = T.reduce_mean(shifted, axis=0, keepdims=True)
    centered = T.sub(shifted, T.broadcast_to(mu, x.shape))
    var = T.reduce_mean(T.square(centered), axis=0)
    std = T.div(var, T.sqrt(T.add_scalar(var, eps))) if eps else T.sqrt(var)
    stat = T.reshape(T.reduce_mean(std), (1, 1, 1, 1))
    return T.concat([x, T.broadcast_to(stat, (n, 1, h, w))], axis=1)


def fade_in_blend(old_path: Tensor, new_path: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if old_path.shape != new_path.shape:
        raise ShapeError(f"fade paths differ in shape: {old_path.shape} vs {new_path.shape}")
    return T.add(T.scale(old_path, 1.0 - alpha), T.scale(new_path, alpha))


def _apply(layer: LayerSpec, x: Tensor, params: dict[str, Tensor], block: str) -> Tensor:
    kind = layer.kind
    if layer.has_params:
        prefix = f"{block}.{layer.name}"
        return equalized_forward(layer, x, params[prefix + ".weight"], params[prefix + ".bias"])
    if kind == "leaky-relu":
        return T.leaky_relu(x, layer.hyper.get("slope", SLOPE))
    if kind == "pixelnorm":
        return pixelnorm(x)
    if kind == "minibatch-stddev":
        return minibatch_stddev(x)
    if kind == "upsample":
        return T.upsample_nearest2x(x)
    if kind == "downsample":
        return T.avgpool2x(x)
    if kind == "reshape":
        return T.reshape(x, (x.shape[0],) + tuple(layer.hyper["shape"]))
    raise SpecError(f"layer kind {kind!r} cannot be applied directly")


def run_block(layers: list[LayerSpec], x: Tensor, params: dict[str, Tensor], block: str) -> Tensor:
    for layer in layers:
        x = _apply(layer, x, params, block)
    return x


# block layouts ---------------------------------------------------------------


def _conv(name, cin, cout, k=3):
    return LayerSpec("equalized-conv", name, {"in": cin, "out": cout, "kernel": k})


def _dense(name, fin, fout):
    return LayerSpec("equalized-dense", name, {"in": fin, "out": fout})


_LRELU = LayerSpec("leaky-relu", hyper={"slope": SLOPE})
_PN = LayerSpec("pixelnorm")


def generator_block(spec: NetworkSpec, res: int) -> list[LayerSpec]:
    c = spec.channels(res)
    if res == 4:
        return [
            _PN,
            _dense("dense", spec.latent_dim, c * 16),
            LayerSpec("reshape", hyper={"shape": (c, 4, 4)}),
            _LRELU,
            _PN,
            _conv("conv", c, c),
            _LRELU,
            _PN,
        ]
    cin = spec.channels(res // 2)
    return [
        LayerSpec("upsample"),
        _conv("conv0", cin, c),
        _LRELU,
        _PN,
        _conv("conv1", c, c),
        _LRELU,
        _PN,
    ]


def to_image_block(spec: NetworkSpec, res: int) -> list[LayerSpec]:
    c = spec.channels(res)
    return [LayerSpec("to-image", "conv", {"in": c, "out": spec.image_channels, "kernel": 1})]


def from_image_block(spec: NetworkSpec, res: int) -> list[LayerSpec]:
    c = spec.channels(res)
    return [LayerSpec("from-image", "conv", {"in": spec.image_channels, "out": c, "kernel": 1}), _LRELU]


def critic_block(spec: NetworkSpec, res: int) -> list[LayerSpec]:
    c = spec.channels(res)
    if res == 4:
        head_out = 1 if spec.role == "discriminator" else spec.latent_dim
        layers = [LayerSpec("minibatch-stddev")] if spec.role == "discriminator" else []
        extra = 1 if spec.role == "discriminator" else 0
        return layers + [
            _conv("conv", c + extra, c),
            _LRELU,
            LayerSpec("reshape", hyper={"shape": (c * 16,)}),
            _dense("dense0", c * 16, c),
            _LRELU,
            _dense("dense1", c, head_out),
        ]
    cout = spec.channels(res // 2)
    return [
        _conv("conv0", c, c),
        _LRELU,
        _conv("conv1", c, cout),
        _LRELU,
        LayerSpec("downsample"),
    ]


def latent_critic_block(spec: NetworkSpec) -> list[LayerSpec]:
    h = spec.latent_hidden
    return [
        _dense("dense0", spec.latent_dim, h),
        _LRELU,
        _dense("dense1", h, h),
        _LRELU,
        _dense("dense2", h, 1),
    ]


def block_layout(spec: NetworkSpec, block: str) -> list[LayerSpec]:
    kind, res = _split_block(block)
    if kind == "latent":
        return latent_critic_block(spec)
    if kind == "to_image":
        return to_image_block(spec, res)
    if kind == "from_image":
        return from_image_block(spec, res)
    if spec.role == "generator":
        return generator_block(spec, res)
    return critic_block(spec, res)


def _split_block(block: str) -> tuple[str, int]:
    for kind in ("to_image", "from_image", "block", "latent"):
        if block.startswith(kind):
            tail = block[len(kind):]
            return kind, int(tail) if tail else 0
    raise SpecError(f"unrecognised block {block!r}")


# parameter init ---------------------------------------------------------------


def _block_rng(seed: int, block: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(block.encode())])


def _init_block(spec: NetworkSpec, block: str, seed: int) -> dict[str, Tensor]:
    rng = _block_rng(seed, block)
    params: dict[str, Tensor] = {}
    for layer in block_layout(spec, block):
        if not layer.has_params:
            continue
        h = layer.hyper
        if layer.kind == "equalized-dense":
            shape = (h["in"], h["out"])
        else:
            shape = (h["out"], h["in"], h["kernel"], h["kernel"])
        params[f"{block}.{layer.name}.weight"] = Tensor(rng.standard_normal(shape), requires_grad=True)
        params[f"{block}.{layer.name}.bias"] = Tensor(np.zeros(h["out"]), requires_grad=True)
    return params


def _ladder(start: int, stop: int) -> list[int]:
    out = []
    r = start
    while r <= stop:
        out.append(r)
        r *= 2
    return out


def _blocks_for(spec: NetworkSpec, res: int) -> list[str]:
    if spec.role == "latent-discriminator":
        return ["latent"]
    names = []
    for r in _ladder(4, res):
        names.append(f"block{r}")
        if spec.role == "generator":
            names.append(f"to_image{r}")
        elif spec.role == "discriminator" or r == res:
            names.append(f"from_image{r}")
    return names


def _active_blocks(state: NetworkState) -> list[str]:
    spec, r = state.spec, state.resolution_active
    if spec.role == "latent-discriminator":
        return ["latent"]
    blocks = [f"block{q}" for q in _ladder(4, r)]
    edge = "to_image" if spec.role == "generator" else "from_image"
    blocks.append(f"{edge}{r}")
    if state.fade_alpha < 1.0 and r > 4:
        blocks.append(f"{edge}{r // 2}")
    return blocks


# builders ----------------------------------------------------------------------


def _build(spec: NetworkSpec, role: str, resolution: int | None, seed: int) -> NetworkState:
    spec.validate()
    if spec.role != role:
        raise SpecError(f"spec role is {spec.role!r}, expected {role!r}")
    if role == "latent-discriminator":
        return NetworkState(spec, _init_block(spec, "latent", seed), 0, 1.0, seed)
    if resolution is None:
        resolution = spec.start_resolution if role in ("generator", "discriminator") else spec.max_resolution
    if resolution < 4 or resolution & (resolution - 1) or resolution > spec.max_resolution:
        raise SpecError(f"resolution {resolution} outside the ladder 4..{spec.max_resolution}")
    params: dict[str, Tensor] = {}
    for block in _blocks_for(spec, resolution):
        params.update(_init_block(spec, block, seed))
    return NetworkState(spec, params, resolution, 1.0, seed)


def build_generator(spec: NetworkSpec, seed: int = 0, resolution: int | None = None) -> NetworkState:
    """Latent [N, latent_dim] -> image [N, 1, R, R] at the active resolution."""
    return _build(spec, "generator", resolution, seed)


def build_discriminator(spec: NetworkSpec, seed: int = 0, resolution: int | None = None) -> NetworkState:
    """Image [N, 1, R, R] -> unbounded critic score [N, 1]."""
    return _build(spec, "discriminator", resolution, seed)


def build_encoder(spec: NetworkSpec, seed: int = 0, resolution: int | None = None) -> NetworkState:
    """Fixed-resolution image -> deterministic latent code [N, latent_dim]."""
    return _build(spec, "encoder", resolution, seed)


def build_latent_discriminator(spec: NetworkSpec, seed: int = 0) -> NetworkState:
    return _build(spec, "latent-discriminator", None, seed)


def grow(state: NetworkState, next_resolution: int) -> NetworkState:
    """Add the next resolution's blocks; existing parameters are carried over as-is."""
    spec = state.spec
    if spec.role not in ("generator", "discriminator"):
        raise SpecError(f"{spec.role} networks do not grow")
    if next_resolution != 2 * state.resolution_active:
        raise SpecError(f"growth must double the resolution: {state.resolution_active} -> {next_resolution}")
    if next_resolution > spec.max_resolution:
        raise SpecError(f"resolution {next_resolution} exceeds the ceiling {spec.max_resolution}")
    params = dict(state.parameters)
    edge = "to_image" if spec.role == "generator" else "from_image"
    for block in (f"block{next_resolution}", f"{edge}{next_resolution}"):
        params.update(_init_block(spec, block, state.seed))
    return NetworkState(spec, params, next_resolution, 0.0, state.seed)


# forward passes ----------------------------------------------------------------


def _block(state: NetworkState, name: str, x: Tensor) -> Tensor:
    return run_block(block_layout(state.spec, name), x, state.parameters, name)


def generator_forward(state: NetworkState, z: Tensor) -> Tensor:
    r, alpha = state.resolution_active, state.fade_alpha
    if z.ndim != 2 or z.shape[1] != state.spec.latent_dim:
        raise ShapeError(f"generator expects [N,{state.spec.latent_dim}] latents, got {z.shape}")
    h = _block(state, "block4", z)
    prev = h
    for q in _ladder(8, r):
        prev = h
        h = _block(state, f"block{q}", h)
    out = _block(state, f"to_image{r}", h)
    if r > 4 and alpha < 1.0:
        old = T.upsample_nearest2x(_block(state, f"to_image{r // 2}", prev))
        out = fade_in_blend(old, out, alpha)
    return T.tanh(out)


def _check_image(state: NetworkState, x: Tensor) -> None:
    r = state.resolution_active
    if x.ndim != 4 or x.shape[1:] != (state.spec.image_channels, r, r):
        raise ShapeError(f"{state.role} expects [N,1,{r},{r}] images, got {x.shape}")


def discriminator_forward(state: NetworkState, x: Tensor) -> Tensor:
    _check_image(state, x)
    r, alpha = state.resolution_active, state.fade_alpha
    h = _block(state, f"from_image{r}", x)
    if r > 4:
        h = _block(state, f"block{r}", h)
        if alpha < 1.0:
            old = _block(state, f"from_image{r // 2}", T.avgpool2x(x))
            h = fade_in_blend(old, h, alpha)
        for q in reversed(_ladder(8, r // 2)):
            h = _block(state, f"block{q}", h)
    return _block(state, "block4", h)


def encoder_forward(state: NetworkState, x: Tensor) -> Tensor:
    _check_image(state, x)
    r = state.resolution_active
    h = _block(state, f"from_image{r}", x)
    for q in reversed(_ladder(8, r)):
        h = _block(state, f"block{q}", h)
    return _block(state, "block4", h)


def latent_discriminator_forward(state: NetworkState, z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] != state.spec.latent_dim:
        raise ShapeError(f"latent discriminator expects [N,{state.spec.latent_dim}], got {z.shape}")
    return _block(state, "latent", z)


_FORWARD = {
    "generator": generator_forward,
    "discriminator": discriminator_forward,
    "encoder": encoder_forward,
    "latent-discriminator": latent_discriminator_forward,
}


def forward(state: NetworkState, x: Any) -> Tensor:
    return _FORWARD[state.role](state, T.tensor(x))
