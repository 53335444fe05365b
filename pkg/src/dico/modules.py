"""The DiCo network: a U-shaped convolutional denoiser conditioned on
timestep and class label through adaptive layer-norm modulation.

Every block is two gated residual branches: a Conv Module (pointwise conv,
depthwise conv, activation, compact channel attention, pointwise conv) and a
pointwise feed-forward branch.  Conditioning enters per block as six
per-channel vectors (scale, shift, gate for each branch) projected from the
shared condition embedding; the projections start at zero so every block is
initially the identity map.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensor import (
    Tensor,
    activation,
    channel_layer_norm,
    concat_channels,
    conv2d,
    gather_rows,
    global_avg_pool,
    pixel_shuffle,
    pixel_unshuffle,
    sigmoid,
    silu,
    slice_channels,
)

# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """A model variant: widths, depths, and the knobs exercised by ablations."""

    hidden_size: int = 128
    depths: tuple[int, int, int, int, int] = (5, 4, 4, 4, 4)
    ffn_ratio: float = 2.0
    kernel_size: int = 3
    activation: str = "gelu"
    use_cca: bool = True
    in_channels: int = 4
    num_classes: int = 1000
    label_dropout_prob: float = 0.1
    stage_width_multipliers: tuple[int, int, int, int, int] = (1, 2, 4, 2, 1)
    cond_dim: int = 0  # 0 means "use hidden_size"

    def __post_init__(self):
        if self.cond_dim == 0:
            object.__setattr__(self, "cond_dim", self.hidden_size)
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(
            self, "stage_width_multipliers", tuple(int(m) for m in self.stage_width_multipliers)
        )
        self.validate()

    def validate(self) -> None:
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size must be positive, got {self.hidden_size}")
        if len(self.depths) != 5 or any(d < 0 for d in self.depths):
            raise ConfigError(f"depths must be 5 nonnegative ints, got {self.depths!r}")
        if self.ffn_ratio <= 0:
            raise ConfigError(f"ffn_ratio must be positive, got {self.ffn_ratio}")
        if self.kernel_size not in (3, 5, 7):
            raise ConfigError(
                f"kernel_size must be an odd size in {{3, 5, 7}}, got {self.kernel_size}"
            )
        if self.activation not in ("gelu", "gelu-exact", "relu", "silu", "sigmoid"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if not 0.0 <= self.label_dropout_prob <= 1.0:
            raise ConfigError(
                f"label_dropout_prob must lie in [0, 1], got {self.label_dropout_prob}"
            )
        m = self.stage_width_multipliers
        if len(m) != 5 or any(x < 1 for x in m):
            raise ConfigError(f"stage_width_multipliers must be 5 positive ints, got {m!r}")
        if m[3] != m[1] or m[4] != m[0]:
            raise ConfigError(
                "decoder stage widths must mirror encoder widths so skip fusion "
                f"shapes agree; got {m!r}"
            )
        if self.cond_dim % 2:
            raise ConfigError(f"cond_dim must be even for the sinusoidal split, got {self.cond_dim}")

    @property
    def stage_widths(self) -> tuple[int, int, int, int, int]:
        return tuple(self.hidden_size * m for m in self.stage_width_multipliers)

    @property
    def null_label(self) -> int:
        return self.num_classes


def ffn_hidden_width(c: int, ratio: float) -> int:
    """FFN expansion width; the analytic cost model uses this same rule."""
    return max(1, int(round(c * ratio)))


PRESETS: dict[str, ModelConfig] = {
    "dico-s": ModelConfig(hidden_size=128, depths=(5, 4, 4, 4, 4), ffn_ratio=2.0),
    "dico-b": ModelConfig(hidden_size=256, depths=(5, 4, 4, 4, 4), ffn_ratio=2.0),
    "dico-l": ModelConfig(hidden_size=352, depths=(9, 8, 9, 8, 9), ffn_ratio=2.0),
    "dico-xl": ModelConfig(hidden_size=416, depths=(9, 9, 10, 9, 9), ffn_ratio=2.0),
    "dico-h": ModelConfig(hidden_size=416, depths=(14, 12, 10, 12, 14), ffn_ratio=4.0),
    # Desk-scale presets for the toy task and gradient checks.
    "dico-tiny": ModelConfig(
        hidden_size=32,
        depths=(1, 1, 1, 1, 1),
        ffn_ratio=2.0,
        in_channels=1,
        num_classes=2,
    ),
    "dico-micro": ModelConfig(
        hidden_size=8,
        depths=(1, 1, 1, 1, 1),
        ffn_ratio=2.0,
        in_channels=1,
        num_classes=2,
    ),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}") from None


class NetOutput(NamedTuple):
    """Denoiser head output: noise prediction and variance-interpolation coefficients."""

    eps: Tensor
    v: Tensor


# -- initialization ----------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws beyond two standard deviations resampled."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def fan_in_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


# -- module registry ---------------------------------------------------------


class Module:
    """Minimal parameter container: children and parameters in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def register_param(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def register_child(self, name: str, child: "Module") -> "Module":
        if name in self._children:
            raise UsageError(f"duplicate child module name {name!r}")
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


# -- primitive layers ----------------------------------------------------------


class Conv1x1(Module):
    """Pointwise convolution; doubles as the linear layer throughout."""

    def __init__(self, c_in, c_out, rng, bias=True, zero_init=False):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        w = np.zeros((c_out, c_in, 1, 1), np.float32) if zero_init else trunc_normal(rng, (c_out, c_in, 1, 1))
        self.weight = self.register_param("weight", w)
        self.bias = (
            self.register_param("bias", np.zeros((1, c_out, 1, 1), np.float32)) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class ConvKxK(Module):
    """Full convolution with same-size zero padding (stem and head)."""

    def __init__(self, c_in, c_out, k, rng, zero_init=False):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"same-padding needs an odd kernel, got {k}")
        self.padding = (k - 1) // 2
        w = np.zeros((c_out, c_in, k, k), np.float32) if zero_init else trunc_normal(rng, (c_out, c_in, k, k))
        self.weight = self.register_param("weight", w)
        self.bias = self.register_param("bias", np.zeros((1, c_out, 1, 1), np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class DepthwiseConv(Module):
    def __init__(self, c, k, rng):
        super().__init__()
        self.c = c
        self.padding = (k - 1) // 2
        self.weight = self.register_param("weight", fan_in_uniform(rng, (c, 1, k, k)))
        self.bias = self.register_param("bias", np.zeros((1, c, 1, 1), np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding, groups=self.c)


# -- conditioning -----------------------------------------------------------------


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> Tensor:
    """Geometric-frequency features: first half sines, second half cosines.

    At t=0 the sine half is all zeros and the cosine half all ones.
    """
    if dim % 2:
        raise ConfigError(f"sinusoidal embedding dim must be even, got {dim}")
    t = np.asarray(t)
    if t.ndim != 1 or not np.issubdtype(t.dtype, np.integer):
        raise UsageError("timesteps must be a 1-D integer array")
    if t.size and t.min() < 0:
        raise UsageError("timesteps must be nonnegative")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None].astype(np.float64) * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)
    return Tensor(emb.reshape(t.shape[0], dim, 1, 1))


class TimestepEmbedder(Module):
    """Sinusoidal features refined by a two-layer MLP with silu."""

    def __init__(self, dim, rng):
        super().__init__()
        self.dim = dim
        self.fc1 = self.register_child("fc1", Conv1x1(dim, dim, rng))
        self.fc2 = self.register_child("fc2", Conv1x1(dim, dim, rng))

    def forward(self, t: np.ndarray) -> Tensor:
        e = sinusoidal_embedding(t, self.dim)
        return self.fc2.forward(silu(self.fc1.forward(e)))


class LabelEmbedder(Module):
    """Class-label table with one extra null row for unconditional passes."""

    def __init__(self, num_classes, dim, rng, dropout_prob=0.1):
        super().__init__()
        self.num_classes = num_classes
        self.dropout_prob = dropout_prob
        self.table = self.register_param(
            "table", trunc_normal(rng, (num_classes + 1, dim, 1, 1))
        )

    def forward(self, y: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        y = np.asarray(y)
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise UsageError("labels must be a 1-D integer array")
        if y.size and (y.min() < 0 or y.max() > self.num_classes):
            raise UsageError(
                f"labels must lie in [0, {self.num_classes}] "
                f"(index {self.num_classes} is the null token)"
            )
        if train and self.dropout_prob > 0.0:
            if rng is None:
                raise UsageError("label dropout during training requires an rng")
            drop = rng.random(y.shape[0]) < self.dropout_prob
            y = np.where(drop, self.num_classes, y)
        return gather_rows(self.table, y)


def modulate(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine: x * (1 + gamma) + beta, broadcast over space."""
    c = x.shape[1]
    if gamma.shape[1] != c or beta.shape[1] != c:
        raise DimensionError(
            f"modulation vectors must have {c} channels, got "
            f"{gamma.shape[1]} and {beta.shape[1]}"
        )
    return x * (gamma + 1.0) + beta


# -- DiCo block internals ------------------------------------------------------------


class CCA(Module):
    """Compact channel attention: x gated channelwise by sigmoid(proj(GAP(x)))."""

    def __init__(self, c, rng):
        super().__init__()
        self.proj = self.register_child("proj", Conv1x1(c, c, rng))

    def forward(self, x: Tensor, capture: dict | None = None, prefix: str = "") -> Tensor:
        gates = sigmoid(self.proj.forward(global_avg_pool(x)))
        if capture is not None:
            capture[f"{prefix}.cca_gates"] = gates.data
        return x * gates


class ConvModule(Module):
    """Pointwise, depthwise, activation, channel attention, pointwise."""

    def __init__(self, c, config: ModelConfig, rng):
        super().__init__()
        self.activation = config.activation
        self.pw1 = self.register_child("pw1", Conv1x1(c, c, rng))
        self.dw = self.register_child("dw", DepthwiseConv(c, config.kernel_size, rng))
        self.cca = self.register_child("cca", CCA(c, rng)) if config.use_cca else None
        self.pw2 = self.register_child("pw2", Conv1x1(c, c, rng))

    def forward(self, x: Tensor, capture: dict | None = None, prefix: str = "") -> Tensor:
        y = activation(self.dw.forward(self.pw1.forward(x)), self.activation)
        if self.cca is not None:
            y = self.cca.forward(y, capture, prefix)
        return self.pw2.forward(y)


class FFN(Module):
    """Pointwise expand, activation, pointwise contract."""

    def __init__(self, c, config: ModelConfig, rng):
        super().__init__()
        self.activation = config.activation
        hidden = ffn_hidden_width(c, config.ffn_ratio)
        self.fc1 = self.register_child("fc1", Conv1x1(c, hidden, rng))
        self.fc2 = self.register_child("fc2", Conv1x1(hidden, c, rng))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(activation(self.fc1.forward(x), self.activation))


class DiCoBlock(Module):
    """Two condition-gated residual branches around a shared channel norm.

    The condition projection emits (gamma1, beta1, alpha1, gamma2, beta2,
    alpha2) and is zero-initialized, making the block the identity at start.
    """

    def __init__(self, c, config: ModelConfig, rng):
        super().__init__()
        self.c = c
        self.cond_proj = self.register_child(
            "cond_proj", Conv1x1(config.cond_dim, 6 * c, rng, zero_init=True)
        )
        self.conv_module = self.register_child("conv_module", ConvModule(c, config, rng))
        self.ffn = self.register_child("ffn", FFN(c, config, rng))

    def forward(self, x: Tensor, cond: Tensor, capture: dict | None = None, prefix: str = "") -> Tensor:
        c = self.c
        m = self.cond_proj.forward(silu(cond))
        g1 = slice_channels(m, 0, c)
        b1 = slice_channels(m, c, 2 * c)
        a1 = slice_channels(m, 2 * c, 3 * c)
        g2 = slice_channels(m, 3 * c, 4 * c)
        b2 = slice_channels(m, 4 * c, 5 * c)
        a2 = slice_channels(m, 5 * c, 6 * c)
        h = modulate(channel_layer_norm(x), g1, b1)
        x = x + a1 * self.conv_module.forward(h, capture, prefix)
        h = modulate(channel_layer_norm(x), g2, b2)
        x = x + a2 * self.ffn.forward(h)
        return x


class Stage(Module):
    """A stack of equal-width blocks at one resolution."""

    def __init__(self, c, depth, config: ModelConfig, rng):
        super().__init__()
        self.blocks = [
            self.register_child(f"block{i}", DiCoBlock(c, config, rng)) for i in range(depth)
        ]

    def forward(self, x: Tensor, cond: Tensor, capture: dict | None = None, prefix: str = "") -> Tensor:
        for i, block in enumerate(self.blocks):
            x = block.forward(x, cond, capture, f"{prefix}.block{i}")
        return x


class Downsample(Module):
    """Pixel-unshuffle by 2, then a pointwise reduction to the next width."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.proj = self.register_child("proj", Conv1x1(4 * c_in, c_out, rng))

    def forward(self, x: Tensor) -> Tensor:
        return self.proj.forward(pixel_unshuffle(x, 2))


class Upsample(Module):
    """Pointwise expansion to 4x the next width, then pixel-shuffle by 2."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.proj = self.register_child("proj", Conv1x1(c_in, 4 * c_out, rng))

    def forward(self, x: Tensor) -> Tensor:
        return pixel_shuffle(self.proj.forward(x), 2)


class SkipFuse(Module):
    """Concatenate decoder and encoder features (decoder first), reduce 2c to c."""

    def __init__(self, c, rng):
        super().__init__()
        self.proj = self.register_child("proj", Conv1x1(2 * c, c, rng))

    def forward(self, dec: Tensor, enc: Tensor) -> Tensor:
        if dec.shape != enc.shape:
            raise DimensionError(
                f"skip fusion needs matching shapes, got {dec.shape} and {enc.shape}"
            )
        return self.proj.forward(concat_channels([dec, enc]))


# -- full model -------------------------------------------------------------------------


class DiCoModel(Module):
    """Stem, three-resolution U of DiCo blocks with skip fusion, modulated head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        w = config.stage_widths
        cd = config.cond_dim
        self.t_embed = self.register_child("t_embed", TimestepEmbedder(cd, rng))
        self.y_embed = self.register_child(
            "y_embed", LabelEmbedder(config.num_classes, cd, rng, config.label_dropout_prob)
        )
        self.stem = self.register_child(
            "stem", ConvKxK(config.in_channels, w[0], 3, rng)
        )
        self.stage1 = self.register_child("stage1", Stage(w[0], config.depths[0], config, rng))
        self.down1 = self.register_child("down1", Downsample(w[0], w[1], rng))
        self.stage2 = self.register_child("stage2", Stage(w[1], config.depths[1], config, rng))
        self.down2 = self.register_child("down2", Downsample(w[1], w[2], rng))
        self.stage3 = self.register_child("stage3", Stage(w[2], config.depths[2], config, rng))
        self.up1 = self.register_child("up1", Upsample(w[2], w[3], rng))
        self.fuse1 = self.register_child("fuse1", SkipFuse(w[3], rng))
        self.stage4 = self.register_child("stage4", Stage(w[3], config.depths[3], config, rng))
        self.up2 = self.register_child("up2", Upsample(w[3], w[4], rng))
        self.fuse2 = self.register_child("fuse2", SkipFuse(w[4], rng))
        self.stage5 = self.register_child("stage5", Stage(w[4], config.depths[4], config, rng))
        self.final_cond = self.register_child(
            "final_cond", Conv1x1(cd, 2 * w[4], rng, zero_init=True)
        )
        self.head = self.register_child(
            "head", ConvKxK(w[4], 2 * config.in_channels, 3, rng, zero_init=True)
        )

    def forward(
        self,
        z: Tensor,
        t: np.ndarray,
        y: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        capture: dict | None = None,
    ) -> NetOutput:
        n, c_in, h, w = z.shape
        if c_in != self.config.in_channels:
            raise DimensionError(
                f"model expects {self.config.in_channels} input channels, got {c_in}"
            )
        if h % 4 or w % 4:
            raise DimensionError(
                f"spatial dims must be divisible by 4 (two downsamplings), got ({h}, {w})"
            )
        t, y = np.asarray(t), np.asarray(y)
        if t.shape != (n,) or y.shape != (n,):
            raise UsageError(
                f"t and y must be 1-D arrays of batch size {n}, got {t.shape} and {y.shape}"
            )
        cond = self.t_embed.forward(t) + self.y_embed.forward(y, train, rng)

        x = self.stem.forward(z)
        s1 = self.stage1.forward(x, cond, capture, "stage1")
        x = self.down1.forward(s1)
        s2 = self.stage2.forward(x, cond, capture, "stage2")
        x = self.down2.forward(s2)
        x = self.stage3.forward(x, cond, capture, "stage3")
        x = self.fuse1.forward(self.up1.forward(x), s2)
        x = self.stage4.forward(x, cond, capture, "stage4")
        x = self.fuse2.forward(self.up2.forward(x), s1)
        x = self.stage5.forward(x, cond, capture, "stage5")
        if capture is not None:
            capture["stage5"] = x.data

        cw = x.shape[1]
        mod = self.final_cond.forward(silu(cond))
        gamma = slice_channels(mod, 0, cw)
        beta = slice_channels(mod, cw, 2 * cw)
        x = modulate(channel_layer_norm(x), gamma, beta)
        out = self.head.forward(x)
        return NetOutput(
            eps=slice_channels(out, 0, c_in), v=slice_channels(out, c_in, 2 * c_in)
        )


def build_model(config: ModelConfig, seed_or_rng: int | np.random.Generator = 0) -> DiCoModel:
    """Instantiate a model; identical seeds give bitwise-identical parameters."""
    if isinstance(seed_or_rng, np.random.Generator):
        rng = seed_or_rng
    else:
        rng = np.random.default_rng(seed_or_rng)
    return DiCoModel(config, rng)


def config_replace(config: ModelConfig, **changes) -> ModelConfig:
    """A copy of config with fields replaced (validation re-runs)."""
    return dataclasses.replace(config, **changes)
