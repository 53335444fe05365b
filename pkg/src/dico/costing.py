"""Analytic multiply-accumulate and parameter counting.

Convention: 1 MAC = 1 FLOP, calibrated so the reference transformer formula
(per layer: qkv+proj 4*N*d^2, attention logits+mix 2*N^2*d, MLP 8*N*d^2)
reproduces the published DiT Gflops figures.  Only convolutions, linear maps,
and matrix products count; normalization, activations, and elementwise
modulation are free, matching what the runtime enumerator records.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .modules import PRESETS, ModelConfig, ffn_hidden_width

COST_NOTE = "1 multiply-accumulate = 1 FLOP; batch size 1"


@dataclass(frozen=True)
class CostRow:
    name: str
    macs: int
    params: int


@dataclass(frozen=True)
class CostReport:
    target: str
    input_shape: tuple[int, int, int]  # (c, h, w)
    rows: tuple[CostRow, ...]
    note: str = COST_NOTE

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,macs,params\n")
        for r in self.rows:
            buf.write(f"{r.name},{r.macs},{r.params}\n")
        buf.write(f"total,{self.total_macs},{self.total_params}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class TransformerSpec:
    """A reference patch-transformer denoiser used only for cost calibration."""

    layers: int
    width: int
    patch: int
    in_channels: int = 4
    num_classes: int = 1000
    mlp_ratio: int = 4
    freq_dim: int = 256


REFERENCE_SPECS: dict[str, TransformerSpec] = {
    "dit-s2": TransformerSpec(layers=12, width=384, patch=2),
    "dit-b2": TransformerSpec(layers=12, width=768, patch=2),
    "dit-l2": TransformerSpec(layers=24, width=1024, patch=2),
    "dit-xl2": TransformerSpec(layers=28, width=1152, patch=2),
}


def _norm_hw(input_shape) -> tuple[int, int]:
    if len(input_shape) == 2:
        h, w = input_shape
    elif len(input_shape) == 3:
        _, h, w = input_shape
    else:
        raise DimensionError(f"input_shape must be (h, w) or (c, h, w), got {input_shape!r}")
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise DimensionError(f"spatial dims must be positive multiples of 4, got ({h}, {w})")
    return h, w


def count_macs_params(target, input_shape=(32, 32)) -> CostReport:
    """Per-layer MAC and parameter counts for a model config or reference spec.

    Accepts a ModelConfig, a TransformerSpec, or a preset name covering both
    families.  Batch size is 1, mirroring the runtime enumerator.
    """
    if isinstance(target, str):
        if target in REFERENCE_SPECS:
            return count_macs_params(REFERENCE_SPECS[target], input_shape)
        if target in PRESETS:
            return count_macs_params(PRESETS[target], input_shape)
        raise ConfigError(
            f"unknown cost target {target!r}; known: {sorted(PRESETS) + sorted(REFERENCE_SPECS)}"
        )
    if isinstance(target, ModelConfig):
        return _count_dico(target, input_shape)
    if isinstance(target, TransformerSpec):
        return _count_transformer(target, input_shape)
    raise ConfigError(f"cannot count costs for {type(target).__name__}")


def _conv_row(name, c_in, c_out, k, n_out, groups=1, bias=True) -> CostRow:
    macs = (c_in // groups) * c_out * k * k * n_out
    params = (c_in // groups) * c_out * k * k + (c_out if bias else 0)
    return CostRow(name, macs, params)


def _count_dico(config: ModelConfig, input_shape) -> CostReport:
    h, w = _norm_hw(input_shape)
    cd = config.cond_dim
    widths = config.stage_widths
    rows: list[CostRow] = [
        _conv_row("t_embed.fc1", cd, cd, 1, 1),
        _conv_row("t_embed.fc2", cd, cd, 1, 1),
        CostRow("y_embed.table", 0, (config.num_classes + 1) * cd),
        _conv_row("stem", config.in_channels, widths[0], 3, h * w),
    ]

    def block_rows(stage: int, index: int, c: int, n_out: int) -> list[CostRow]:
        prefix = f"stage{stage}.block{index}"
        out = [
            _conv_row(f"{prefix}.cond_proj", cd, 6 * c, 1, 1),
            _conv_row(f"{prefix}.conv_module.pw1", c, c, 1, n_out),
            _conv_row(
                f"{prefix}.conv_module.dw", c, c, config.kernel_size, n_out, groups=c
            ),
        ]
        if config.use_cca:
            out.append(_conv_row(f"{prefix}.conv_module.cca", c, c, 1, 1))
        hidden = ffn_hidden_width(c, config.ffn_ratio)
        out.append(_conv_row(f"{prefix}.conv_module.pw2", c, c, 1, n_out))
        out.append(_conv_row(f"{prefix}.ffn.fc1", c, hidden, 1, n_out))
        out.append(_conv_row(f"{prefix}.ffn.fc2", hidden, c, 1, n_out))
        return out

    n_full, n_half, n_quarter = h * w, (h // 2) * (w // 2), (h // 4) * (w // 4)
    stage_res = [n_full, n_half, n_quarter, n_half, n_full]

    for i in range(config.depths[0]):
        rows += block_rows(1, i, widths[0], stage_res[0])
    rows.append(_conv_row("down1", 4 * widths[0], widths[1], 1, n_half))
    for i in range(config.depths[1]):
        rows += block_rows(2, i, widths[1], stage_res[1])
    rows.append(_conv_row("down2", 4 * widths[1], widths[2], 1, n_quarter))
    for i in range(config.depths[2]):
        rows += block_rows(3, i, widths[2], stage_res[2])
    rows.append(_conv_row("up1", widths[2], 4 * widths[3], 1, n_quarter))
    rows.append(_conv_row("fuse1", 2 * widths[3], widths[3], 1, n_half))
    for i in range(config.depths[3]):
        rows += block_rows(4, i, widths[3], stage_res[3])
    rows.append(_conv_row("up2", widths[3], 4 * widths[4], 1, n_half))
    rows.append(_conv_row("fuse2", 2 * widths[4], widths[4], 1, n_full))
    for i in range(config.depths[4]):
        rows += block_rows(5, i, widths[4], stage_res[4])
    rows.append(_conv_row("final_cond", cd, 2 * widths[4], 1, 1))
    rows.append(_conv_row("head", widths[4], 2 * config.in_channels, 3, h * w))

    return CostReport(
        target=f"dico(D={config.hidden_size})",
        input_shape=(config.in_channels, h, w),
        rows=tuple(rows),
    )


def _count_transformer(spec: TransformerSpec, input_shape) -> CostReport:
    h, w = _norm_hw(input_shape)
    if h % spec.patch or w % spec.patch:
        raise DimensionError(f"patch {spec.patch} does not divide input ({h}, {w})")
    d = spec.width
    n_tok = (h // spec.patch) * (w // spec.patch)
    out_dim = spec.patch * spec.patch * 2 * spec.in_channels  # noise and variance
    rows: list[CostRow] = [
        _conv_row("patchify", spec.in_channels, d, spec.patch, n_tok),
        CostRow("t_embed.fc1", spec.freq_dim * d, spec.freq_dim * d + d),
        CostRow("t_embed.fc2", d * d, d * d + d),
        CostRow("y_embed.table", 0, (spec.num_classes + 1) * d),
    ]
    mlp_hidden = spec.mlp_ratio * d
    for i in range(spec.layers):
        prefix = f"layer{i}"
        rows += [
            CostRow(f"{prefix}.adaln", d * 6 * d, d * 6 * d + 6 * d),
            CostRow(f"{prefix}.qkv", n_tok * d * 3 * d, d * 3 * d + 3 * d),
            CostRow(f"{prefix}.attention", 2 * n_tok * n_tok * d, 0),
            CostRow(f"{prefix}.proj", n_tok * d * d, d * d + d),
            CostRow(f"{prefix}.mlp.fc1", n_tok * d * mlp_hidden, d * mlp_hidden + mlp_hidden),
            CostRow(f"{prefix}.mlp.fc2", n_tok * mlp_hidden * d, mlp_hidden * d + d),
        ]
    rows.append(CostRow("final.adaln", d * 2 * d, d * 2 * d + 2 * d))
    rows.append(CostRow("final.linear", n_tok * d * out_dim, d * out_dim + out_dim))
    return CostReport(
        target=f"transformer(d={d}, layers={spec.layers}, patch={spec.patch})",
        input_shape=(spec.in_channels, h, w),
        rows=tuple(rows),
    )


# -- per-token comparison (efficiency direction) ---------------------------------------


def conv_module_macs_per_token(d: int, n_tokens: int, kernel_size: int = 3, use_cca: bool = True) -> float:
    """Conv Module cost per token: two pointwise maps, the depthwise taps, and
    the channel-attention projection amortized over the image."""
    per = 2.0 * d * d + kernel_size * kernel_size * d
    if use_cca:
        per += d * d / n_tokens
    return per


def attention_macs_per_token(d: int, n_tokens: int) -> float:
    """Self-attention cost per token: qkv+output projections plus the
    quadratic logits and mixing terms."""
    return 4.0 * d * d + 2.0 * n_tokens * d
