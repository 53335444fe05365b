"""Flat key=value run configuration shared by every CLI command.

Config files are UTF-8 `key=value` lines (# comments allowed); command-line
flags mirror the keys one-to-one and win over the file.  Every field has a
default, unknown keys are rejected, and a serialized config parses back to an
equal RunConfig, so artifacts can embed the exact configuration that made them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .diffusion import make_schedule
from .errors import ConfigError
from .modules import PRESETS, ModelConfig
from .train import ToyDataSpec

_MODEL_FIELDS = (
    "hidden_size",
    "depths",
    "ffn_ratio",
    "kernel_size",
    "activation",
    "use_cca",
    "in_channels",
    "num_classes",
    "label_dropout_prob",
    "stage_width_multipliers",
    "cond_dim",
)


@dataclass(frozen=True)
class RunConfig:
    command: str = ""

    # model (defaults mirror the dico-tiny preset; `preset` re-resolves them)
    preset: str = "dico-tiny"
    hidden_size: int = 32
    depths: tuple[int, ...] = (1, 1, 1, 1, 1)
    ffn_ratio: float = 2.0
    kernel_size: int = 3
    activation: str = "gelu"
    use_cca: bool = True
    in_channels: int = 1
    num_classes: int = 2
    label_dropout_prob: float = 0.1
    stage_width_multipliers: tuple[int, ...] = (1, 2, 4, 2, 1)
    cond_dim: int = 32

    # diffusion schedule
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # training
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    ema_decay: float = 0.9999
    hflip_prob: float = 0.5

    # sampling
    num_samples: int = 16
    cfg_scale: float = 1.0
    sample_steps: int = 250
    class_label: int = -1  # -1 alternates through the classes
    use_ema: bool = True
    clip_x0: bool = True
    grid_cols: int = 0  # 0 picks the nearest square layout

    # toy dataset
    n_images: int = 1024
    image_size: int = 16
    noise: float = 0.2
    stripe_period: int = 4
    amplitude: float = 0.8

    # paths
    data_path: str = "toy.dids"
    checkpoint: str = "model.dico"
    out_dir: str = "."

    # cost reporting: a model preset or reference-transformer name; empty
    # falls back to `preset`
    target: str = ""

    # benchmarking
    bench_iters: int = 5
    bench_warmup: int = 1
    bench_shapes: str = "256x128,1024x128,4096x384"

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{name: getattr(self, name) for name in _MODEL_FIELDS})

    def data_spec(self, seed: int | None = None) -> ToyDataSpec:
        return ToyDataSpec(
            n_images=self.n_images,
            image_size=self.image_size,
            channels=self.in_channels,
            num_classes=self.num_classes,
            noise=self.noise,
            stripe_period=self.stripe_period,
            amplitude=self.amplitude,
            seed=self.seed if seed is None else seed,
        )

    def schedule(self, respaced: bool = False):
        return make_schedule(
            "linear",
            self.timesteps,
            self.beta_start,
            self.beta_end,
            num_respaced=self.sample_steps if respaced else None,
        )

    def bench_shape_list(self) -> tuple[tuple[int, int], ...]:
        shapes = []
        for part in self.bench_shapes.split(","):
            part = part.strip()
            try:
                n, d = part.split("x")
                shapes.append((int(n), int(d)))
            except ValueError:
                raise ConfigError(
                    f"bench_shapes entries must look like 256x128, got {part!r}"
                ) from None
        return tuple(shapes)

    def validate(self) -> "RunConfig":
        self.model_config()  # raises ConfigError on bad model fields
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ConfigError(
                f"need 0 < beta_start < beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ConfigError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be >= 1, got {self.num_samples}")
        if not (1 <= self.sample_steps <= self.timesteps):
            raise ConfigError(
                f"sample_steps must lie in [1, timesteps], got {self.sample_steps}"
            )
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not (-1 <= self.class_label < self.num_classes):
            raise ConfigError(
                f"class_label must be -1 or in [0, {self.num_classes}), got {self.class_label}"
            )
        if self.grid_cols < 0:
            raise ConfigError(f"grid_cols must be >= 0, got {self.grid_cols}")
        if self.bench_iters < 1:
            raise ConfigError(f"bench_iters must be >= 1, got {self.bench_iters}")
        if self.bench_warmup < 0:
            raise ConfigError(f"bench_warmup must be >= 0, got {self.bench_warmup}")
        # Cheap dataset-field checks; the full toy-data contract (which also
        # constrains num_classes) is enforced by the commands that build data.
        if self.n_images < 1:
            raise ConfigError(f"n_images must be >= 1, got {self.n_images}")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError(
                f"image_size must be a positive multiple of 4, got {self.image_size}"
            )
        if self.stripe_period < 2 or self.stripe_period % 2:
            raise ConfigError(
                f"stripe_period must be a positive even number, got {self.stripe_period}"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not (0.0 < self.amplitude <= 1.0):
            raise ConfigError(f"amplitude must lie in (0, 1], got {self.amplitude}")
        self.bench_shape_list()
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "str":
            return text
        if kind.startswith("tuple"):
            return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {key}={text!r} as {kind}") from None
    raise ConfigError(f"unhandled field type {kind} for {key}")


def _parse_lines(text: str, source: str) -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        pairs[key] = value
    return pairs


def parse_config(text: str = "", overrides: dict | None = None) -> RunConfig:
    """Resolve file text plus flag overrides into a validated RunConfig.

    Overrides win over the file.  The `preset` key re-seeds the model fields
    before any explicitly given model key is applied, so a preset plus a
    tweak behaves as expected regardless of line order.
    """
    pairs = _parse_lines(text, "config")
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        pairs[key] = value

    values = {key: _parse_value(key, str(raw)) for key, raw in pairs.items()}

    preset_name = values.get("preset", RunConfig.preset)
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown model preset {preset_name!r}; known: {sorted(PRESETS)}")
    preset = PRESETS[preset_name]
    resolved = {name: getattr(preset, name) for name in _MODEL_FIELDS}
    resolved.update(values)
    resolved["preset"] = preset_name
    return RunConfig(**resolved).validate()


def config_to_text(rc: RunConfig) -> str:
    """Serialize every field as key=value; parsing the result reproduces rc."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(rc, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
