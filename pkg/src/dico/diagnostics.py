"""Runtime MAC measurement, a reference self-attention, channel-activation
scores, and wall-clock throughput benchmarking.

The recorder here is the independent check on the analytic counter: it tallies
multiply-accumulates as the instantiated model actually executes, so the two
routes can disagree whenever either one is wrong.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .modules import ConvModule, ModelConfig, Module, build_model, trunc_normal
from .tensor import Tensor, matmul, no_grad, softmax, swap_last2


class MacRecorder:
    """Accumulates multiply-accumulate counts reported by conv2d and matmul."""

    def __init__(self):
        self.total = 0

    def add(self, count: int) -> None:
        self.total += int(count)

    def reset(self) -> None:
        self.total = 0

    @contextlib.contextmanager
    def recording(self):
        prev = T.set_mac_recorder(self)
        try:
            yield self
        finally:
            T.set_mac_recorder(prev)


def measure_forward_macs(model, image_size: int) -> tuple[int, int]:
    """Brute-force (measured MACs, parameter count) for one batch-1 forward."""
    config: ModelConfig = model.config
    z = Tensor(np.zeros((1, config.in_channels, image_size, image_size), np.float32))
    rec = MacRecorder()
    with no_grad(), rec.recording():
        model.forward(z, np.array([0]), np.array([0]))
    return rec.total, model.param_count()


def measure_config_macs(config: ModelConfig, image_size: int) -> tuple[int, int]:
    return measure_forward_macs(build_model(config, seed_or_rng=0), image_size)


# -- reference self-attention --------------------------------------------------------


class SelfAttentionReference(Module):
    """Plain single-head softmax attention over (1, 1, N, d) token tensors.

    Exists only so the cost and timing comparisons have a live baseline; the
    denoiser itself never uses it.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        shape = (1, 1, d, d)
        self.wq = self.register_param("wq", trunc_normal(rng, shape))
        self.wk = self.register_param("wk", trunc_normal(rng, shape))
        self.wv = self.register_param("wv", trunc_normal(rng, shape))
        self.wo = self.register_param("wo", trunc_normal(rng, shape))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] != 1 or x.shape[1] != 1 or x.shape[3] != self.d:
            raise UsageError(f"expected tokens of shape (1, 1, N, {self.d}), got {x.shape}")
        q = matmul(x, self.wq)
        k = matmul(x, self.wk)
        v = matmul(x, self.wv)
        logits = matmul(q, swap_last2(k)) * (1.0 / math.sqrt(self.d))
        return matmul(matmul(softmax(logits), v), self.wo)


def self_attention_reference(x: Tensor, params: SelfAttentionReference) -> Tensor:
    return params.forward(x)


# -- channel activation scores ---------------------------------------------------------


@dataclass(frozen=True)
class ChannelActivationReport:
    layer_name: str
    scores: np.ndarray  # (c,) nonnegative
    reduction: str = "relu then global average pooling"

    def to_csv(self) -> str:
        lines = ["channel,score"]
        lines += [f"{i},{s!r}" for i, s in enumerate(self.scores.tolist())]
        return "\n".join(lines) + "\n"


def channel_activation_scores(features, layer_name: str = "") -> ChannelActivationReport:
    """Per-channel mean of max(x, 0) over batch and space.

    `features` may be a capture dict (looked up by `layer_name`), a Tensor, or
    a rank-4 array.
    """
    if isinstance(features, dict):
        if layer_name not in features:
            raise UsageError(
                f"layer {layer_name!r} was not captured; available: {sorted(features)}"
            )
        features = features[layer_name]
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if data.ndim != 4:
        raise UsageError(f"features must be rank-4, got shape {data.shape}")
    scores = np.maximum(data, 0.0).mean(axis=(0, 2, 3))
    return ChannelActivationReport(layer_name=layer_name, scores=scores)


# -- throughput benchmark ---------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    block: str
    n_tokens: int
    width: int
    median_us: float
    p10_us: float
    p90_us: float
    macs: int


BENCH_CSV_HEADER = "block,n_tokens,width,median_us,p10_us,p90_us,macs"


def _bench_forward(block: str, n_tokens: int, width: int, rng: np.random.Generator):
    """Returns (callable running one forward, its measured MACs)."""
    if block == "conv-module":
        side = math.isqrt(n_tokens)
        if side * side != n_tokens:
            raise ConfigError(
                f"conv-module benchmark needs a square token count, got {n_tokens}"
            )
        config = ModelConfig(hidden_size=width, depths=(1, 1, 1, 1, 1))
        module = ConvModule(width, config, rng)
        x = Tensor(rng.standard_normal((1, width, side, side)).astype(np.float32))
        run = lambda: module.forward(x)
    elif block == "self-attention":
        module = SelfAttentionReference(width, rng)
        x = Tensor(rng.standard_normal((1, 1, n_tokens, width)).astype(np.float32))
        run = lambda: module.forward(x)
    else:
        raise ConfigError(f"unknown benchmark block {block!r}")
    rec = MacRecorder()
    with no_grad(), rec.recording():
        run()
    return run, rec.total


def throughput_bench(
    blocks: tuple[str, ...] = ("conv-module", "self-attention"),
    shapes: tuple[tuple[int, int], ...] = ((256, 128), (1024, 128), (4096, 384)),
    warmup: int = 1,
    iters: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    """Median/p10/p90 wall-clock per forward, one row per (block, shape)."""
    if iters < 1:
        raise ConfigError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    rows = []
    for block in blocks:
        for n_tokens, width in shapes:
            rng = np.random.default_rng(seed)
            run, macs = _bench_forward(block, n_tokens, width, rng)
            with no_grad():
                for _ in range(warmup):
                    run()
                samples = []
                for _ in range(iters):
                    start = time.perf_counter()
                    run()
                    samples.append((time.perf_counter() - start) * 1e6)
            med, p10, p90 = np.percentile(samples, [50, 10, 90])
            rows.append(
                BenchRow(
                    block=block,
                    n_tokens=n_tokens,
                    width=width,
                    median_us=float(med),
                    p10_us=float(p10),
                    p90_us=float(p90),
                    macs=macs,
                )
            )
    return rows


def bench_rows_to_csv(rows) -> str:
    lines = [BENCH_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.block},{r.n_tokens},{r.width},{r.median_us:.3f},{r.p10_us:.3f},{r.p90_us:.3f},{r.macs}"
        )
    return "\n".join(lines) + "\n"
