"""Training harness: AdamW, EMA shadow weights, the toy stripe dataset,
augmentation, and the seed-deterministic training loop.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionSchedule, losses, q_sample
from .errors import ConfigError, DimensionError, NumericError
from .modules import DiCoModel
from .tensor import Tensor, backward

# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Bias-corrected AdamW with decoupled weight decay.

    With weight_decay=0 the update coincides bitwise with Adam.  Gradients
    are validated for finiteness so divergence fails loudly with the
    offending parameter's name.
    """

    def __init__(
        self,
        named_params,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m, v = self.m[name], self.v[name]
            np.multiply(m, b1, out=m)
            m += (1.0 - b1) * g
            np.multiply(v, b2, out=v)
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


# -- EMA ------------------------------------------------------------------------


class Ema:
    """Exponential moving average of parameters: shadow <- d*shadow + (1-d)*param."""

    def __init__(self, named_params, decay: float = 0.9999, shadow: dict | None = None):
        if not 0.0 < decay <= 1.0:
            raise ConfigError(f"ema decay must lie in (0, 1], got {decay}")
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.decay = decay
        if shadow is None:
            self.shadow = {name: p.data.copy() for name, p in self.params}
        else:
            self.load_state(shadow)

    def update(self) -> None:
        d = self.decay
        for name, p in self.params:
            s = self.shadow[name]
            np.multiply(s, d, out=s)
            s += (1.0 - d) * p.data

    def state(self) -> dict[str, np.ndarray]:
        return self.shadow

    def load_state(self, shadow: dict[str, np.ndarray]) -> None:
        for name, p in self.params:
            if name not in shadow:
                raise DimensionError(f"ema state missing parameter {name!r}")
            if shadow[name].shape != p.data.shape:
                raise DimensionError(
                    f"ema shape mismatch for {name!r}: "
                    f"{shadow[name].shape} vs {p.data.shape}"
                )
        self.shadow = {name: np.asarray(shadow[name]) for name, _ in self.params}

    @contextlib.contextmanager
    def swapped_in(self):
        """Temporarily replace live parameter values with the EMA shadows."""
        backup = {name: p.data for name, p in self.params}
        for name, p in self.params:
            p.data = self.shadow[name]
        try:
            yield
        finally:
            for name, p in self.params:
                p.data = backup[name]


# -- toy dataset -------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDataSpec:
    """Generator settings for the two-class stripe set."""

    n_images: int = 1024
    image_size: int = 16
    channels: int = 1
    num_classes: int = 2
    noise: float = 0.2
    stripe_period: int = 4
    amplitude: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.n_images < 1:
            raise ConfigError(f"n_images must be positive, got {self.n_images}")
        if self.image_size < 4 or self.image_size % 4:
            raise ConfigError(
                f"image_size must be a positive multiple of 4, got {self.image_size}"
            )
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.num_classes != 2:
            raise ConfigError("the stripe set defines exactly two classes")
        if self.stripe_period < 2 or self.stripe_period % 2:
            raise ConfigError(f"stripe_period must be even and >= 2, got {self.stripe_period}")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise must lie in [0, 1], got {self.noise}")
        if not 0.0 < self.amplitude <= 1.0:
            raise ConfigError(f"amplitude must lie in (0, 1], got {self.amplitude}")


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    spec: ToyDataSpec | None = None


def make_toy_data(spec: ToyDataSpec) -> ToyDataset:
    """Two-class stripe images: class 0 varies along columns (vertical bars),
    class 1 along rows, plus Gaussian pixel noise, clipped to [-1, 1]."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, size = spec.n_images, spec.image_size
    labels = (np.arange(n) % spec.num_classes).astype(np.int64)
    half = spec.stripe_period // 2
    phases = rng.integers(0, spec.stripe_period, n)
    idx = np.arange(size)
    # Integer square wave: +A for half a period, -A for the next half.
    wave = np.where(((idx[None, :] + phases[:, None]) // half) % 2 == 0, 1.0, -1.0)
    wave = (wave * spec.amplitude).astype(np.float32)
    base = np.where(
        (labels == 0)[:, None, None],
        np.broadcast_to(wave[:, None, :], (n, size, size)),
        np.broadcast_to(wave[:, :, None], (n, size, size)),
    )
    images = base[:, None, :, :] + rng.normal(0.0, spec.noise, (n, 1, size, size))
    images = np.clip(images, -1.0, 1.0).astype(np.float32)
    images = np.repeat(images, spec.channels, axis=1)
    return ToyDataset(images=images, labels=labels, spec=spec)


def hflip_augment(batch: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Mirror each image along width independently with probability p."""
    if batch.ndim != 4:
        raise DimensionError(f"batch must be rank-4, got rank {batch.ndim}")
    if p <= 0.0:
        return batch
    flip = rng.random(batch.shape[0]) < p
    out = batch.copy()
    out[flip] = out[flip][:, :, :, ::-1]
    return out


# -- training loop --------------------------------------------------------------------


def train_step(
    model: DiCoModel,
    batch: tuple[np.ndarray, np.ndarray],
    sched: DiffusionSchedule,
    opt: AdamW,
    ema: Ema,
    rng: np.random.Generator,
    clip_x0: bool = True,
) -> tuple[float, float]:
    """One optimization step on a batch; returns (l_simple, l_vlb) as floats."""
    images, labels = batch
    n = images.shape[0]
    t = rng.integers(0, sched.T, n)
    eps = Tensor(rng.standard_normal(images.shape).astype(images.dtype))
    x0 = Tensor(np.ascontiguousarray(images))
    xt = q_sample(x0, t, eps, sched)
    out = model.forward(xt, t, labels, train=True, rng=rng)
    terms = losses(out, x0, xt, t, eps, sched, clip_x0=clip_x0)
    if not np.isfinite(terms.hybrid.data).all():
        raise NumericError("non-finite training loss")
    opt.zero_grad()
    backward(terms.hybrid)
    opt.step()
    ema.update()
    return float(terms.simple.item()), float(terms.vlb.item())


def train_loop(
    model: DiCoModel,
    dataset: ToyDataset,
    sched: DiffusionSchedule,
    opt: AdamW,
    ema: Ema,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    hflip_prob: float = 0.5,
    log_fn=None,
) -> list[tuple[int, float, float]]:
    """Seed-deterministic training; returns (step, l_simple, l_vlb) history."""
    n = dataset.images.shape[0]
    history = []
    for step in range(steps):
        idx = rng.integers(0, n, batch_size)
        images = hflip_augment(dataset.images[idx], rng, hflip_prob)
        labels = dataset.labels[idx]
        try:
            l_simple, l_vlb = train_step(model, (images, labels), sched, opt, ema, rng)
        except NumericError as exc:
            raise NumericError(f"training aborted at step {step}: {exc}") from exc
        history.append((step, l_simple, l_vlb))
        if log_fn is not None:
            log_fn(step, l_simple, l_vlb)
    return history
