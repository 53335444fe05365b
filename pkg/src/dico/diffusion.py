"""Gaussian diffusion: forward noising, posterior, learned-variance losses,
classifier-free guidance, and the respaced ancestral sampler.

Schedule arrays are kept in float64; coefficients are cast to the operand
dtype at lookup so float32 training paths stay float32.  The variance head
output v is squashed by f(v) = (v + 1) / 2 and interpolates the log-variance
between the posterior floor log(beta_tilde) and the forward ceiling
log(beta).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .modules import DiCoModel, NetOutput
from .tensor import Tensor, no_grad, normal_cdf, where


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed schedule arrays (float64, length T) plus respacing indices."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray
    sqrt_recip_alpha_bar: np.ndarray
    sqrt_recipm1_alpha_bar: np.ndarray
    log_beta: np.ndarray
    posterior_var: np.ndarray
    log_posterior_var_clipped: np.ndarray
    posterior_mean_coef1: np.ndarray
    posterior_mean_coef2: np.ndarray
    respaced_indices: np.ndarray = field(compare=False)


def _schedule_from_betas(beta: np.ndarray, respaced_indices: np.ndarray) -> DiffusionSchedule:
    T = beta.shape[0]
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    # beta_tilde_0 is zero by construction; clip the log at the t=1 value.
    log_posterior_var_clipped = np.log(
        np.concatenate([[posterior_var[1]], posterior_var[1:]]) if T > 1 else np.array([beta[0]])
    )
    return DiffusionSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        sqrt_recip_alpha_bar=np.sqrt(1.0 / alpha_bar),
        sqrt_recipm1_alpha_bar=np.sqrt(1.0 / alpha_bar - 1.0),
        log_beta=np.log(beta),
        posterior_var=posterior_var,
        log_posterior_var_clipped=log_posterior_var_clipped,
        posterior_mean_coef1=np.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar),
        posterior_mean_coef2=np.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar),
        respaced_indices=respaced_indices,
    )


def make_schedule(
    kind: str = "linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    num_respaced: int | None = None,
) -> DiffusionSchedule:
    """Build a noise schedule; respaced indices always include 0 and T-1."""
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}; only 'linear' is supported")
    if T < 1:
        raise ConfigError(f"T must be positive, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    if num_respaced is None:
        num_respaced = T
    if not 1 <= num_respaced <= T:
        raise ConfigError(f"num_respaced must lie in [1, {T}], got {num_respaced}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    if num_respaced == 1:
        respaced = np.array([0], dtype=np.int64)
    else:
        # Spacing is >= 1, so rounded values are strictly increasing.
        respaced = np.round(np.linspace(0.0, T - 1.0, num_respaced)).astype(np.int64)
    return _schedule_from_betas(beta, respaced)


def respaced_view(sched: DiffusionSchedule) -> tuple[DiffusionSchedule, np.ndarray]:
    """The sub-schedule over respaced indices, plus the original-step mapping.

    When every step is kept, the original schedule is returned unchanged so
    respacing at num_respaced = T is step-for-step identical to no respacing.
    """
    idx = sched.respaced_indices
    if idx.shape[0] == sched.T:
        return sched, np.arange(sched.T, dtype=np.int64)
    abar = sched.alpha_bar[idx]
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    beta_r = 1.0 - abar / abar_prev
    sub = _schedule_from_betas(beta_r, np.arange(idx.shape[0], dtype=np.int64))
    return sub, idx


def _coef(arr: np.ndarray, t: np.ndarray, dtype) -> Tensor:
    """Gather arr[t] as an (n, 1, 1, 1) constant tensor of the operand dtype."""
    return Tensor(arr[t].astype(dtype).reshape(-1, 1, 1, 1))


def _check_t(t: np.ndarray, T: int) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 1 or not np.issubdtype(t.dtype, np.integer):
        raise UsageError("timesteps must be a 1-D integer array")
    if t.size and (t.min() < 0 or t.max() >= T):
        raise UsageError(f"timesteps must lie in [0, {T})")
    return t


def q_sample(x0: Tensor, t: np.ndarray, eps: Tensor, sched: DiffusionSchedule) -> Tensor:
    """Forward noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    t = _check_t(t, sched.T)
    if eps.shape != x0.shape:
        raise DimensionError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
    c1 = _coef(sched.sqrt_alpha_bar, t, x0.dtype)
    c2 = _coef(sched.sqrt_one_minus_alpha_bar, t, x0.dtype)
    return x0 * c1 + eps * c2


def posterior_mean_var(
    x0: Tensor, xt: Tensor, t: np.ndarray, sched: DiffusionSchedule
) -> tuple[Tensor, np.ndarray]:
    """True posterior q(x_{t-1} | x_t, x_0): mean tensor and variance beta_tilde_t."""
    t = _check_t(t, sched.T)
    if t.size and t.min() < 1:
        raise UsageError("posterior is undefined at t=0 (no previous step)")
    mean = x0 * _coef(sched.posterior_mean_coef1, t, x0.dtype) + xt * _coef(
        sched.posterior_mean_coef2, t, xt.dtype
    )
    var = sched.posterior_var[t].reshape(-1, 1, 1, 1)
    return mean, var


def model_mean_var(
    out: NetOutput,
    xt: Tensor,
    t: np.ndarray,
    sched: DiffusionSchedule,
    clip_x0: bool = True,
) -> tuple[Tensor, Tensor]:
    """Reverse-step mean and log-variance from a network output.

    The mean routes through the recovered x0 estimate; the log-variance
    interpolates between log(beta_tilde_t) and log(beta_t) via f(v)=(v+1)/2.
    Valid at every t including 0, where the mean reduces to the x0 estimate.
    """
    t = _check_t(t, sched.T)
    x0_hat = xt * _coef(sched.sqrt_recip_alpha_bar, t, xt.dtype) - out.eps * _coef(
        sched.sqrt_recipm1_alpha_bar, t, xt.dtype
    )
    if clip_x0:
        x0_hat = x0_hat.clip(-1.0, 1.0)
    mean = x0_hat * _coef(sched.posterior_mean_coef1, t, xt.dtype) + xt * _coef(
        sched.posterior_mean_coef2, t, xt.dtype
    )
    f = (out.v + 1.0) * 0.5
    log_var = f * _coef(sched.log_beta, t, xt.dtype) + (f * (-1.0) + 1.0) * _coef(
        sched.log_posterior_var_clipped, t, xt.dtype
    )
    return mean, log_var


def gaussian_kl(mean1: Tensor, logvar1: Tensor, mean2: Tensor, logvar2: Tensor) -> Tensor:
    """KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) elementwise, in nats.

    Identical inputs give exactly zero: every term cancels bitwise.
    """
    delta = mean1 - mean2
    return (
        (logvar2 - logvar1) + (logvar1 - logvar2).exp() + delta * delta * (logvar2 * -1.0).exp()
        - 1.0
    ) * 0.5


def discretized_gaussian_nll(x: Tensor, mean: Tensor, log_var: Tensor) -> Tensor:
    """Negative log-likelihood of data in [-1, 1] under a 256-bin discretized Gaussian.

    Edge bins integrate to the open tails, matching an 8-bit decoder.  Returns
    nats elementwise; gradient flows through mean and log_var only.
    """
    x = x.detach()
    centered = x - mean
    inv_std = (log_var * -0.5).exp()
    bin_half = 1.0 / 255.0
    cdf_plus = normal_cdf((centered + bin_half) * inv_std)
    cdf_min = normal_cdf((centered - bin_half) * inv_std)
    log_cdf_plus = cdf_plus.clip(1e-12, 1.0).log()
    log_one_minus_cdf_min = (cdf_min * -1.0 + 1.0).clip(1e-12, 1.0).log()
    log_cdf_delta = (cdf_plus - cdf_min).clip(1e-12, 2.0).log()
    xd = x.data
    log_probs = where(
        xd < -0.999, log_cdf_plus, where(xd > 0.999, log_one_minus_cdf_min, log_cdf_delta)
    )
    return log_probs * -1.0


class LossTerms(NamedTuple):
    simple: Tensor
    vlb: Tensor
    hybrid: Tensor


def losses(
    out: NetOutput,
    x0: Tensor,
    xt: Tensor,
    t: np.ndarray,
    eps: Tensor,
    sched: DiffusionSchedule,
    vlb_weight: float = 0.001,
    clip_x0: bool = True,
) -> LossTerms:
    """The hybrid objective: mean-squared noise error plus a weighted VLB term.

    The VLB term is a per-step Gaussian KL in nats for t >= 1 and the
    discretized decoder NLL at t = 0; its mean path is detached so the
    variance head trains without disturbing the noise prediction.
    """
    t = _check_t(t, sched.T)
    diff = out.eps - eps
    l_simple = (diff * diff).mean()

    frozen = NetOutput(out.eps.detach(), out.v)
    mean, log_var = model_mean_var(frozen, xt.detach(), t, sched, clip_x0=clip_x0)
    q_mean = x0.detach() * _coef(sched.posterior_mean_coef1, t, x0.dtype) + xt.detach() * _coef(
        sched.posterior_mean_coef2, t, xt.dtype
    )
    q_log_var = _coef(sched.log_posterior_var_clipped, t, x0.dtype)
    kl = gaussian_kl(q_mean, q_log_var, mean, log_var).mean(axis=(1, 2, 3))
    nll = discretized_gaussian_nll(x0, mean, log_var).mean(axis=(1, 2, 3))
    at_zero = (t == 0).reshape(-1, 1, 1, 1)
    l_vlb = where(at_zero, nll, kl).mean()

    l_hybrid = l_simple + l_vlb * vlb_weight
    return LossTerms(simple=l_simple, vlb=l_vlb, hybrid=l_hybrid)


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance settings; scale 1 collapses to the conditional pass."""

    scale: float = 1.0
    enabled: bool = False

    def __post_init__(self):
        if self.enabled and self.scale < 1.0:
            warnings.warn(
                f"guidance scale {self.scale} < 1 weakens conditioning; allowed but unusual",
                stacklevel=2,
            )


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, scale: float) -> Tensor:
    """eps_uncond + scale * (eps_cond - eps_uncond); scale 1 returns eps_cond as is."""
    if eps_cond.shape != eps_uncond.shape:
        raise DimensionError(
            f"guidance inputs must share a shape, got {eps_cond.shape} and {eps_uncond.shape}"
        )
    if scale == 1.0:
        return eps_cond
    if scale < 1.0:
        warnings.warn(f"guidance scale {scale} < 1 weakens conditioning", stacklevel=2)
    return eps_uncond + (eps_cond - eps_uncond) * scale


def p_sample_loop(
    model: DiCoModel,
    shape: tuple[int, int, int, int],
    labels: np.ndarray,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    guidance: GuidanceConfig | None = None,
    clip_x0: bool = True,
    progress: Callable[[int, int], None] | None = None,
) -> np.ndarray:
    """Ancestral sampling over the respaced schedule, from pure noise to x0.

    The model always receives original-schedule timestep values; posterior
    arithmetic uses the respaced sub-schedule.  No noise is added at the
    final step.
    """
    if guidance is None:
        guidance = GuidanceConfig()
    n = shape[0]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    sub, orig_t = respaced_view(sched)
    null_labels = np.full(n, model.config.null_label, dtype=np.int64)
    with no_grad():
        x = Tensor(rng.standard_normal(shape).astype(np.float32))
        for i in reversed(range(sub.T)):
            t_model = np.full(n, orig_t[i], dtype=np.int64)
            out = model.forward(x, t_model, labels)
            if guidance.enabled:
                out_uncond = model.forward(x, t_model, null_labels)
                eps = cfg_combine(out.eps, out_uncond.eps, guidance.scale)
                out = NetOutput(eps=eps, v=out.v)
            t_sub = np.full(n, i, dtype=np.int64)
            mean, log_var = model_mean_var(out, x, t_sub, sub, clip_x0=clip_x0)
            if i > 0:
                noise = Tensor(rng.standard_normal(shape).astype(np.float32))
                x = mean + (log_var * 0.5).exp() * noise
            else:
                x = mean
            if progress is not None:
                progress(sub.T - i, sub.T)
    return x.data
