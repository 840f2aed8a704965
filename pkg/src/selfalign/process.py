"""Forward-process math for both model families.

Two time parameterizations live side by side:

- ``flow``: continuous t in [0, 1], data at t=0, noise at t=1, driven by an
  interpolant pair (alpha_t, sigma_t). The network regresses the velocity
  alpha_dot_t * x0 + sigma_dot_t * eps.
- ``denoise``: discrete t in [0, T), driven by a per-step variance schedule
  beta_t. The network regresses the injected noise eps.

All functions are pure; randomness enters only through explicit generators.
Per-sample time tensors of shape [B] are accepted everywhere a scalar t is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import Tensor

FLOW = "flow"
DENOISE = "denoise"
FAMILIES = (FLOW, DENOISE)


def _as_time(t, like: Tensor) -> Tensor:
    """Coerce scalar or [B] time to a tensor broadcastable against ``like``."""
    tt = torch.as_tensor(t, dtype=like.dtype)
    if tt.ndim == 0:
        return tt
    if tt.ndim != 1 or tt.shape[0] != like.shape[0]:
        raise ValueError(f"time must be scalar or [batch]; got shape {tuple(tt.shape)}")
    return tt.view(-1, *([1] * (like.ndim - 1)))


# ---------------------------------------------------------------------------
# Continuous interpolants (flow family)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interpolant:
    """A noising path x_t = alpha(t) * x0 + sigma(t) * eps on t in [0, 1].

    Valid interpolants satisfy alpha(0)=1, sigma(0)=0, alpha(1)=0, sigma(1)=1,
    alpha^2 + sigma^2 > 0 everywhere, and both coefficients differentiable.
    """

    kind: str
    alpha: Callable[[Tensor], Tensor]
    sigma: Callable[[Tensor], Tensor]
    alpha_dot: Callable[[Tensor], Tensor]
    sigma_dot: Callable[[Tensor], Tensor]

    def validate(self, num_points: int = 257) -> None:
        """Check boundary conditions and positivity on a grid; raise if violated."""
        t = torch.linspace(0.0, 1.0, num_points, dtype=torch.float64)
        a, s = self.alpha(t), self.sigma(t)
        for name, value, want in [
            ("alpha(0)", float(a[0]), 1.0),
            ("sigma(0)", float(s[0]), 0.0),
            ("alpha(1)", float(a[-1]), 0.0),
            ("sigma(1)", float(s[-1]), 1.0),
        ]:
            if abs(value - want) > 1e-9:
                raise ValueError(f"interpolant {self.kind}: {name}={value}, expected {want}")
        if not bool(((a * a + s * s) > 0).all()):
            raise ValueError(f"interpolant {self.kind}: alpha^2 + sigma^2 not positive everywhere")


def linear_interpolant() -> Interpolant:
    return Interpolant(
        kind="linear",
        alpha=lambda t: 1.0 - torch.as_tensor(t),
        sigma=lambda t: torch.as_tensor(t) * 1.0,
        alpha_dot=lambda t: -torch.ones_like(torch.as_tensor(t)),
        sigma_dot=lambda t: torch.ones_like(torch.as_tensor(t)),
    )


def vp_interpolant() -> Interpolant:
    half_pi = math.pi / 2.0
    return Interpolant(
        kind="variance_preserving",
        alpha=lambda t: torch.cos(half_pi * torch.as_tensor(t)),
        sigma=lambda t: torch.sin(half_pi * torch.as_tensor(t)),
        alpha_dot=lambda t: -half_pi * torch.sin(half_pi * torch.as_tensor(t)),
        sigma_dot=lambda t: half_pi * torch.cos(half_pi * torch.as_tensor(t)),
    )


_INTERPOLANTS = {"linear": linear_interpolant, "variance_preserving": vp_interpolant}


def make_interpolant(kind: str) -> Interpolant:
    if kind not in _INTERPOLANTS:
        raise ValueError(f"unknown interpolant kind {kind!r}; options: {sorted(_INTERPOLANTS)}")
    return _INTERPOLANTS[kind]()


def _check_pair(x0: Tensor, eps: Tensor) -> None:
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")


def _check_unit_range(t) -> None:
    tt = torch.as_tensor(t, dtype=torch.float64)
    if bool((tt < 0).any()) or bool((tt > 1).any()):
        raise ValueError(f"flow time must lie in [0, 1]; got {t}")


def interpolant_sample(interp: Interpolant, x0: Tensor, eps: Tensor, t) -> Tensor:
    """Noised sample alpha(t) * x0 + sigma(t) * eps."""
    _check_pair(x0, eps)
    _check_unit_range(t)
    tt = _as_time(t, x0)
    return interp.alpha(tt) * x0 + interp.sigma(tt) * eps


def velocity_target(interp: Interpolant, x0: Tensor, eps: Tensor, t) -> Tensor:
    """Regression target alpha_dot(t) * x0 + sigma_dot(t) * eps."""
    _check_pair(x0, eps)
    _check_unit_range(t)
    tt = _as_time(t, x0)
    return interp.alpha_dot(tt) * x0 + interp.sigma_dot(tt) * eps


# ---------------------------------------------------------------------------
# Discrete schedules (denoise family)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta[t] with cached alpha[t] = 1 - beta[t] and
    alpha_bar[t] = prod_{i<=t} alpha[i], for t in [0, T)."""

    beta: Tensor
    alpha: Tensor = field(init=False)
    alpha_bar: Tensor = field(init=False)

    def __post_init__(self):
        beta = torch.as_tensor(self.beta, dtype=torch.float64)
        if beta.ndim != 1 or beta.numel() == 0:
            raise ValueError("beta must be a non-empty 1-D tensor")
        if bool((beta <= 0).any()) or bool((beta >= 1).any()):
            raise ValueError("all beta[t] must lie in (0, 1)")
        alpha = 1.0 - beta
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", torch.cumprod(alpha, dim=0))

    @property
    def num_steps(self) -> int:
        return self.beta.shape[0]


def linear_beta_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """The conventional linear variance ramp the discrete baseline uses."""
    return NoiseSchedule(torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64))


def constant_beta_schedule(beta: float, num_steps: int) -> NoiseSchedule:
    return NoiseSchedule(torch.full((num_steps,), float(beta), dtype=torch.float64))


def _check_step_range(t, num_steps: int) -> Tensor:
    tt = torch.as_tensor(t)
    if tt.is_floating_point():
        if not bool(torch.equal(tt, tt.round())):
            raise ValueError(f"discrete time must be integral; got {t}")
        tt = tt.long()
    if bool((tt < 0).any()) or bool((tt >= num_steps).any()):
        raise ValueError(f"discrete time must lie in [0, {num_steps}); got {t}")
    return tt


def ddpm_forward_marginal(schedule: NoiseSchedule, x0: Tensor, eps: Tensor, t) -> Tensor:
    """Closed-form noised sample sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps."""
    _check_pair(x0, eps)
    tt = _check_step_range(t, schedule.num_steps)
    ab = schedule.alpha_bar[tt].to(x0.dtype)
    ab = _as_time(ab, x0) if ab.ndim else ab
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def noise_prediction_loss(predicted_eps: Tensor, true_eps: Tensor) -> Tensor:
    """Mean squared error over every element."""
    _check_pair(predicted_eps, true_eps)
    return ((predicted_eps - true_eps) ** 2).mean()


def velocity_loss(predicted_v: Tensor, target_v: Tensor) -> Tensor:
    """Mean squared error over every element (same contract as noise loss)."""
    return noise_prediction_loss(predicted_v, target_v)


# ---------------------------------------------------------------------------
# Time sampling and the teacher's lagged time
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSpec:
    """Family plus the lag bound for teacher inputs.

    ``interval_max`` is in family units: a real for flow (default 0.2), an
    integer step count for denoise (default 200).
    """

    family: str
    interval_max: float = 0.2
    num_steps: int = 1000  # only meaningful for the denoise family

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}; got {self.family!r}")
        if self.interval_max < 0:
            raise ValueError("interval_max must be nonnegative")
        if self.family == DENOISE and self.num_steps < 1:
            raise ValueError("num_steps must be positive")


def default_time_spec(family: str) -> TimeSpec:
    if family == FLOW:
        return TimeSpec(FLOW, interval_max=0.2)
    return TimeSpec(DENOISE, interval_max=200, num_steps=1000)


def sample_timesteps(spec: TimeSpec, n: int, generator: torch.Generator) -> Tensor:
    """n training times: Uniform[0,1) for flow, UniformInteger[0,T) for denoise."""
    if spec.family == FLOW:
        return torch.rand(n, generator=generator, dtype=torch.float64).float()
    return torch.randint(0, spec.num_steps, (n,), generator=generator)


def draw_interval(spec: TimeSpec, generator: torch.Generator, n: int = 1):
    """Lag(s) k in [0, interval_max), one uniform draw each.

    Always consumes exactly n draws so runs with alignment disabled can keep
    their stream aligned with runs that use it. Denoise lags are floored to
    integers.
    """
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    if spec.family == FLOW:
        k = u * spec.interval_max
        return float(k[0]) if n == 1 else k.float()
    k = torch.floor(u * spec.interval_max).long()
    return int(k[0]) if n == 1 else k


def teacher_timestep(spec: TimeSpec, t, k):
    """The teacher's time max(t - k, 0), truncated at zero, in family units."""
    kt = torch.as_tensor(k, dtype=torch.float64)
    if bool((kt < 0).any()):
        raise ValueError("interval k must be nonnegative")
    if spec.family == FLOW:
        _check_unit_range(t)
        out = torch.clamp(torch.as_tensor(t, dtype=torch.float64) - kt, min=0.0)
        return float(out) if out.ndim == 0 else out.float()
    tt = _check_step_range(t, spec.num_steps)
    out = torch.clamp(tt - torch.as_tensor(k).long(), min=0)
    return int(out) if out.ndim == 0 else out
