"""Generation.

Denoise family: ancestral sampling over a (possibly respaced) discrete
schedule with the fixed posterior variance, no noise on the final step.

Flow family: integrate from t=1 down to t=0 on a uniform grid. In ODE mode
each step is plain Euler on the velocity field. In SDE mode the drift gains
the score correction -w_t/2 * score and the step gains sqrt(w_t * h) noise,
with w_t = sigma_t by default; the score is recovered from the velocity via
the interpolant identity

    score(x, t) = (alpha * v - alpha_dot * x) / (sigma * (alpha_dot * sigma - alpha * sigma_dot))

which needs guarding only below t = 1/num_steps where sigma vanishes. The
final step never adds noise.

Every sample owns an rng stream derived from (seed, sample index), so results
do not depend on chunking and are reproducible sample-by-sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from .process import FLOW, DENOISE, Interpolant, NoiseSchedule
from .rng import make_generator

SDE_MODES = ("ode", "sde_wt_sigma")

Predictor = Callable[[Tensor, Tensor, Tensor], Tensor]  # (x, t, class_ids) -> field


@dataclass(frozen=True)
class SampleConfig:
    family: str = FLOW
    num_steps: int = 250
    guidance_scale: float = 1.0  # 1.0 = guidance off
    sde_mode: str = "ode"
    seed: int = 0
    num_samples: int = 16
    class_id: int | None = None  # None = unconditional
    chunk_size: int = 64

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")
        if self.guidance_scale < 1.0:
            raise ValueError("guidance_scale must be >= 1")
        if self.sde_mode not in SDE_MODES:
            raise ValueError(f"sde_mode must be one of {SDE_MODES}")
        if self.num_samples < 1 or self.chunk_size < 1:
            raise ValueError("num_samples and chunk_size must be positive")


def cfg_combine(cond_pred: Tensor, uncond_pred: Tensor, w: float) -> Tensor:
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    if cond_pred.shape != uncond_pred.shape:
        raise ValueError(
            f"shape mismatch: cond {tuple(cond_pred.shape)} vs uncond {tuple(uncond_pred.shape)}"
        )
    return uncond_pred + w * (cond_pred - uncond_pred)


def guided_predictor(model: torch.nn.Module, null_id: int, w: float) -> Predictor:
    """Wrap a backbone as a predictor; w > 1 runs the conditional/unconditional
    pair and extrapolates."""

    def predict(x: Tensor, t: Tensor, class_ids: Tensor) -> Tensor:
        if w == 1.0:
            return model(x, t, class_ids)
        cond = model(x, t, class_ids)
        uncond = model(x, t, torch.full_like(class_ids, null_id))
        return cfg_combine(cond, uncond, w)

    return predict


def _per_sample_noise(
    config: SampleConfig, indices: range, shape: tuple[int, ...], steps: int, dtype: torch.dtype
) -> tuple[Tensor, Tensor | None]:
    """Initial noise [len, *shape] and per-step noises [len, steps, *shape]."""
    init, traj = [], []
    for i in indices:
        g = make_generator(config.seed, "sample", i)
        init.append(torch.randn(shape, generator=g, dtype=dtype))
        if steps > 0:
            traj.append(torch.randn((steps, *shape), generator=g, dtype=dtype))
    return torch.stack(init), (torch.stack(traj) if steps > 0 else None)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield range(start, min(start + size, n))


# ---------------------------------------------------------------------------
# Denoise family
# ---------------------------------------------------------------------------


def respaced_steps(num_schedule_steps: int, num_sample_steps: int) -> Tensor:
    """Evenly spaced schedule indices, descending, always containing 0."""
    if num_sample_steps > num_schedule_steps:
        raise ValueError("cannot take more sampling steps than schedule steps")
    idx = torch.linspace(0, num_schedule_steps - 1, num_sample_steps, dtype=torch.float64)
    return idx.round().long().unique().flip(0)


@torch.no_grad()
def ddpm_sample(
    predict: Predictor,
    schedule: NoiseSchedule,
    sample_shape: tuple[int, ...],
    class_ids: Tensor,
    config: SampleConfig,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Ancestral sampling with the noise-predicting model."""
    steps = respaced_steps(schedule.num_steps, config.num_steps)
    alpha_bar = schedule.alpha_bar[steps].to(dtype)  # descending in t
    prev_bar = torch.cat([schedule.alpha_bar[steps[1:]].to(dtype), torch.ones(1, dtype=dtype)])
    beta = 1.0 - alpha_bar / prev_bar
    posterior_var = (1.0 - prev_bar) / (1.0 - alpha_bar) * beta

    out = []
    for indices in _chunks(config.num_samples, config.chunk_size):
        x, traj = _per_sample_noise(config, indices, sample_shape, len(steps) - 1, dtype)
        ids = class_ids[indices.start : indices.stop]
        for j, t in enumerate(steps):
            t_batch = torch.full((x.shape[0],), int(t), dtype=torch.long)
            eps_hat = predict(x, t_batch, ids)
            mean = (x - beta[j] / torch.sqrt(1.0 - alpha_bar[j]) * eps_hat) / torch.sqrt(1.0 - beta[j])
            if j < len(steps) - 1:
                x = mean + torch.sqrt(posterior_var[j]) * traj[:, j]
            else:
                x = mean  # final step is deterministic
        out.append(x)
    return torch.cat(out)


# ---------------------------------------------------------------------------
# Flow family
# ---------------------------------------------------------------------------


def sample_state(state, config: SampleConfig, class_ids: Tensor | None = None, use_teacher: bool = True) -> Tensor:
    """Generate from a trainer state (the EMA teacher by default, the usual
    evaluation convention). ``class_ids`` defaults to all-``config.class_id``
    or unconditional."""
    model = state.teacher if use_teacher else state.student
    model.eval()
    cfg = state.model_config
    if class_ids is None:
        fill = cfg.null_class_id if config.class_id is None else int(config.class_id)
        if not 0 <= fill <= cfg.num_classes:
            raise ValueError(f"class id {fill} outside [0, {cfg.num_classes}]")
        class_ids = torch.full((config.num_samples,), fill, dtype=torch.long)
    if class_ids.shape[0] != config.num_samples:
        raise ValueError("class_ids must have num_samples entries")
    predict = guided_predictor(model, cfg.null_class_id, config.guidance_scale)
    shape = (cfg.channels, cfg.input_height, cfg.input_width)
    dtype = next(model.parameters()).dtype
    if config.family == DENOISE:
        if state.schedule is None:
            raise ValueError("denoise sampling needs a noise schedule")
        return ddpm_sample(predict, state.schedule, shape, class_ids, config, dtype)
    if state.interpolant is None:
        raise ValueError("flow sampling needs an interpolant")
    return euler_flow_sample(predict, state.interpolant, shape, class_ids, config, dtype=dtype)


def velocity_to_score(interp: Interpolant, x: Tensor, v: Tensor, t: Tensor) -> Tensor:
    """Closed-form score of the marginal at time t from the velocity field."""
    a, s = interp.alpha(t), interp.sigma(t)
    a_dot, s_dot = interp.alpha_dot(t), interp.sigma_dot(t)
    return (a * v - a_dot * x) / (s * (a_dot * s - a * s_dot))


@torch.no_grad()
def euler_flow_sample(
    predict: Predictor,
    interp: Interpolant,
    sample_shape: tuple[int, ...],
    class_ids: Tensor,
    config: SampleConfig,
    diffusion_fn: Callable[[float], float] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Integrate the reverse-time dynamics from t=1 to t=0.

    ``diffusion_fn`` overrides w_t (mainly for tests); by default sde mode uses
    w_t = sigma_t and ode mode uses 0.
    """
    n = config.num_steps
    h = 1.0 / n
    sde = config.sde_mode == "sde_wt_sigma" or diffusion_fn is not None
    if diffusion_fn is None:
        diffusion_fn = (lambda t: float(interp.sigma(torch.tensor(t, dtype=torch.float64)))) if sde else (lambda t: 0.0)

    out = []
    for indices in _chunks(config.num_samples, config.chunk_size):
        x, traj = _per_sample_noise(config, indices, sample_shape, n - 1 if sde else 0, dtype)
        ids = class_ids[indices.start : indices.stop]
        for j in range(n):
            t = 1.0 - j * h
            t_batch = torch.full((x.shape[0],), t, dtype=dtype)
            v = predict(x, t_batch, ids)
            w = diffusion_fn(t)
            last = j == n - 1
            # score guarded below 1/num_steps where sigma -> 0
            if sde and w != 0.0 and t >= h:
                tt = torch.tensor(t, dtype=dtype)
                drift = v - 0.5 * w * velocity_to_score(interp, x, v, tt)
            else:
                drift = v
            x = x - h * drift
            if sde and w != 0.0 and not last:
                x = x + (w * h) ** 0.5 * traj[:, j]
        out.append(x)
    return torch.cat(out)
