"""Self-alignment machinery: EMA teacher, projection head, and the auxiliary
loss that pulls a student's early-layer tokens (computed at higher noise)
toward the teacher's later-layer tokens (computed at lower noise).

Gradient flows only through the student branch: the teacher runs under
no_grad and its tap is detached again inside the loss; the teacher's weights
move only by exponential moving average of the student's.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import DiffusionTransformer
from .process import FLOW, TimeSpec

DISTANCES = ("smooth_l1", "l2", "l1")
EMA_SCHEDULES = ("constant", "cosine")


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term stops being finite; the training step must abort."""


@dataclass(frozen=True)
class AlignConfig:
    """Knobs of the auxiliary alignment objective.

    ``student_layer``/``teacher_layer`` and ``interval_max`` may be left None
    to be filled from the model depth and family defaults via :func:`resolve`.
    """

    student_layer: int | None = None
    teacher_layer: int | None = None
    interval_max: float | None = None
    weight: float = 0.2
    ema_alpha: float = 0.9999
    use_projection_head: bool = True
    distance: str = "smooth_l1"
    smooth_l1_beta: float = 1.0
    per_sample_interval: bool = False
    share_noise: bool = True
    ema_schedule: str = "constant"
    ema_cosine_start: float = 0.996
    tap_point: str = "post_block"

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("alignment weight must be nonnegative")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie in [0, 1)")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if self.ema_schedule not in EMA_SCHEDULES:
            raise ValueError(f"ema_schedule must be one of {EMA_SCHEDULES}")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")
        if self.student_layer is not None and self.teacher_layer is not None:
            if not 1 <= self.student_layer <= self.teacher_layer:
                raise ValueError(
                    f"need 1 <= student_layer <= teacher_layer; "
                    f"got {self.student_layer} -> {self.teacher_layer}"
                )
        if self.interval_max is not None and self.interval_max < 0:
            raise ValueError("interval_max must be nonnegative")

    def resolve(self, depth: int, family: str) -> "AlignConfig":
        """Fill layer pair / interval defaults and validate against the model."""
        m, n = default_layer_pair(depth, family)
        cfg = replace(
            self,
            student_layer=self.student_layer if self.student_layer is not None else m,
            teacher_layer=self.teacher_layer if self.teacher_layer is not None else n,
            interval_max=self.interval_max
            if self.interval_max is not None
            else (0.2 if family == FLOW else 200),
        )
        if not 1 <= cfg.student_layer <= cfg.teacher_layer <= depth:
            raise ValueError(
                f"layer pair {cfg.student_layer} -> {cfg.teacher_layer} illegal for depth {depth}"
            )
        return cfg


def default_layer_pair(depth: int, family: str) -> tuple[int, int]:
    """Scale the reference 12-layer pairs (3 -> 8 flow, 3 -> 7 denoise) to ``depth``."""
    student = max(1, round(depth * 3 / 12))
    teacher = round(depth * (8 if family == FLOW else 7) / 12)
    return student, min(max(teacher, student), depth)


def ema_alpha_at(cfg: AlignConfig, step: int, total_steps: int) -> float:
    """Teacher momentum for this step; constant by default, optional cosine ramp to 1."""
    if cfg.ema_schedule == "constant":
        return cfg.ema_alpha
    total = max(1, total_steps)
    progress = min(max(step / total, 0.0), 1.0)
    start = cfg.ema_cosine_start
    return 1.0 - (1.0 - start) * (math.cos(math.pi * progress) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# Teacher
# ---------------------------------------------------------------------------


def make_teacher(student: DiffusionTransformer) -> DiffusionTransformer:
    """Exact frozen copy of the student; the only updates it ever sees are EMA blends."""
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(teacher_params: dict[str, Tensor], student_params: dict[str, Tensor], alpha: float) -> None:
    """In-place blend: teacher <- alpha * teacher + (1 - alpha) * student."""
    if teacher_params.keys() != student_params.keys():
        missing = set(teacher_params) ^ set(student_params)
        raise ValueError(f"parameter sets differ; mismatched names: {sorted(missing)}")
    for name, t_param in teacher_params.items():
        s_param = student_params[name]
        if t_param.shape != s_param.shape:
            raise ValueError(
                f"parameter {name!r} shape mismatch: {tuple(t_param.shape)} vs {tuple(s_param.shape)}"
            )
        t_param.mul_(alpha).add_(s_param, alpha=1.0 - alpha)


def ema_update_module(teacher: nn.Module, student: nn.Module, alpha: float) -> None:
    ema_update(dict(teacher.named_parameters()), dict(student.named_parameters()), alpha)


# ---------------------------------------------------------------------------
# Projection head
# ---------------------------------------------------------------------------


class ProjectionHead(nn.Module):
    """Two affine layers with SiLU between, applied independently to every token.

    Student-only: it is never mirrored into the teacher, and it can be thrown
    away after training without touching the backbone.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.net[0].in_features:
            raise ValueError(
                f"token dim {tokens.shape[-1]} does not match head dim {self.net[0].in_features}"
            )
        return self.net(tokens)


def init_projection_head(head: ProjectionHead, generator: torch.Generator) -> None:
    with torch.no_grad():
        for layer in (head.net[0], head.net[2]):
            fan_out, fan_in = layer.weight.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            layer.weight.uniform_(-bound, bound, generator=generator)
            layer.bias.zero_()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def alignment_loss(
    teacher_tap: Tensor,
    projected_student: Tensor,
    distance: str = "smooth_l1",
    smooth_l1_beta: float = 1.0,
) -> Tensor:
    """Patch-wise distance between teacher tokens and the projected student tokens.

    The per-patch distance is the mean over the channel axis of the pointwise
    kernel; the result averages over batch and patches. The teacher side is
    detached: gradient reaches only the student branch.
    """
    if teacher_tap.shape != projected_student.shape:
        raise ValueError(
            f"shape mismatch: teacher {tuple(teacher_tap.shape)} vs "
            f"student {tuple(projected_student.shape)}"
        )
    diff = projected_student - teacher_tap.detach()
    if distance == "smooth_l1":
        beta = smooth_l1_beta
        absdiff = diff.abs()
        pointwise = torch.where(absdiff < beta, 0.5 * diff * diff / beta, absdiff - 0.5 * beta)
    elif distance == "l2":
        pointwise = diff * diff
    elif distance == "l1":
        pointwise = diff.abs()
    else:
        raise ValueError(f"distance must be one of {DISTANCES}")
    return pointwise.mean()


def joint_loss(gen_loss: Tensor, align_loss: Tensor, weight: float) -> Tensor:
    """Total objective gen + weight * align; rejects non-finite inputs."""
    for name, value in (("generative", gen_loss), ("alignment", align_loss)):
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NonFiniteLossError(f"{name} loss is not finite: {value}")
    return gen_loss + weight * align_loss


# ---------------------------------------------------------------------------
# Paired student/teacher forward
# ---------------------------------------------------------------------------


def alignment_taps(
    student: DiffusionTransformer,
    teacher: DiffusionTransformer,
    noiser,
    spec: TimeSpec,
    cfg: AlignConfig,
    x0: Tensor,
    eps: Tensor,
    t,
    class_ids: Tensor,
    k,
    teacher_eps: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """One aligned pair of passes.

    Student: forward on x_t at time t, tapping ``student_layer`` (gradients on).
    Teacher: forward on x_{max(t-k, 0)} with the same (possibly dropped) class
    labels, stopping at ``teacher_layer``. By default the teacher input reuses
    the student's noise draw, so both inputs lie on one noising path.

    ``noiser(x0, eps, t)`` builds the family's noised sample. Returns
    (student prediction, student tap, detached teacher tap).
    """
    from .process import teacher_timestep

    x_t = noiser(x0, eps, t)
    pred, taps = student.forward_with_taps(
        x_t, _model_time(t, x0), class_ids, tap_layers=(cfg.student_layer,), tap_point=cfg.tap_point
    )
    t_teacher = teacher_timestep(spec, t, k)
    eps_star = eps if cfg.share_noise else teacher_eps
    if eps_star is None:
        raise ValueError("share_noise=False requires an explicit teacher noise draw")
    with torch.no_grad():
        x_star = noiser(x0, eps_star, t_teacher)
        _, teacher_taps = teacher.forward_with_taps(
            x_star,
            _model_time(t_teacher, x0),
            class_ids,
            tap_layers=(cfg.teacher_layer,),
            stop_after_layer=cfg.teacher_layer,
            tap_point=cfg.tap_point,
        )
    return pred, taps[cfg.student_layer], teacher_taps[cfg.teacher_layer].detach()


def _model_time(t, like: Tensor) -> Tensor:
    tt = torch.as_tensor(t)
    if tt.ndim == 0:
        tt = tt.expand(like.shape[0])
    return tt
