"""Training loop: batching, the fixed step order, checkpointing, metrics.

Step order is pinned and load-bearing:

    1. draw times t and noise eps, build the noised batch
    2. student forward (with the alignment tap when enabled)
    3. teacher forward at the lagged time, no gradients
    4. joint loss
    5. backward
    6. clip the global gradient norm
    7. optimizer step on student + projection head
    8. EMA-blend the teacher toward the post-update student

All randomness for step s comes from a generator derived from (seed, "step", s)
and batch content is a pure function of (seed, step), so training resumes from
a checkpoint bit-exactly and two runs with one seed are identical. A run with
alignment weight 0 consumes the training stream in exactly the same order as a
baseline run, so their parameter trajectories match bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
from torch import Tensor

from . import process
from .alignment import (
    AlignConfig,
    ProjectionHead,
    alignment_loss,
    alignment_taps,
    ema_alpha_at,
    ema_update_module,
    init_projection_head,
    joint_loss,
    make_teacher,
)
from .archive import load_archive, save_archive
from .backbone import ModelConfig, apply_label_dropout, build_model
from .process import DENOISE, FLOW, NoiseSchedule, TimeSpec, linear_beta_schedule, make_interpolant
from .rng import make_generator

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unusable checkpoint: wrong format, wrong config, missing tensors."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    total_steps: int = 1000
    grad_clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    ema_alpha: float = 0.9999  # teacher momentum for baseline runs (no align config)
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be positive and total_steps nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive (use inf to disable)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64


@dataclass
class MetricsRecord:
    step: int
    gen_loss: float
    align_loss: float
    joint_loss: float
    grad_norm: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainBatch:
    """Everything random a step consumes from the data side."""

    x0: Tensor
    labels: Tensor
    t: Tensor
    eps: Tensor


class TrainerState:
    """Student, projection head, EMA teacher, optimizer, and step counter."""

    def __init__(
        self,
        model_config: ModelConfig,
        train_config: TrainConfig,
        align_config: AlignConfig | None,
        family: str,
        interpolant_kind: str = "linear",
        schedule: NoiseSchedule | None = None,
    ):
        if family not in (FLOW, DENOISE):
            raise ValueError(f"family must be '{FLOW}' or '{DENOISE}'")
        self.model_config = model_config
        self.train_config = train_config
        self.family = family
        self.interpolant_kind = interpolant_kind
        self.interpolant = make_interpolant(interpolant_kind) if family == FLOW else None
        self.schedule = schedule if schedule is not None else (linear_beta_schedule() if family == DENOISE else None)
        if align_config is not None:
            align_config = align_config.resolve(model_config.depth, family)
        self.align_config = align_config

        dtype = train_config.torch_dtype
        seed = train_config.seed
        self.student = build_model(model_config, seed, dtype)
        self.head: ProjectionHead | None = None
        if align_config is not None and align_config.use_projection_head:
            self.head = ProjectionHead(model_config.hidden_dim)
            init_projection_head(self.head, make_generator(seed, "head-init"))
            self.head.to(dtype)
        self.teacher = make_teacher(self.student)
        self.optimizer = self._build_optimizer()
        self.step = 0

    def _build_optimizer(self) -> torch.optim.AdamW:
        cfg = self.train_config
        return torch.optim.AdamW(
            [p for _, p in self.trainable_parameters()],
            lr=cfg.learning_rate,
            betas=(cfg.beta1, cfg.beta2),
            weight_decay=cfg.weight_decay,
            foreach=False,
        )

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        """(name, param) pairs in optimizer order: student first, then head."""
        pairs = [(f"student.{n}", p) for n, p in self.student.named_parameters() if p.requires_grad]
        if self.head is not None:
            pairs += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        return pairs

    @property
    def time_spec(self) -> TimeSpec:
        interval = self.align_config.interval_max if self.align_config is not None else None
        if self.family == FLOW:
            return TimeSpec(FLOW, interval_max=0.2 if interval is None else interval)
        return TimeSpec(
            DENOISE,
            interval_max=200 if interval is None else interval,
            num_steps=self.schedule.num_steps,
        )

    def noiser(self) -> Callable:
        if self.family == FLOW:
            interp = self.interpolant
            return lambda x0, eps, t: process.interpolant_sample(interp, x0, eps, t)
        schedule = self.schedule
        return lambda x0, eps, t: process.ddpm_forward_marginal(schedule, x0, eps, t)

    def generative_target(self, batch: TrainBatch) -> Tensor:
        if self.family == FLOW:
            return process.velocity_target(self.interpolant, batch.x0, batch.eps, batch.t)
        return batch.eps

    def ema_alpha(self) -> float:
        if self.align_config is not None:
            return ema_alpha_at(self.align_config, self.step, self.train_config.total_steps)
        return self.train_config.ema_alpha

    @property
    def align_active(self) -> bool:
        return self.align_config is not None and self.align_config.weight > 0


def make_train_batch(images: Tensor, labels: Tensor, state: TrainerState, step: int, generator: torch.Generator) -> TrainBatch:
    """Minibatch for a given step; a pure function of (seed, step, dataset).

    Examples are visited in per-epoch permutations derived from (seed, epoch);
    a batch that straddles an epoch boundary takes the tail of one permutation
    and the head of the next.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    batch = state.train_config.batch_size
    seed = state.train_config.seed
    start = step * batch
    chunks = []
    count = 0
    while count < batch:
        epoch, pos = divmod(start + count, n)
        perm = torch.randperm(n, generator=make_generator(seed, "data", epoch))
        take = min(batch - count, n - pos)
        chunks.append(perm[pos : pos + take])
        count += take
    index = torch.cat(chunks)
    dtype = state.train_config.torch_dtype
    x0 = images[index].to(dtype)
    t = process.sample_timesteps(state.time_spec, batch, generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=dtype)
    return TrainBatch(x0=x0, labels=labels[index].clone(), t=t, eps=eps)


def train_step(state: TrainerState, batch: TrainBatch, generator: torch.Generator) -> MetricsRecord:
    """One optimization step in the pinned order; raises NonFiniteLossError
    (with parameters untouched) if the loss degenerates."""
    cfg = state.train_config
    model_cfg = state.model_config
    spec = state.time_spec

    labels = apply_label_dropout(
        batch.labels, model_cfg.label_dropout_prob, model_cfg.null_class_id, generator
    )
    # The lag draw happens every step even when alignment is off, to keep the
    # rng stream of a weight-0 run identical to the baseline's.
    per_sample = state.align_config is not None and state.align_config.per_sample_interval
    k = process.draw_interval(spec, generator, n=cfg.batch_size if per_sample else 1)

    align = torch.zeros((), dtype=cfg.torch_dtype)
    if state.align_active:
        acfg = state.align_config
        teacher_eps = None
        if not acfg.share_noise:
            teacher_eps = torch.randn(batch.eps.shape, generator=generator, dtype=cfg.torch_dtype)
        pred, student_tap, teacher_tap = alignment_taps(
            state.student, state.teacher, state.noiser(), spec, acfg,
            batch.x0, batch.eps, batch.t, labels, k, teacher_eps,
        )
        projected = state.head(student_tap) if state.head is not None else student_tap
        align = alignment_loss(teacher_tap, projected, acfg.distance, acfg.smooth_l1_beta)
    else:
        x_t = state.noiser()(batch.x0, batch.eps, batch.t)
        pred, _ = state.student.forward_with_taps(x_t, batch.t, labels)

    target = state.generative_target(batch)
    gen = process.velocity_loss(pred, target) if state.family == FLOW else process.noise_prediction_loss(pred, target)
    weight = state.align_config.weight if state.align_config is not None else 0.0
    total = joint_loss(gen, align, weight)

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(
        [p for _, p in state.trainable_parameters()], cfg.grad_clip_norm
    )
    state.optimizer.step()
    ema_update_module(state.teacher, state.student, state.ema_alpha())
    state.step += 1
    return MetricsRecord(
        step=state.step,
        gen_loss=float(gen.detach()),
        align_loss=float(align.detach()),
        joint_loss=float(total.detach()),
        grad_norm=float(grad_norm),
        wall_time=0.0,
    )


def train_loop(
    state: TrainerState,
    images: Tensor,
    labels: Tensor,
    out_dir,
    step_callback: Callable[[TrainerState, int], None] | None = None,
    callback_every: int = 0,
) -> Path:
    """Run from state.step to total_steps; returns the final checkpoint path.

    Writes ``metrics.jsonl`` (one record per log_every steps, plus the final
    step) and ``checkpoint_step*.ntar`` at the configured cadence. Resuming
    from any checkpoint continues the identical trajectory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = state.train_config
    metrics_path = out_dir / "metrics.jsonl"
    t0 = time.time()

    if state.step == 0:
        save_checkpoint(state, out_dir / "checkpoint_step0000000.ntar")
    with open(metrics_path, "a") as log:
        for step in range(state.step, cfg.total_steps):
            g = make_generator(cfg.seed, "step", step)
            batch = make_train_batch(images, labels, state, step, g)
            record = train_step(state, batch, g)
            record.wall_time = time.time() - t0
            if record.step % cfg.log_every == 0 or record.step == cfg.total_steps:
                log.write(record.to_json() + "\n")
                log.flush()
            if cfg.checkpoint_every > 0 and record.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_step{record.step:07d}.ntar")
            if step_callback is not None and callback_every > 0 and record.step % callback_every == 0:
                step_callback(state, record.step)
    if cfg.total_steps == 0:
        return out_dir / "checkpoint_step0000000.ntar"
    final = out_dir / "checkpoint_final.ntar"
    save_checkpoint(state, final)
    return final


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainerState, path) -> None:
    tensors: dict[str, Tensor] = {}
    for name, value in state.student.state_dict().items():
        tensors[f"student.{name}"] = value
    for name, value in state.teacher.state_dict().items():
        tensors[f"teacher.{name}"] = value
    if state.head is not None:
        for name, value in state.head.state_dict().items():
            tensors[f"head.{name}"] = value
    for name, param in state.trainable_parameters():
        opt_state = state.optimizer.state.get(param)
        if opt_state:
            tensors[f"optim.{name}.step"] = opt_state["step"]
            tensors[f"optim.{name}.exp_avg"] = opt_state["exp_avg"]
            tensors[f"optim.{name}.exp_avg_sq"] = opt_state["exp_avg_sq"]
    if state.schedule is not None:
        tensors["schedule.beta"] = state.schedule.beta
    metadata = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "family": state.family,
        "interpolant_kind": state.interpolant_kind,
        "model_config": asdict(state.model_config),
        "train_config": asdict(state.train_config),
        "align_config": asdict(state.align_config) if state.align_config is not None else None,
    }
    save_archive(path, tensors, metadata)


def load_checkpoint(path, expected_model_config: ModelConfig | None = None) -> TrainerState:
    tensors, metadata = load_archive(path)
    if metadata.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {metadata.get('format_version')}")
    model_config = ModelConfig(**metadata["model_config"])
    if expected_model_config is not None and model_config != expected_model_config:
        raise CheckpointError(
            f"{path}: checkpoint model config {metadata['model_config']} does not match expected "
            f"{asdict(expected_model_config)}"
        )
    train_config = TrainConfig(**metadata["train_config"])
    align_config = AlignConfig(**metadata["align_config"]) if metadata["align_config"] else None
    schedule = NoiseSchedule(tensors["schedule.beta"]) if "schedule.beta" in tensors else None
    state = TrainerState(
        model_config,
        train_config,
        align_config,
        family=metadata["family"],
        interpolant_kind=metadata["interpolant_kind"],
        schedule=schedule,
    )
    state.step = int(metadata["step"])

    def _extract(prefix: str) -> dict[str, Tensor]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix)}

    _load_module(state.student, _extract("student."), path, "student")
    _load_module(state.teacher, _extract("teacher."), path, "teacher")
    if state.head is not None:
        _load_module(state.head, _extract("head."), path, "head")
    dtype = train_config.torch_dtype
    for name, param in state.trainable_parameters():
        key = f"optim.{name}.step"
        if key in tensors:
            state.optimizer.state[param] = {
                "step": tensors[key].clone(),
                "exp_avg": tensors[f"optim.{name}.exp_avg"].to(dtype),
                "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].to(dtype),
            }
    return state


def _load_module(module: torch.nn.Module, found: dict[str, Tensor], path, part: str) -> None:
    expected = module.state_dict()
    if set(found) != set(expected):
        missing = sorted(set(expected) ^ set(found))
        raise CheckpointError(f"{path}: {part} tensors do not match model; offending names: {missing}")
    dtype = next(iter(expected.values())).dtype
    module.load_state_dict({k: v.to(dtype) for k, v in found.items()})
