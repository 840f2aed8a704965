"""Paired baseline-vs-aligned training runs with representation tracking.

One "arm" trains a model (with or without the alignment objective), probing
the student's aligned layer and the teacher's target layer at a fixed cadence,
then scores the final model by the pixel/projected distribution distance of
its samples against the training data plus the student-layer probe accuracy.
Running both arms over several seeds gives the desk-scale direction check:
does alignment improve the distance proxy and the probed representation?
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .alignment import AlignConfig
from .backbone import ModelConfig
from .data import ShapesDataset
from .diagnostics import ProbeConfig, frechet_proxy, linear_probe, extract_features, probe_grid
from .rng import make_generator
from .sampler import SampleConfig, sample_state
from .trainer import TrainConfig, TrainerState, train_loop


@dataclass
class ProbeTracePoint:
    step: int
    student_accuracy: float
    teacher_accuracy: float


@dataclass
class ArmResult:
    run_dir: str
    frechet_pixel: float
    frechet_projected: float
    student_probe_accuracy: float
    trace: list[ProbeTracePoint] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "run_dir": self.run_dir,
            "frechet_pixel": self.frechet_pixel,
            "frechet_projected": self.frechet_projected,
            "student_probe_accuracy": self.student_probe_accuracy,
            "trace": [[p.step, p.student_accuracy, p.teacher_accuracy] for p in self.trace],
        }


def probe_pair(
    state: TrainerState,
    dataset: ShapesDataset,
    student_layer: int,
    teacher_layer: int,
    timestep,
    probe_config: ProbeConfig,
    seed: int,
    subset: int = 0,
) -> tuple[float, float]:
    """(student accuracy at its layer, teacher accuracy at its layer)."""
    images, labels = dataset.images, dataset.labels
    if subset and subset < images.shape[0]:
        images, labels = images[:subset], labels[:subset]
    accs = []
    for name, model, layer in (
        ("student", state.student, student_layer),
        ("teacher", state.teacher, teacher_layer),
    ):
        feats = extract_features(
            model, images, layer, timestep, state.noiser(),
            make_generator(seed, "trace-features", name, layer, str(timestep)),
        )
        accs.append(
            linear_probe(feats, labels, probe_config, make_generator(seed, "trace-probe", name, layer))
        )
    return accs[0], accs[1]


def run_arm(
    out_dir,
    model_config: ModelConfig,
    train_config: TrainConfig,
    align_config: AlignConfig | None,
    family: str,
    dataset: ShapesDataset,
    probe_layers: tuple[int, int],
    probe_timestep,
    probe_config: ProbeConfig = ProbeConfig(),
    probe_from: int = 0,
    probe_every: int = 0,
    probe_subset: int = 1024,
    score_samples: int = 1024,
    score_steps: int = 50,
) -> ArmResult:
    """Train one arm to completion and score it."""
    out_dir = Path(out_dir)
    state = TrainerState(model_config, train_config, align_config, family=family)
    trace: list[ProbeTracePoint] = []

    def callback(st: TrainerState, step: int) -> None:
        if probe_every > 0 and step >= probe_from and step % probe_every == 0:
            s_acc, t_acc = probe_pair(
                st, dataset, probe_layers[0], probe_layers[1], probe_timestep,
                probe_config, train_config.seed, subset=probe_subset,
            )
            trace.append(ProbeTracePoint(step, s_acc, t_acc))
            with open(out_dir / "probe_trace.jsonl", "a") as f:
                f.write(json.dumps({"step": step, "student": s_acc, "teacher": t_acc}) + "\n")

    train_loop(
        state, dataset.images, dataset.labels, out_dir,
        step_callback=callback if probe_every > 0 else None,
        callback_every=probe_every if probe_every > 0 else 0,
    )

    labels = torch.arange(score_samples, dtype=torch.long) % model_config.num_classes
    sample_cfg = SampleConfig(
        family=family, num_steps=score_steps, seed=train_config.seed, num_samples=score_samples
    )
    samples = sample_state(state, sample_cfg, class_ids=labels)
    scores = frechet_proxy(samples, dataset.images)

    report, _ = probe_grid(
        {"student": state.student}, dataset.images, dataset.labels,
        (probe_layers[0],), (probe_timestep,), state.noiser(), probe_config,
        seed=train_config.seed,
    )
    result = ArmResult(
        run_dir=str(out_dir),
        frechet_pixel=scores["pixel"],
        frechet_projected=scores["projected"],
        student_probe_accuracy=report.cells[0].accuracy,
        trace=trace,
    )
    (out_dir / "arm_result.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    return result
