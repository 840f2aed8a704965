"""Command-line surface: train, sample, probe, analyze, compare.

Every training run directory is self-contained: resolved_config.json, a copy
of the dataset, metrics.jsonl, and checkpoints. The other subcommands locate
the dataset next to the checkpoint they are given unless --dataset overrides.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import torch

from .alignment import NonFiniteLossError
from .archive import ArchiveError, save_archive
from .config import ConfigError, load_run_config, resolve_run_config, write_resolved_config
from .data import ShapesDataset, generate_shapes, load_dataset, save_dataset
from .diagnostics import ProbeConfig, frechet_proxy, probe_grid
from .process import FLOW
from .sampler import SampleConfig, sample_state
from .trainer import CheckpointError, TrainerState, load_checkpoint, train_loop


def obtain_dataset(descriptor: dict) -> ShapesDataset:
    kind = descriptor.get("kind", "shapes")
    if kind == "shapes":
        return generate_shapes(
            num=int(descriptor.get("num", 4096)),
            num_classes=int(descriptor.get("num_classes", 4)),
            seed=int(descriptor.get("seed", 0)),
            height=int(descriptor.get("height", 16)),
            width=int(descriptor.get("width", 16)),
        )
    if kind == "file":
        return load_dataset(descriptor["path"])
    raise ConfigError(f"unknown dataset kind {descriptor.get('kind')!r}")


def _dataset_near_checkpoint(checkpoint: Path, explicit: str | None) -> ShapesDataset:
    if explicit:
        return load_dataset(explicit)
    candidate = checkpoint.parent / "dataset.ntar"
    if candidate.exists():
        return load_dataset(candidate)
    raise FileNotFoundError(
        f"no dataset.ntar next to {checkpoint}; pass --dataset explicitly"
    )


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _parse_time_list(text: str, family: str) -> tuple:
    vals = [float(v) for v in text.split(",") if v]
    return tuple(int(v) if family != FLOW else v for v in vals)


def _default_probe_cells(state: TrainerState) -> tuple[tuple[int, ...], tuple]:
    if state.align_config is not None:
        layers = (state.align_config.student_layer, state.align_config.teacher_layer)
    else:
        layers = (max(1, state.model_config.depth // 4), state.model_config.depth)
    timesteps = (0.25,) if state.family == FLOW else (250,)
    return layers, timesteps


def _image_grid(samples: torch.Tensor):
    from PIL import Image
    import numpy as np

    n = samples.shape[0]
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    _, c, h, w = samples.shape
    canvas = torch.zeros(rows * h, cols * w)
    for i in range(n):
        r, col = divmod(i, cols)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = samples[i, 0]
    arr = ((canvas.clamp(-1, 1) + 1) * 127.5).round().byte().numpy()
    return Image.fromarray(np.asarray(arr), mode="L")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    overrides = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.total_steps is not None:
        overrides["train"] = {**config.to_dict()["train"], "total_steps": args.total_steps}
    if overrides or args.baseline:
        raw = config.to_dict()
        raw.update({k: v for k, v in overrides.items() if k != "train"})
        if "train" in overrides:
            raw["train"] = overrides["train"]
        if args.baseline:
            raw["align"] = None
        config = resolve_run_config(raw)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir / "resolved_config.json")
    dataset = obtain_dataset(config.dataset)
    expected = (config.model.channels, config.model.input_height, config.model.input_width)
    if tuple(dataset.images.shape[1:]) != expected:
        raise ConfigError(
            f"dataset images {tuple(dataset.images.shape[1:])} do not match model input {expected}"
        )
    save_dataset(dataset, out_dir / "dataset.ntar")

    if args.resume:
        state = load_checkpoint(args.resume, expected_model_config=config.model)
        if args.total_steps is not None:
            from dataclasses import replace as dc_replace

            state.train_config = dc_replace(state.train_config, total_steps=args.total_steps)
    else:
        state = TrainerState(
            config.model, config.train, config.align,
            family=config.family, interpolant_kind=config.interpolant,
        )
    final = train_loop(state, dataset.images, dataset.labels, out_dir)
    print(f"trained {state.step} steps -> {final}")
    return 0


def cmd_sample(args) -> int:
    state = load_checkpoint(args.checkpoint)
    config = SampleConfig(
        family=state.family,
        num_steps=args.steps,
        guidance_scale=args.guidance,
        sde_mode=args.mode,
        seed=args.seed,
        num_samples=args.num,
        class_id=args.class_id,
    )
    samples = sample_state(state, config, use_teacher=not args.use_student)
    out = Path(args.out)
    labels = torch.full((config.num_samples,), -1 if args.class_id is None else args.class_id)
    metadata = {
        "checkpoint": str(args.checkpoint),
        "family": state.family,
        "num_steps": config.num_steps,
        "guidance_scale": config.guidance_scale,
        "sde_mode": config.sde_mode,
        "seed": config.seed,
        "class_id": config.class_id,
        "model": "student" if args.use_student else "teacher",
    }
    save_archive(out, {"samples": samples, "class_ids": labels}, metadata=metadata)
    if args.grid:
        _image_grid(samples).save(args.grid)
        print(f"wrote image grid {args.grid}")
    print(f"wrote {config.num_samples} samples -> {out}")
    return 0


def cmd_probe(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = _dataset_near_checkpoint(Path(args.checkpoint), args.dataset)
    default_layers, default_times = _default_probe_cells(state)
    layers = _parse_int_list(args.layers) if args.layers else default_layers
    timesteps = _parse_time_list(args.timesteps, state.family) if args.timesteps else default_times
    models = {}
    for name in args.models.split(","):
        if name not in ("student", "teacher"):
            raise ConfigError(f"unknown model role {name!r}")
        models[name] = getattr(state, name)
    report, _ = probe_grid(
        models, dataset.images, dataset.labels, layers, timesteps,
        state.noiser(), ProbeConfig(epochs=args.epochs), seed=args.seed,
    )
    report.to_csv(args.out)
    for cell in report.cells:
        print(f"{cell.model} layer {cell.layer} t={cell.timestep}: accuracy {cell.accuracy:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_analyze(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = _dataset_near_checkpoint(Path(args.checkpoint), args.dataset)
    default_layers, default_times = _default_probe_cells(state)
    layers = _parse_int_list(args.layers) if args.layers else default_layers
    timesteps = _parse_time_list(args.timesteps, state.family) if args.timesteps else default_times
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report, pca = probe_grid(
        {"student": state.student, "teacher": state.teacher},
        dataset.images, dataset.labels, layers, timesteps,
        state.noiser(), ProbeConfig(epochs=args.epochs), seed=args.seed,
        collect_pca=args.pca_components,
    )
    report.to_csv(out_dir / "probe_report.csv")
    record = {
        "checkpoint": str(args.checkpoint),
        "layers": list(layers),
        "timesteps": list(timesteps),
        "family": state.family,
        "probe_epochs": args.epochs,
        "seed": args.seed,
        "step": state.step,
    }
    (out_dir / "analysis_metadata.json").write_text(json.dumps(record, indent=2) + "\n")
    if pca:
        save_archive(out_dir / "pca_artifacts.ntar", pca, metadata=record)
    for cell in report.cells:
        print(f"{cell.model} layer {cell.layer} t={cell.timestep}: accuracy {cell.accuracy:.4f}")
    print(f"wrote {out_dir / 'probe_report.csv'}")
    return 0


def _score_run(state, reference: ShapesDataset, layers, times, num: int, steps: int, seed: int, probe_epochs: int):
    labels = torch.arange(num, dtype=torch.long) % state.model_config.num_classes
    config = SampleConfig(family=state.family, num_steps=steps, seed=seed, num_samples=num)
    samples = sample_state(state, config, class_ids=labels)
    scores = frechet_proxy(samples, reference.images)
    report, _ = probe_grid(
        {"student": state.student}, reference.images, reference.labels,
        layers, times, state.noiser(), ProbeConfig(epochs=probe_epochs), seed=seed,
    )
    return scores, report


def cmd_compare(args) -> int:
    run_a, run_b = Path(args.run_a), Path(args.run_b)
    reference = _dataset_near_checkpoint(run_a / "checkpoint_final.ntar", args.dataset)
    state_a = load_checkpoint(run_a / "checkpoint_final.ntar")
    state_b = load_checkpoint(run_b / "checkpoint_final.ntar")
    # probe both runs at one cell set: an aligned run's layer pair if either has one
    layers, times = _default_probe_cells(state_b if state_b.align_config is not None else state_a)
    scores_a, report_a = _score_run(state_a, reference, layers, times, args.num, args.steps, args.seed, args.epochs)
    scores_b, report_b = _score_run(state_b, reference, layers, times, args.num, args.steps, args.seed, args.epochs)

    rows = []
    for key in ("pixel", "projected"):
        rows.append((f"frechet_{key}", scores_a[key], scores_b[key]))
    for layer in layers:
        for t in times:
            rows.append(
                (f"probe_layer{layer}_t{t}",
                 report_a.accuracy("student", layer, float(t)),
                 report_b.accuracy("student", layer, float(t)))
            )
    with open(args.out, "w") as f:
        f.write("metric,run_a,run_b,delta\n")
        for name, a, b in rows:
            f.write(f"{name},{a!r},{b!r},{b - a!r}\n")
            print(f"{name}: run_a={a:.6g} run_b={b:.6g} delta={b - a:.6g}")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline", action="store_true", help="disable the alignment objective")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--total-steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_id", type=int, default=None)
    p.add_argument("--num", type=int, default=16)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--mode", choices=("ode", "sde_wt_sigma"), default="ode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--use-student", action="store_true", help="sample the student instead of the EMA teacher")
    p.add_argument("--out", default="samples.ntar")
    p.add_argument("--grid", default=None, help="also write an 8-bit PNG grid here")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("probe", help="linear-probe accuracies for layer/timestep cells")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", default=None, help="comma-separated block indices")
    p.add_argument("--timesteps", default=None, help="comma-separated times")
    p.add_argument("--models", default="student,teacher")
    p.add_argument("--dataset", default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="probe_report.csv")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="probe grid plus PCA artifacts for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", default=None)
    p.add_argument("--timesteps", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pca-components", type=int, default=2)
    p.add_argument("--out", default="analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="distribution distance and probe deltas between two runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--num", type=int, default=512, help="samples per run for the distance proxy")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="compare.csv")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArchiveError, CheckpointError, NonFiniteLossError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
