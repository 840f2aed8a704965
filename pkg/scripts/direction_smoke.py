"""Reduced-scale baseline-vs-aligned direction experiment.

Runs the tiny preset on the shapes dataset for a few thousand steps per arm
and reports, per seed: final distribution-distance proxies, the student-layer
probe accuracy, and (for the aligned arm) the teacher/student probe trace.

This is a fast analogue of the full small-preset experiment, for machines
where the full version's multi-hour-per-arm cost is impractical. Run the full
version with --preset small --steps 20000 --batch 64.
"""

import argparse
import json
import time
from pathlib import Path

import torch

import selfalign as sa
from selfalign.alignment import AlignConfig
from selfalign.diagnostics import ProbeConfig
from selfalign.experiments import run_arm


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/direction_smoke")
    parser.add_argument("--preset", default="tiny")
    parser.add_argument("--steps", type=int, default=2500)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--seeds", default="101,202,303")
    parser.add_argument("--dataset-size", type=int, default=4096)
    parser.add_argument("--probe-from", type=int, default=1000)
    parser.add_argument("--probe-every", type=int, default=200)
    parser.add_argument("--probe-timestep", type=float, default=0.25)
    parser.add_argument("--score-samples", type=int, default=512)
    parser.add_argument("--score-steps", type=int, default=50)
    parser.add_argument(
        "--ema-alpha", type=float, default=0.9999,
        help="teacher momentum; for short smoke runs 0.999 keeps the EMA "
        "catch-up horizon proportionate to the step budget",
    )
    args = parser.parse_args()

    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = sa.generate_shapes(args.dataset_size, 4, seed=1234)
    model_cfg = sa.preset_config(args.preset)
    align = AlignConfig(weight=0.2, ema_alpha=args.ema_alpha).resolve(model_cfg.depth, "flow")
    layers = (align.student_layer, align.teacher_layer)
    probe_cfg = ProbeConfig(epochs=20)
    summary_path = out / "summary.jsonl"

    for seed in [int(s) for s in args.seeds.split(",")]:
        for arm_name, arm_align, probe_every in (
            ("aligned", align, args.probe_every),
            ("baseline", None, 0),
        ):
            t0 = time.time()
            train_cfg = sa.TrainConfig(
                batch_size=args.batch, total_steps=args.steps, seed=seed,
                log_every=100, checkpoint_every=0, ema_alpha=args.ema_alpha,
            )
            result = run_arm(
                out / f"seed{seed}_{arm_name}", model_cfg, train_cfg, arm_align,
                "flow", dataset,
                probe_layers=layers, probe_timestep=args.probe_timestep,
                probe_config=probe_cfg, probe_from=args.probe_from,
                probe_every=probe_every, probe_subset=768,
                score_samples=args.score_samples, score_steps=args.score_steps,
            )
            record = {
                "seed": seed,
                "arm": arm_name,
                "minutes": round((time.time() - t0) / 60, 2),
                **result.to_dict(),
            }
            with open(summary_path, "a") as f:
                f.write(json.dumps(record) + "\n")
            print(json.dumps(record), flush=True)


if __name__ == "__main__":
    main()
