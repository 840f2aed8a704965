"""Declarative run configuration: one JSON document resolves to model, train,
alignment and sampling configs plus a dataset descriptor. Every field has a
default, and the resolved form written next to a run's outputs replays to an
identical run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .alignment import AlignConfig
from .backbone import ModelConfig, preset_config
from .process import DENOISE, FLOW
from .sampler import SampleConfig
from .trainer import TrainConfig

DEFAULT_DATASET = {"kind": "shapes", "num": 4096, "num_classes": 4, "seed": 0}


class ConfigError(ValueError):
    """The configuration document cannot be resolved."""


@dataclass(frozen=True)
class RunConfig:
    family: str
    interpolant: str
    model: ModelConfig
    train: TrainConfig
    align: AlignConfig | None
    sample: SampleConfig
    dataset: dict
    out_dir: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "interpolant": self.interpolant,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": dict(self.dataset),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "align": asdict(self.align) if self.align is not None else None,
            "sample": asdict(self.sample),
        }


def resolve_run_config(raw: dict | None = None) -> RunConfig:
    """Fill every field from defaults, then cross-validate."""
    raw = dict(raw or {})
    known = {"family", "interpolant", "seed", "out_dir", "dataset", "preset", "model", "train", "align", "sample"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    family = raw.get("family", FLOW)
    if family not in (FLOW, DENOISE):
        raise ConfigError(f"family must be '{FLOW}' or '{DENOISE}'; got {family!r}")
    interpolant = raw.get("interpolant", "linear")
    seed = int(raw.get("seed", 0))
    out_dir = str(raw.get("out_dir", "runs/run"))
    dataset = {**DEFAULT_DATASET, **raw.get("dataset", {})}

    try:
        model_kwargs = dict(raw.get("model", {}))
        preset = raw.get("preset")
        model = preset_config(preset, **model_kwargs) if preset else ModelConfig(**model_kwargs)
        if dataset["kind"] == "shapes":
            model = replace(model, num_classes=int(dataset["num_classes"]))
            dataset.setdefault("height", model.input_height)
            dataset.setdefault("width", model.input_width)
            if (int(dataset["height"]), int(dataset["width"])) != (model.input_height, model.input_width):
                raise ConfigError(
                    f"dataset geometry {dataset['height']}x{dataset['width']} does not match "
                    f"model input {model.input_height}x{model.input_width}"
                )
            if model.channels != 1:
                raise ConfigError("the shapes dataset is single-channel; set model channels to 1")

        train_kwargs = {"seed": seed, **raw.get("train", {})}
        train = TrainConfig(**train_kwargs)

        align_raw = raw.get("align", {})
        align = None if align_raw is None else AlignConfig(**align_raw).resolve(model.depth, family)

        sample_kwargs = {"family": family, "seed": seed, **raw.get("sample", {})}
        if sample_kwargs["family"] != family:
            raise ConfigError("sampler family must match the training family")
        sample = SampleConfig(**sample_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        family=family,
        interpolant=interpolant,
        model=model,
        train=train,
        align=align,
        sample=sample,
        dataset=dataset,
        out_dir=out_dir,
        seed=seed,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return resolve_run_config(raw)


def write_resolved_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
