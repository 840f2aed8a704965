"""Representation diagnostics: linear probing of layer/timestep features,
PCA projections, and a Gaussian Fréchet distance as a desk-scale stand-in for
learned-feature distribution metrics.

Features are spatially pooled token activations of noised inputs; probing
standardizes them with train-split statistics (frozen at eval) and fits an
affine softmax classifier. The Fréchet proxy is reported both on raw pixel
statistics and on a fixed seeded random projection of pixels, so no external
pretrained encoder is involved anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg as scipy_linalg
from torch import Tensor

from .backbone import DiffusionTransformer
from .rng import make_generator


class MatrixSqrtError(RuntimeError):
    """The covariance product square root failed to converge."""


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3  # cosine-decayed to zero over the epochs
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


@torch.no_grad()
def extract_features(
    model: DiffusionTransformer,
    images: Tensor,
    tap_layer: int,
    timestep,
    noiser,
    generator: torch.Generator,
    batch_size: int = 128,
    tap_point: str = "post_block",
) -> Tensor:
    """Per-sample features: token-mean of the tap at ``tap_layer`` on inputs
    noised to ``timestep``. Noise is drawn per sample from ``generator``."""
    dtype = next(model.parameters()).dtype
    feats = []
    for start in range(0, images.shape[0], batch_size):
        x0 = images[start : start + batch_size].to(dtype)
        eps = torch.randn(x0.shape, generator=generator, dtype=dtype)
        x_t = noiser(x0, eps, timestep)
        t_batch = torch.full((x0.shape[0],), float(timestep), dtype=dtype)
        null_ids = torch.full((x0.shape[0],), model.config.null_class_id, dtype=torch.long)
        _, taps = model.forward_with_taps(
            x_t, t_batch, null_ids, tap_layers=(tap_layer,), stop_after_layer=tap_layer,
            tap_point=tap_point,
        )
        feats.append(taps[tap_layer].mean(dim=1))
    return torch.cat(feats)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


def linear_probe(features: Tensor, labels: Tensor, config: ProbeConfig, generator: torch.Generator) -> float:
    """Held-out top-1 accuracy of an affine classifier on standardized features.

    The split is a random permutation from ``generator``; standardization uses
    train-split mean/std only. The classifier starts at zero (the objective is
    convex) and trains with Adam under a cosine learning-rate decay.
    """
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be [num, dim] aligned with labels")
    classes = torch.unique(labels)
    if classes.numel() < 2:
        raise ValueError("probing needs at least two classes")
    num = features.shape[0]
    perm = torch.randperm(num, generator=generator)
    split = int(round(num * config.train_fraction))
    if split < 1 or split >= num:
        raise ValueError("train/heldout split is degenerate; need more samples")
    train_idx, test_idx = perm[:split], perm[split:]

    feats = features.float()
    mean = feats[train_idx].mean(dim=0)
    std = feats[train_idx].std(dim=0).clamp_min(1e-6)
    x_train = (feats[train_idx] - mean) / std
    x_test = (feats[test_idx] - mean) / std
    y_train, y_test = labels[train_idx], labels[test_idx]

    num_classes = int(labels.max()) + 1
    probe = torch.nn.Linear(feats.shape[1], num_classes)
    with torch.no_grad():
        probe.weight.zero_()
        probe.bias.zero_()
    opt = torch.optim.Adam(probe.parameters(), lr=config.learning_rate, foreach=False)
    for epoch in range(config.epochs):
        lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(x_train.shape[0], generator=generator)
        for start in range(0, x_train.shape[0], config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(probe(x_train[idx]), y_train[idx])
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = probe(x_test).argmax(dim=1)
    return float((pred == y_test).double().mean())


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


def pca_project(features: Tensor, k: int) -> tuple[Tensor, Tensor, Tensor]:
    """(components [k, D], projected [num, k], explained-variance ratios [k]).

    Components are orthonormal directions of maximal variance of the
    mean-centered features; ratios are against total variance, so they are
    nonincreasing and sum to at most 1.
    """
    if features.ndim != 2:
        raise ValueError("features must be [num, dim]")
    num, dim = features.shape
    if not 1 <= k <= min(num, dim):
        raise ValueError(f"k={k} outside [1, {min(num, dim)}]")
    centered = (features - features.mean(dim=0)).double()
    _, singular, vh = torch.linalg.svd(centered, full_matrices=False)
    total = float((singular**2).sum())
    if total == 0.0:
        ratios = torch.zeros(k, dtype=torch.float64)
    else:
        ratios = (singular[:k] ** 2) / total
    components = vh[:k]
    return components, centered @ components.T, ratios


# ---------------------------------------------------------------------------
# Gaussian Fréchet distance
# ---------------------------------------------------------------------------


def gaussian_stats(features) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and unbiased covariance matrix in float64."""
    arr = np.asarray(features.detach().cpu().numpy() if isinstance(features, Tensor) else features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need a [num >= 2, dim] feature matrix")
    mu = arr.mean(axis=0)
    centered = arr - mu
    cov = centered.T @ centered / (arr.shape[0] - 1)
    return mu, cov


def covariance_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray, shrink_eps: float = 1e-6) -> np.ndarray:
    """(cov_a @ cov_b)^(1/2); retries with shrink_eps * I added to both factors
    when the plain square root is not finite."""
    covmean, _ = scipy_linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(covmean).all():
        eye = np.eye(cov_a.shape[0]) * shrink_eps
        covmean, _ = scipy_linalg.sqrtm((cov_a + eye) @ (cov_b + eye), disp=False)
        if not np.isfinite(covmean).all():
            raise MatrixSqrtError(
                f"matrix square root did not converge even with {shrink_eps:.0e} shrinkage; "
                f"cov norms {np.linalg.norm(cov_a):.3e}, {np.linalg.norm(cov_b):.3e}"
            )
    if np.iscomplexobj(covmean):
        imag = np.abs(covmean.imag).max()
        scale = max(np.abs(covmean.real).max(), 1.0)
        if imag > 1e-3 * scale:
            raise MatrixSqrtError(f"matrix square root has large imaginary component {imag:.3e}")
        covmean = covmean.real
    return covmean


def frechet_gaussian_distance(features_a, features_b) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)), >= 0."""
    mu_a, cov_a = gaussian_stats(features_a)
    mu_b, cov_b = gaussian_stats(features_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"feature dims differ: {mu_a.shape[0]} vs {mu_b.shape[0]}")
    covmean = covariance_sqrt_product(cov_a, cov_b)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Pixel-space proxy scores
# ---------------------------------------------------------------------------


def random_projection(flat: Tensor, out_dim: int = 64, seed: int = 0) -> Tensor:
    """Fixed seeded Gaussian linear map, the model-free feature extractor."""
    g = make_generator(seed, "feature-projection")
    proj = torch.randn(flat.shape[1], out_dim, generator=g, dtype=torch.float64) / math.sqrt(out_dim)
    return flat.double() @ proj


def frechet_proxy(samples: Tensor, reference: Tensor, projection_dim: int = 64, projection_seed: int = 0) -> dict[str, float]:
    """Distribution distance of generated samples vs reference data, on raw
    pixels and on the fixed random projection. Lower is better."""
    a = samples.reshape(samples.shape[0], -1)
    b = reference.reshape(reference.shape[0], -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples and reference have different pixel counts")
    return {
        "pixel": frechet_gaussian_distance(a, b),
        "projected": frechet_gaussian_distance(
            random_projection(a, projection_dim, projection_seed),
            random_projection(b, projection_dim, projection_seed),
        ),
    }


# ---------------------------------------------------------------------------
# Probe grids over checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ProbeCell:
    model: str  # "student" | "teacher"
    layer: int
    timestep: float
    accuracy: float


@dataclass
class ProbeReport:
    cells: list[ProbeCell] = field(default_factory=list)

    def accuracy(self, model: str, layer: int, timestep: float) -> float:
        for cell in self.cells:
            if cell.model == model and cell.layer == layer and math.isclose(cell.timestep, timestep):
                return cell.accuracy
        raise KeyError(f"no probe cell for ({model}, layer {layer}, t {timestep})")

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("model,layer,timestep,accuracy\n")
            for c in self.cells:
                f.write(f"{c.model},{c.layer},{c.timestep!r},{c.accuracy!r}\n")

    @classmethod
    def from_csv(cls, path) -> "ProbeReport":
        cells = []
        with open(path) as f:
            header = f.readline().strip()
            if header != "model,layer,timestep,accuracy":
                raise ValueError(f"{path}: unexpected probe report header {header!r}")
            for line in f:
                model, layer, timestep, accuracy = line.strip().split(",")
                cells.append(ProbeCell(model, int(layer), float(timestep), float(accuracy)))
        return cls(cells)


def probe_grid(
    models: dict[str, DiffusionTransformer],
    images: Tensor,
    labels: Tensor,
    layers: tuple[int, ...],
    timesteps: tuple,
    noiser,
    probe_config: ProbeConfig,
    seed: int,
    tap_point: str = "post_block",
    collect_pca: int = 0,
) -> tuple[ProbeReport, dict[str, Tensor]]:
    """Probe accuracies over models x layers x timesteps, plus optional PCA
    artifacts (top ``collect_pca`` components per cell)."""
    report = ProbeReport()
    pca_artifacts: dict[str, Tensor] = {}
    for name, model in models.items():
        for layer in layers:
            for timestep in timesteps:
                feat_gen = make_generator(seed, "probe-features", name, layer, str(timestep))
                feats = extract_features(model, images, layer, timestep, noiser, feat_gen, tap_point=tap_point)
                probe_gen = make_generator(seed, "probe-train", name, layer, str(timestep))
                acc = linear_probe(feats, labels, probe_config, probe_gen)
                report.cells.append(ProbeCell(name, layer, float(timestep), acc))
                if collect_pca > 0:
                    k = min(collect_pca, *feats.shape)
                    comps, proj, ratios = pca_project(feats, k)
                    stem = f"{name}.layer{layer}.t{timestep}"
                    pca_artifacts[f"{stem}.components"] = comps
                    pca_artifacts[f"{stem}.projected"] = proj
                    pca_artifacts[f"{stem}.ratios"] = ratios
    return report, pca_artifacts
