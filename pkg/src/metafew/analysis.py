"""Post-hoc analysis: learned step-size trajectories and CCA layer similarity.

The step-size trajectories diagnose meta-overfitting: groups whose learned
step size collapses toward zero no longer benefit from task adaptation. The
CCA similarity compares layer representations of two models (or one model
before/after fine-tuning) on aligned inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .encoder import encode_batch
from .meta import MetaModel

DEFAULT_NEAR_ZERO_EPS = 1e-5
DEFAULT_OVERFIT_FRACTION = 0.5
DEFAULT_CCA_REG = 1e-6


class AnalysisError(Exception):
    pass


@dataclass
class TrajectoryReport:
    steps: list[int]
    series: dict[str, list[float]]  # group -> alpha per logged row
    final_abs: dict[str, float]
    near_zero_fraction: float
    overfit_flag: bool

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "group", "alpha"])
            for group, values in self.series.items():
                for step, alpha in zip(self.steps, values):
                    writer.writerow([step, group, alpha])


def lr_trajectories(
    log_path,
    eps: float = DEFAULT_NEAR_ZERO_EPS,
    overfit_fraction: float = DEFAULT_OVERFIT_FRACTION,
) -> TrajectoryReport:
    """Extract per-group step-size series from a training log CSV."""
    with open(log_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise AnalysisError(f"{log_path}: empty training log")
        alpha_cols = [c for c in reader.fieldnames if c.startswith("alpha_")]
        if not alpha_cols:
            raise AnalysisError(f"{log_path}: no alpha_* columns in training log")
        steps = []
        series: dict[str, list[float]] = {c[len("alpha_") :]: [] for c in alpha_cols}
        for row in reader:
            steps.append(int(row["step"]))
            for c in alpha_cols:
                series[c[len("alpha_") :]].append(float(row[c]))
    if not steps:
        raise AnalysisError(f"{log_path}: training log has no rows")
    final_abs = {g: abs(v[-1]) for g, v in series.items()}
    frac = sum(1 for v in final_abs.values() if v < eps) / len(final_abs)
    return TrajectoryReport(steps, series, final_abs, frac, frac > overfit_fraction)


def cca_similarity(
    a: np.ndarray,
    b: np.ndarray,
    reg: float = DEFAULT_CCA_REG,
    keep_variance: float | None = None,
) -> float:
    """Mean canonical correlation between two representation matrices.

    Rows are aligned examples, columns are units. Columns are centered, the
    covariance blocks get Tikhonov regularization reg*I before whitening, and
    the mean of the top min(dim_a, dim_b) singular values of the whitened
    cross-covariance is returned, clipped to [0, 1]. keep_variance optionally
    projects each side onto the top principal components holding that
    fraction of variance first (SVD-truncation preprocessing).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise AnalysisError("representation matrices must be 2-D")
    if a.shape[0] != b.shape[0]:
        raise AnalysisError(f"row mismatch: {a.shape[0]} vs {b.shape[0]} examples")
    if a.shape[0] < 2:
        raise AnalysisError("need at least 2 aligned examples")
    if np.isnan(a).any() or np.isnan(b).any():
        raise AnalysisError("representation matrices contain NaN")

    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    if keep_variance is not None:
        a = _truncate(a, keep_variance)
        b = _truncate(b, keep_variance)

    n = a.shape[0]
    saa = a.T @ a / (n - 1) + reg * np.eye(a.shape[1])
    sbb = b.T @ b / (n - 1) + reg * np.eye(b.shape[1])
    sab = a.T @ b / (n - 1)
    m = _inv_sqrt(saa) @ sab @ _inv_sqrt(sbb)
    corrs = np.linalg.svd(m, compute_uv=False)
    k = min(a.shape[1], b.shape[1])
    return float(np.clip(corrs[:k], 0.0, 1.0).mean())


def _inv_sqrt(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    vals = np.maximum(vals, 1e-12)
    return vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T


def _truncate(x: np.ndarray, keep_variance: float) -> np.ndarray:
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    energy = np.cumsum(s**2) / np.sum(s**2)
    rank = int(np.searchsorted(energy, keep_variance) + 1)
    return u[:, :rank] * s[:rank]


def collect_reps(
    model: MetaModel, inputs: list[np.ndarray], layer_list: list[int]
) -> dict[int, np.ndarray]:
    """CLS-position output per requested layer for aligned inputs, eval mode.

    Layer 0 is the embedding+position output; layer i the output of block i.
    """
    for layer in layer_list:
        if not (0 <= layer <= model.enc_cfg.n_layers):
            raise AnalysisError(
                f"layer {layer} out of range 0..{model.enc_cfg.n_layers}"
            )
    tape = Tape()
    nodes = {e.name: tape.const(e.value) for e in model.enc.entries}
    _, reps = encode_batch(
        tape, nodes, inputs, model.enc_cfg, train_mode=False, rng=None,
        collect_layers=layer_list,
    )
    return {layer: node.value.copy() for layer, node in reps.items()}


def write_layer_similarity_csv(path, similarities: dict[int, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "similarity"])
        for layer in sorted(similarities):
            writer.writerow([layer, similarities[layer]])
