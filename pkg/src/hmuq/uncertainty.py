"""Sample-based and dataset-based uncertainty extraction, plus the two
Monte-Carlo-Dropout baselines (argmax spread vs fit of the mean heatmap)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import FitConfig, argmax_coord, fit_gaussian
from .gauss import (
    CovarianceDecomposition,
    HeatmapGrid,
    InvalidParameterError,
    decompose_covariance,
)

SOURCES = ("fit", "mcd_max", "mcd_heatmap_fit")


@dataclass(frozen=True)
class LandmarkPrediction:
    coord: tuple[float, float]
    covariance: CovarianceDecomposition
    source: str
    converged: bool


@dataclass(frozen=True)
class McdConfig:
    k: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2:
            raise InvalidParameterError(f"k must be >= 2, got {self.k}")


def sample_uncertainty(h: HeatmapGrid, cfg: FitConfig = FitConfig()) -> LandmarkPrediction:
    """Gaussian fit of one predicted heatmap: coordinate plus directional spread."""
    res = fit_gaussian(h, cfg)
    return LandmarkPrediction(res.gaussian.mean, res.gaussian.decomp, "fit", res.converged)


def _as_stack(heatmaps) -> np.ndarray:
    values = np.stack([h.values if isinstance(h, HeatmapGrid) else np.asarray(h, np.float64)
                       for h in heatmaps])
    if values.shape[0] < 2:
        raise InvalidParameterError("need at least 2 forward passes")
    return values


def points_prediction(points, source: str) -> LandmarkPrediction:
    """Mean and population covariance (divisor n) of coordinate samples.

    A zero-variance direction is legitimate (e.g. identical argmaxes), so the
    decomposition is returned with its degenerate flag set instead of failing.
    """
    pts = np.asarray(points, dtype=np.float64)
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / len(pts)
    decomp = decompose_covariance(cov, allow_semidefinite=True)
    return LandmarkPrediction((float(mean[0]), float(mean[1])), decomp, source, True)


def mcd_max(heatmaps) -> LandmarkPrediction:
    """Mean and population covariance of the per-pass argmax coordinates."""
    values = _as_stack(heatmaps)
    return points_prediction([argmax_coord(v) for v in values], "mcd_max")


def mcd_heatmap_fit(heatmaps, fit_cfg: FitConfig = FitConfig()) -> LandmarkPrediction:
    """Gaussian fit of the pixel-wise mean of the K passes."""
    values = _as_stack(heatmaps)
    res = fit_gaussian(HeatmapGrid(values.mean(axis=0)), fit_cfg)
    return LandmarkPrediction(res.gaussian.mean, res.gaussian.decomp,
                              "mcd_heatmap_fit", res.converged)


def mcd_predict(model, image, cfg: McdConfig = McdConfig()) -> list[list[HeatmapGrid]]:
    """K stochastic forward passes; returns per-landmark lists of K heatmaps.

    Pass seeds derive from cfg.seed, so the set is deterministic and each
    pass could equally run concurrently.
    """
    from .trainer import predict  # deferred: trainer imports this module's types' siblings

    cfg.validate()
    if not model.config.dropout_rate > 0:
        raise InvalidParameterError("Monte-Carlo dropout needs a model trained with dropout")
    per_pass = [predict(model, image, dropout_enabled=True, seed=[cfg.seed, pass_idx])
                for pass_idx in range(cfg.k)]
    n_landmarks = len(per_pass[0])
    return [[per_pass[k][i] for k in range(cfg.k)] for i in range(n_landmarks)]


def dataset_uncertainty(model) -> list[CovarianceDecomposition]:
    """The per-landmark covariances learned jointly with the predictor."""
    return [d.canonical() for d in model.target_decomps]
