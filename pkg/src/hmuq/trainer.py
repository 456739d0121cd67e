"""Heatmap-regression training with fixed or jointly learned target covariances.

Three target strategies share one loop: fixed isotropic targets, a learned
per-landmark isotropic extent (pixel loss plus alpha * sigma^2), and a learned
per-landmark anisotropic covariance (pixel loss plus alpha * sigma_maj *
sigma_min).  The covariance parameters are optimized as (theta, log sigma_maj,
log sigma_min) so the extents stay positive without constraints; results are
reported canonically.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .gauss import (
    AnisotropicGaussian,
    CovarianceDecomposition,
    HeatmapGrid,
    InvalidParameterError,
    render_with_param_gradients,
)
from .nets import ReferencePredictor

TARGET_MODES = ("fixed_iso", "learned_iso", "learned_aniso")
MOMENTUM = 0.9
CHECKPOINT_MAGIC = b"HMUQ"
CHECKPOINT_VERSION = 1


class TrainDivergedError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass(frozen=True)
class AugmentConfig:
    """Random augmentation ranges, all symmetric around the identity.

    A range value r means: intensity shift in [-r, r], intensity scale in
    [1-r, 1+r], translation components in [-r, r] px, rotation in [-r, r] rad,
    spatial scale in [1-r, 1+r].  Elastic deformation draws a coarse
    elastic_grid_size^2 displacement field with standard deviation
    elastic_magnitude px and upsamples it smoothly.
    """

    enable_intensity_shift: bool = False
    intensity_shift_range: float = 0.0
    enable_intensity_scale: bool = False
    intensity_scale_range: float = 0.0
    enable_translation: bool = False
    translation_range: float = 0.0
    enable_rotation: bool = False
    rotation_range: float = 0.0
    enable_scale: bool = False
    scale_range: float = 0.0
    enable_elastic: bool = False
    elastic_grid_size: int = 4
    elastic_magnitude: float = 0.0

    def validate(self) -> None:
        for name in ("intensity_shift_range", "intensity_scale_range",
                     "translation_range", "rotation_range", "scale_range",
                     "elastic_magnitude"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        if not 0 <= self.scale_range < 1:
            raise InvalidParameterError("scale_range must be in [0, 1)")
        if self.elastic_grid_size < 2:
            raise InvalidParameterError("elastic_grid_size must be >= 2")

    def is_identity(self) -> bool:
        return not (self.enable_intensity_shift or self.enable_intensity_scale
                    or self.enable_translation or self.enable_rotation
                    or self.enable_scale or self.enable_elastic)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 5.0
    gamma: float = 100.0
    weight_decay: float = 0.001
    iterations: int = 40000
    learning_rate: float = 1e-4
    covariance_lr_multiplier: float = 1.0
    dropout_rate: float = 0.0
    batch_size: int = 4
    seed: int = 0
    target_mode: str = "learned_aniso"
    sigma_init: float = 3.0
    predictor_width: int = 16
    freeze_predictor: bool = False
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if not (self.alpha > 0 and self.gamma > 0):
            raise InvalidParameterError("alpha and gamma must be > 0")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidParameterError("dropout_rate must be in [0, 1)")
        if self.target_mode not in TARGET_MODES:
            raise InvalidParameterError(
                f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.iterations < 1 or self.batch_size < 1 or self.predictor_width < 1:
            raise InvalidParameterError("iterations, batch_size, predictor_width must be >= 1")
        if not (self.learning_rate > 0 and self.covariance_lr_multiplier > 0):
            raise InvalidParameterError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise InvalidParameterError("weight_decay must be >= 0")
        if not self.sigma_init > 0:
            raise InvalidParameterError("sigma_init must be > 0")
        self.augmentation.validate()


@dataclass
class TrainedModel:
    predictor: ReferencePredictor
    target_decomps: list[CovarianceDecomposition]
    config: TrainConfig
    loss_trace: np.ndarray


# --- losses -------------------------------------------------------------------


def _check_pred(pred, count):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[0] != count:
        raise InvalidParameterError(
            f"expected {count} predicted heatmaps, got array of shape {pred.shape}")
    return pred


def render_targets(coords, decomps, gamma, shape) -> np.ndarray:
    """Stack of target heatmaps, one per landmark, on an (H, W) grid."""
    out = np.empty((len(decomps), *shape))
    for i, d in enumerate(decomps):
        g = AnisotropicGaussian(tuple(coords[i]), d, gamma)
        out[i] = render_with_param_gradients(g, shape)[0]
    return out


def loss_fixed(pred, coords, sigma: float, gamma: float) -> float:
    """Pixel-wise squared-error loss against isotropic targets of extent sigma."""
    coords = np.asarray(coords, dtype=np.float64)
    pred = _check_pred(pred, len(coords))
    decomps = [CovarianceDecomposition(0.0, sigma, sigma)] * len(coords)
    targets = render_targets(coords, decomps, gamma, pred.shape[1:])
    return float(((pred - targets) ** 2).sum())


def loss_learned_iso(pred, coords, sigmas, alpha: float, gamma: float) -> float:
    """Pixel loss with per-landmark isotropic targets plus alpha * sum sigma_i^2."""
    coords = np.asarray(coords, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    pred = _check_pred(pred, len(coords))
    if sigmas.shape != (len(coords),):
        raise InvalidParameterError("one sigma per landmark required")
    decomps = [CovarianceDecomposition(0.0, s, s) for s in sigmas]
    targets = render_targets(coords, decomps, gamma, pred.shape[1:])
    return float(((pred - targets) ** 2).sum() + alpha * (sigmas ** 2).sum())


def loss_learned_aniso(pred, coords, decomps, alpha: float, gamma: float) -> float:
    """Pixel loss with anisotropic targets plus alpha * sum sigma_maj_i * sigma_min_i."""
    loss, _, _ = aniso_loss_gradients(pred, coords, decomps, alpha, gamma)
    return loss


def aniso_loss_gradients(pred, coords, decomps, alpha: float, gamma: float):
    """Anisotropic loss with its analytic gradients.

    Returns (loss, cov_grads, dpred): cov_grads has one (d/dtheta, d/dsigma_maj,
    d/dsigma_min) row per landmark and dpred is the gradient with respect to
    the predicted heatmaps, ready to feed into a predictor backward pass.
    """
    coords = np.asarray(coords, dtype=np.float64)
    pred = _check_pred(pred, len(coords))
    if len(decomps) != len(coords):
        raise InvalidParameterError("one covariance decomposition per landmark required")
    loss = 0.0
    cov_grads = np.empty((len(decomps), 3))
    dpred = np.empty_like(pred)
    for i, d in enumerate(decomps):
        g = AnisotropicGaussian(tuple(coords[i]), d, gamma)
        target, dtheta, dmaj, dmin = render_with_param_gradients(g, pred.shape[1:])
        r = pred[i] - target
        loss += (r ** 2).sum() + alpha * d.sigma_maj * d.sigma_min
        dpred[i] = 2.0 * r
        cov_grads[i, 0] = -2.0 * (r * dtheta).sum()
        cov_grads[i, 1] = -2.0 * (r * dmaj).sum() + alpha * d.sigma_min
        cov_grads[i, 2] = -2.0 * (r * dmin).sum() + alpha * d.sigma_maj
    return float(loss), cov_grads, dpred


# --- augmentation -------------------------------------------------------------


class AugmentResult(NamedTuple):
    image: np.ndarray
    coords: np.ndarray
    out_of_bounds: np.ndarray  # per-landmark flag: transformed outside the image


def _sample_field(fields, pts):
    """Bilinear sample of stacked (2, H, W) displacement fields at (n, 2) points."""
    coords = np.stack([pts[:, 1], pts[:, 0]])  # map_coordinates wants (row, col)
    return np.stack([
        ndimage.map_coordinates(fields[k], coords, order=1, mode="nearest")
        for k in (0, 1)], axis=1)


def apply_spatial(image, coords, angle: float = 0.0, scale: float = 1.0,
                  shift=(0.0, 0.0), elastic_field=None) -> AugmentResult:
    """Apply one spatial transform identically to an image and its coordinates.

    A point p maps to R(angle) * scale * (p - c) + c + shift with c the image
    center; the image is resampled bilinearly under the same map.  If an
    elastic displacement field (2, H, W) in (dx, dy) order is given, the image
    is additionally sampled at x + d(x), and coordinates are moved by the
    matching inverse displacement (fixed-point iteration; fields are smooth
    and small, so a few steps suffice).
    """
    image = np.asarray(image, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    h, w = image.shape
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    c, s = math.cos(angle), math.sin(angle)
    fwd = scale * np.array([[c, -s], [s, c]])
    inv = np.linalg.inv(fwd)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xs - center[0] - shift[0]
    py = ys - center[1] - shift[1]
    sx = inv[0, 0] * px + inv[0, 1] * py + center[0]
    sy = inv[1, 0] * px + inv[1, 1] * py + center[1]
    if elastic_field is not None:
        sx = sx + elastic_field[0]
        sy = sy + elastic_field[1]
    warped = ndimage.map_coordinates(image, [sy, sx], order=1, mode="constant", cval=0.0)
    new = (fwd @ (coords - center).T).T + center + shift
    if elastic_field is not None:
        for _ in range(4):
            d = _sample_field(elastic_field, new)
            new = (fwd @ (coords - d - center).T).T + center + shift
    oob = ((new[:, 0] < 0) | (new[:, 0] > w - 1)
           | (new[:, 1] < 0) | (new[:, 1] > h - 1))
    return AugmentResult(warped, new, oob)


def augment(image, coords, cfg: AugmentConfig, seed) -> AugmentResult:
    """Draw one random augmentation from cfg and apply it (seeded).

    Spatial parts move image and coordinates together; intensity parts touch
    only the image.  The identity configuration returns the inputs unchanged.
    Landmarks pushed outside the image are kept but flagged.
    """
    cfg.validate()
    image = np.asarray(image, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if cfg.is_identity():
        return AugmentResult(image, coords, np.zeros(len(coords), dtype=bool))
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range) if cfg.enable_rotation else 0.0
    scale = 1.0 + (rng.uniform(-cfg.scale_range, cfg.scale_range) if cfg.enable_scale else 0.0)
    if cfg.enable_translation:
        shift = rng.uniform(-cfg.translation_range, cfg.translation_range, size=2)
    else:
        shift = np.zeros(2)
    elastic = None
    if cfg.enable_elastic and cfg.elastic_magnitude > 0:
        g = cfg.elastic_grid_size
        h, w = image.shape
        coarse = rng.normal(0.0, cfg.elastic_magnitude, size=(2, g, g))
        elastic = np.stack([ndimage.zoom(coarse[k], (h / g, w / g), order=3)
                            for k in (0, 1)])
    out = apply_spatial(image, coords, angle, scale, shift, elastic)
    warped = out.image
    if cfg.enable_intensity_scale:
        warped = warped * (1.0 + rng.uniform(-cfg.intensity_scale_range,
                                             cfg.intensity_scale_range))
    if cfg.enable_intensity_shift:
        warped = warped + rng.uniform(-cfg.intensity_shift_range,
                                      cfg.intensity_shift_range)
    return AugmentResult(warped, out.coords, out.out_of_bounds)


# --- training loop --------------------------------------------------------------


def _mode_grads(pred, coords, theta, log_maj, log_min, cfg):
    """Loss, covariance log-parameter gradients, and dL/dpred for one sample.

    The regularizer is NOT included here; train() adds it once per batch.
    """
    a = np.exp(log_maj)
    b = np.exp(log_min)
    decomps = [CovarianceDecomposition(theta[i], a[i], b[i]) for i in range(len(theta))]
    loss, cov, dpred = aniso_loss_gradients(pred, coords, decomps, 0.0, cfg.gamma)
    cov[:, 1] *= a  # chain rule to log parameters
    cov[:, 2] *= b
    return loss, cov, dpred


def train(dataset, cfg: TrainConfig, initial_params: np.ndarray | None = None) -> TrainedModel:
    """Stochastic gradient descent (momentum 0.9, weight decay) over a dataset.

    `dataset` needs `.images` (list of equally shaped 2-D arrays) and
    `.coords` ((num_images, num_landmarks, 2) pixel coordinates).  Covariance
    parameters move every step at learning_rate * covariance_lr_multiplier
    (when the mode learns them); the run is deterministic for a fixed seed.
    `initial_params` overrides the random predictor initialization, which
    also enables freeze_predictor studies of the covariance dynamics alone.
    """
    cfg.validate()
    images = list(dataset.images)
    coords = np.asarray(dataset.coords, dtype=np.float64)
    if len(images) == 0:
        raise InvalidParameterError("dataset is empty")
    if coords.ndim != 3 or coords.shape[0] != len(images) or coords.shape[2] != 2:
        raise InvalidParameterError(f"bad coords shape {coords.shape}")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise InvalidParameterError("all training images must share one shape")
    n_landmarks = coords.shape[1]

    rng = np.random.default_rng(cfg.seed)
    net = ReferencePredictor(n_landmarks, cfg.predictor_width, seed=cfg.seed)
    if initial_params is not None:
        net.set_params(initial_params)
    params = net.get_params()
    vel = np.zeros_like(params)

    theta = np.zeros(n_landmarks)
    log_maj = np.full(n_landmarks, math.log(cfg.sigma_init))
    log_min = np.full(n_landmarks, math.log(cfg.sigma_init))
    vel_cov = np.zeros((n_landmarks, 3))
    learn_cov = cfg.target_mode != "fixed_iso"
    iso = cfg.target_mode == "learned_iso"

    trace = np.empty(cfg.iterations)
    identity_aug = cfg.augmentation.is_identity()
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        batch_loss = 0.0
        grad = np.zeros_like(params)
        grad_cov = np.zeros((n_landmarks, 3))
        for slot, j in enumerate(idx):
            im, cs = images[j], coords[j]
            if not identity_aug:
                im, cs, _ = augment(im, cs, cfg.augmentation, [cfg.seed, it, slot, 0])
            drop_rng = (np.random.default_rng([cfg.seed, it, slot, 1])
                        if cfg.dropout_rate else None)
            pred = net.forward(im, cfg.dropout_rate, drop_rng)
            loss, cov, dpred = _mode_grads(pred, cs, theta, log_maj, log_min, cfg)
            batch_loss += loss
            grad_cov += cov
            if not cfg.freeze_predictor:
                grad += net.backward(dpred)
        batch_loss /= cfg.batch_size
        grad /= cfg.batch_size
        grad_cov /= cfg.batch_size

        # regularizer: alpha * sum sigma_maj*sigma_min (anisotropic) or
        # alpha * sum sigma^2 (isotropic); gradients in log parameters
        prod = np.exp(log_maj + log_min)
        batch_loss += cfg.alpha * prod.sum()
        if learn_cov:
            if iso:
                shared = grad_cov[:, 1] + grad_cov[:, 2] + 2.0 * cfg.alpha * prod
                grad_cov = np.stack([np.zeros_like(shared), shared, shared], axis=1)
            else:
                grad_cov[:, 1] += cfg.alpha * prod
                grad_cov[:, 2] += cfg.alpha * prod

        if not math.isfinite(batch_loss):
            raise TrainDivergedError(f"non-finite loss at iteration {it}")
        trace[it] = batch_loss

        if not cfg.freeze_predictor:
            grad += cfg.weight_decay * params
            vel = MOMENTUM * vel - cfg.learning_rate * grad
            params = params + vel
            net.set_params(params)
        if learn_cov:
            vel_cov = MOMENTUM * vel_cov - (cfg.learning_rate
                                            * cfg.covariance_lr_multiplier) * grad_cov
            theta = theta + vel_cov[:, 0]
            log_maj = log_maj + vel_cov[:, 1]
            log_min = log_min + vel_cov[:, 2]
            # log extents beyond e^30 px are runaway dynamics, not a fit
            if max(np.abs(log_maj).max(), np.abs(log_min).max()) > 30.0:
                raise TrainDivergedError(
                    f"covariance parameters diverged at iteration {it}; lower "
                    f"learning_rate * covariance_lr_multiplier")

    if learn_cov:
        decomps = [CovarianceDecomposition(theta[i], math.exp(log_maj[i]),
                                           math.exp(log_min[i])).canonical()
                   for i in range(n_landmarks)]
    else:
        decomps = [CovarianceDecomposition(0.0, cfg.sigma_init, cfg.sigma_init)
                   for _ in range(n_landmarks)]
    return TrainedModel(net, decomps, cfg, trace)


def predict(model: TrainedModel, image, dropout_enabled: bool = False,
            seed: int = 0) -> list[HeatmapGrid]:
    """One forward pass; dropout (at the training rate) only when enabled."""
    rate = model.config.dropout_rate if dropout_enabled else 0.0
    rng = np.random.default_rng(seed) if rate else None
    pred = model.predictor.forward(np.asarray(image, dtype=np.float64), rate, rng)
    return [HeatmapGrid(pred[i]) for i in range(pred.shape[0])]


# --- checkpoint IO ----------------------------------------------------------------


def write_checkpoint(model: TrainedModel, path) -> None:
    """Binary model file: magic, version, per-landmark covariance (f64),
    predictor parameters (f32), and a key=value config snapshot."""
    from .dataio import format_config  # local import: dataio has no trainer dependency

    decomps = model.target_decomps
    params = model.predictor.get_params().astype("<f4")
    snapshot = format_config(train_config_to_dict(model.config)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(decomps)))
        for d in decomps:
            fh.write(struct.pack("<3d", d.theta, d.sigma_maj, d.sigma_min))
        fh.write(struct.pack("<I", params.size))
        fh.write(params.tobytes())
        fh.write(struct.pack("<I", len(snapshot)))
        fh.write(snapshot)


def read_checkpoint(path) -> TrainedModel:
    from .dataio import parse_config_text

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise InvalidParameterError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidParameterError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    decomps = []
    for _ in range(count):
        t, a, b = struct.unpack_from("<3d", raw, pos)
        pos += 24
        decomps.append(CovarianceDecomposition(t, a, b))
    (n_params,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = np.frombuffer(raw, dtype="<f4", count=n_params, offset=pos).astype(np.float64)
    pos += 4 * n_params
    (cfg_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    cfg = train_config_from_dict(parse_config_text(raw[pos:pos + cfg_len].decode("utf-8")))
    net = ReferencePredictor(count, cfg.predictor_width, seed=cfg.seed)
    if net.num_params() != n_params:
        raise InvalidParameterError(
            f"{path}: parameter count {n_params} does not match architecture")
    net.set_params(params)
    return TrainedModel(net, decomps, cfg, np.empty(0))


# --- config (de)serialization ------------------------------------------------------


def train_config_to_dict(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for name in ("alpha", "gamma", "weight_decay", "iterations", "learning_rate",
                 "covariance_lr_multiplier", "dropout_rate", "batch_size", "seed",
                 "target_mode", "sigma_init", "predictor_width", "freeze_predictor"):
        out[name] = _fmt(getattr(cfg, name))
    for name in ("enable_intensity_shift", "intensity_shift_range",
                 "enable_intensity_scale", "intensity_scale_range",
                 "enable_translation", "translation_range",
                 "enable_rotation", "rotation_range",
                 "enable_scale", "scale_range",
                 "enable_elastic", "elastic_grid_size", "elastic_magnitude"):
        out[f"augmentation.{name}"] = _fmt(getattr(cfg.augmentation, name))
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_field(cls, name, text):
    kind = cls.__dataclass_fields__[name].type
    if kind == "bool":
        if text not in ("true", "false"):
            raise InvalidParameterError(f"{name}: expected true/false, got {text!r}")
        return text == "true"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def train_config_from_dict(items: dict[str, str]) -> TrainConfig:
    cfg_kwargs = {}
    aug_kwargs = {}
    for key, value in items.items():
        if key.startswith("augmentation."):
            name = key[len("augmentation."):]
            if name not in AugmentConfig.__dataclass_fields__:
                raise InvalidParameterError(f"unknown config key {key!r}")
            aug_kwargs[name] = _parse_field(AugmentConfig, name, value)
        else:
            if key not in TrainConfig.__dataclass_fields__ or key == "augmentation":
                raise InvalidParameterError(f"unknown config key {key!r}")
            cfg_kwargs[key] = _parse_field(TrainConfig, key, value)
    cfg = TrainConfig(augmentation=AugmentConfig(**aug_kwargs), **cfg_kwargs)
    cfg.validate()
    return cfg
