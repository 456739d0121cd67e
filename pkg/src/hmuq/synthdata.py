"""Synthetic landmark images with controllable anisotropic annotation noise.

Each landmark sits on a smooth rendered structure: `corner` (two soft edges
meeting at the landmark), `edge` (a soft step the landmark lies on, with a
broad envelope so the along-edge position is only weakly determined), or
`blob` (an isotropic bump).  Edge structures are oriented along the injected
noise direction, so annotation ambiguity runs along the visible edge.
Annotations are the true positions plus a per-landmark Gaussian draw.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .dataio import format_config, write_annotations, write_dataset, AnnotationRow, Dataset
from .gauss import CovarianceDecomposition, InvalidParameterError

STRUCTURES = ("corner", "edge", "blob")


@dataclass(frozen=True)
class LandmarkSpec:
    structure: str
    orientation_deg: float = 0.0
    noise: CovarianceDecomposition = CovarianceDecomposition(0.0, 0.0, 0.0)


DEFAULT_LANDMARKS = (
    LandmarkSpec("corner", 0.0, CovarianceDecomposition(0.0, 0.0, 0.0)),
    LandmarkSpec("edge", 30.0, CovarianceDecomposition(math.radians(30.0), 4.0, 1.5)),
    LandmarkSpec("blob", 0.0, CovarianceDecomposition(0.0, 1.5, 1.5)),
    LandmarkSpec("corner", 45.0, CovarianceDecomposition(0.0, 0.0, 0.0)),
)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    num_images: int = 200
    landmarks: tuple[LandmarkSpec, ...] = DEFAULT_LANDMARKS
    contrast: float = 0.7
    noise_floor: float = 0.02
    position_jitter: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 16 or self.image_size % 4:
            raise InvalidParameterError("image_size must be >= 16 and divisible by 4")
        if self.num_images < 1:
            raise InvalidParameterError("num_images must be >= 1")
        if not self.landmarks:
            raise InvalidParameterError("at least one landmark is required")
        if not 0 < self.contrast <= 1:
            raise InvalidParameterError("contrast must be in (0, 1]")
        if self.noise_floor < 0 or self.position_jitter < 0:
            raise InvalidParameterError("noise_floor and position_jitter must be >= 0")
        for i, spec in enumerate(self.landmarks):
            if spec.structure not in STRUCTURES:
                raise InvalidParameterError(
                    f"landmark {i}: structure must be one of {STRUCTURES}")
            spec.noise.validate()
        _base_positions(self)  # raises when the 6-sigma margins cannot be met


@dataclass
class SynthDataset:
    ids: list[str]
    images: list[np.ndarray]
    coords: np.ndarray       # true landmark positions (num_images, N, 2)
    annotations: np.ndarray  # noisy annotations with the same shape
    injected: tuple[CovarianceDecomposition, ...]
    spacing: np.ndarray
    landmark_count: int

    def training_view(self) -> Dataset:
        """The dataset as a trainer sees it: annotations play groundtruth."""
        return Dataset(self.ids, self.images, self.annotations, self.spacing,
                       self.landmark_count, None)


def _base_positions(cfg: SynthConfig) -> np.ndarray:
    """Fixed structure anchor points, inset so jitter + 6 sigma stays inside."""
    half = (cfg.image_size - 1) / 2.0
    n = len(cfg.landmarks)
    out = np.empty((n, 2))
    for i, spec in enumerate(cfg.landmarks):
        margin = cfg.position_jitter + 6.0 * max(spec.noise.sigma_maj, spec.noise.sigma_min)
        radius = min(0.3 * cfg.image_size, half - margin)
        if radius < 0:
            raise InvalidParameterError(
                f"landmark {i}: jitter + 6 sigma margin ({margin:.1f} px) exceeds "
                f"the half image size ({half:.1f} px)")
        angle = 2.0 * math.pi * i / n + 0.25 * math.pi
        out[i] = (half + radius * math.cos(angle), half + radius * math.sin(angle))
    return out


def _render_structure(xs, ys, pos, spec: LandmarkSpec, contrast: float) -> np.ndarray:
    phi = math.radians(spec.orientation_deg)
    c, s = math.cos(phi), math.sin(phi)
    dx = xs - pos[0]
    dy = ys - pos[1]
    u = c * dx + s * dy      # along the structure orientation
    v = -s * dx + c * dy     # across it
    tau = 1.2                # softness of rendered edges, px
    if spec.structure == "blob":
        return contrast * np.exp(-(dx ** 2 + dy ** 2) / (2.0 * 3.0 ** 2))
    if spec.structure == "edge":
        envelope = np.exp(-u ** 2 / (2.0 * 10.0 ** 2))
        return contrast * envelope / (1.0 + np.exp(-v / tau))
    # corner: bright quadrant with its apex at the landmark
    return contrast / ((1.0 + np.exp(-u / tau)) * (1.0 + np.exp(-v / tau)))


def generate(cfg: SynthConfig) -> SynthDataset:
    """Deterministic (seeded) synthetic dataset with recorded injected noise."""
    cfg.validate()
    base = _base_positions(cfg)
    n_landmarks = len(cfg.landmarks)
    size = cfg.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    rotations = []
    for spec in cfg.landmarks:
        t = spec.noise.theta
        rotations.append(np.array([[math.cos(t), -math.sin(t)],
                                   [math.sin(t), math.cos(t)]]))
    ids = []
    images = []
    coords = np.empty((cfg.num_images, n_landmarks, 2))
    annotations = np.empty_like(coords)
    for i in range(cfg.num_images):
        rng = np.random.default_rng([cfg.seed, i])
        true = base + rng.uniform(-cfg.position_jitter, cfg.position_jitter,
                                  size=(n_landmarks, 2))
        image = np.zeros((size, size))
        for j, spec in enumerate(cfg.landmarks):
            image += _render_structure(xs, ys, true[j], spec, cfg.contrast)
        if cfg.noise_floor > 0:
            image += rng.normal(0.0, cfg.noise_floor, size=image.shape)
        np.clip(image, 0.0, 1.0, out=image)
        for j, spec in enumerate(cfg.landmarks):
            z = rng.standard_normal(2)
            offset = rotations[j] @ (z * (spec.noise.sigma_maj, spec.noise.sigma_min))
            annotations[i, j] = true[j] + offset
        ids.append(f"img_{i:04d}")
        images.append(image)
        coords[i] = true
    injected = tuple(spec.noise.canonical() for spec in cfg.landmarks)
    return SynthDataset(ids, images, coords, annotations, injected,
                        np.ones(cfg.num_images), n_landmarks)


# --- config and on-disk form ---------------------------------------------------


def synth_config_to_dict(cfg: SynthConfig) -> dict[str, str]:
    out = {
        "image_size": str(cfg.image_size),
        "num_images": str(cfg.num_images),
        "contrast": repr(cfg.contrast),
        "noise_floor": repr(cfg.noise_floor),
        "position_jitter": repr(cfg.position_jitter),
        "seed": str(cfg.seed),
        "num_landmarks": str(len(cfg.landmarks)),
    }
    for i, spec in enumerate(cfg.landmarks):
        out[f"landmark_{i}.structure"] = spec.structure
        out[f"landmark_{i}.orientation_deg"] = repr(spec.orientation_deg)
        out[f"landmark_{i}.noise_theta_deg"] = repr(math.degrees(spec.noise.theta))
        out[f"landmark_{i}.noise_sigma_maj"] = repr(spec.noise.sigma_maj)
        out[f"landmark_{i}.noise_sigma_min"] = repr(spec.noise.sigma_min)
    return out


def synth_config_from_dict(items: dict[str, str]) -> SynthConfig:
    plain = {"image_size": int, "num_images": int, "contrast": float,
             "noise_floor": float, "position_jitter": float, "seed": int}
    kwargs = {}
    claimed = set()
    for key, parse in plain.items():
        if key in items:
            kwargs[key] = parse(items[key])
            claimed.add(key)
    if "num_landmarks" not in items:
        unknown = set(items) - claimed
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        cfg = SynthConfig(**kwargs)
        cfg.validate()
        return cfg
    count = int(items["num_landmarks"])
    claimed.add("num_landmarks")
    if count < 1:
        raise InvalidParameterError("num_landmarks must be >= 1")
    landmarks = []
    for i in range(count):
        prefix = f"landmark_{i}."
        fields = {}
        for suffix in ("structure", "orientation_deg", "noise_theta_deg",
                       "noise_sigma_maj", "noise_sigma_min"):
            key = prefix + suffix
            if key not in items:
                raise InvalidParameterError(f"missing config key {key!r}")
            fields[suffix] = items[key]
            claimed.add(key)
        noise = CovarianceDecomposition(math.radians(float(fields["noise_theta_deg"])),
                                        float(fields["noise_sigma_maj"]),
                                        float(fields["noise_sigma_min"]))
        landmarks.append(LandmarkSpec(fields["structure"],
                                      float(fields["orientation_deg"]), noise))
    unknown = set(items) - claimed
    if unknown:
        raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
    cfg = SynthConfig(landmarks=tuple(landmarks), **kwargs)
    cfg.validate()
    return cfg


def write_synth_dataset(out_dir, ds: SynthDataset, cfg: SynthConfig) -> str:
    """Write the standard dataset layout plus truth.csv and generator.cfg."""
    manifest = write_dataset(out_dir, ds.ids, ds.images, ds.annotations,
                             ds.spacing, ds.landmark_count)
    truth_rows = [AnnotationRow(image_id, j, "", ds.coords[i, j, 0], ds.coords[i, j, 1])
                  for i, image_id in enumerate(ds.ids)
                  for j in range(ds.landmark_count)]
    write_annotations(os.path.join(out_dir, "truth.csv"), truth_rows)
    with open(os.path.join(out_dir, "generator.cfg"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(format_config(synth_config_to_dict(cfg)))
    return manifest
