"""Shared helpers for the test suite."""

import numpy as np

from hmuq.gauss import CovarianceDecomposition


def random_decomposition(rng, sigma_lo=1.0, sigma_hi=8.0, max_ratio=None):
    """Random canonical decomposition with sigmas in [sigma_lo, sigma_hi]."""
    while True:
        sigmas = np.exp(rng.uniform(np.log(sigma_lo), np.log(sigma_hi), size=2))
        maj, mnr = max(sigmas), min(sigmas)
        if max_ratio is None or maj / mnr <= max_ratio:
            break
    theta = rng.uniform(-np.pi / 2, np.pi / 2)
    return CovarianceDecomposition(theta, maj, mnr)


def max_rel_error(approx, exact):
    """Infinity-norm error of `approx` against `exact`, relative to max |exact|."""
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = np.abs(exact).max()
    if scale == 0.0:
        return np.abs(approx).max()
    return np.abs(approx - exact).max() / scale


# Target per-landmark observer-spread decompositions (mm) for the
# multi-observer fixture.  Landmarks 0 and 3 pin the strongly anisotropic
# and the near-isotropic regimes; the rest fill in intermediate spreads.
INTEROBS_TARGETS_MM = (
    CovarianceDecomposition(np.radians(39.33), 0.9752, 0.3794),
    CovarianceDecomposition(np.radians(-44.30), 2.4058, 1.1348),
    CovarianceDecomposition(np.radians(20.97), 1.8861, 1.2408),
    CovarianceDecomposition(np.radians(-60.34), 0.5372, 0.4840),
    CovarianceDecomposition(np.radians(-13.98), 1.2845, 0.8797),
)

OBSERVER_IDS = tuple(f"obs_{k:02d}" for k in range(11))


def write_interobserver_fixture(out_dir, num_images=100, seed=202):
    """Synthetic multi-observer dataset whose per-image covariance is exact.

    Each image/landmark pair gets 11 observer points: sqrt(2) * (cos, sin)
    at equally spaced angles, mapped through the target decomposition.  The
    population covariance of such a ring is the identity for any phase, so
    every image reproduces the target covariance to rounding and aggregate
    statistics over images match the targets with near-zero spread.
    """
    from hmuq.dataio import AnnotationRow, write_dataset

    rng = np.random.default_rng(seed)
    size = 96
    spacing = 0.1  # mm per px
    centers = np.array([(40.0, 40.0), (56.0, 40.0), (40.0, 56.0),
                        (56.0, 56.0), (48.0, 48.0)])
    ids = [f"img_{i:03d}" for i in range(num_images)]
    images = [np.zeros((size, size)) for _ in ids]
    base_angles = 2.0 * np.pi * np.arange(11) / 11.0
    rows = []
    for image_id in ids:
        for j, d in enumerate(INTEROBS_TARGETS_MM):
            mean = centers[j] + rng.uniform(-2.0, 2.0, size=2)
            angles = base_angles + rng.uniform(0.0, 2.0 * np.pi)
            ring = np.sqrt(2.0) * np.column_stack([np.cos(angles), np.sin(angles)])
            c, s = np.cos(d.theta), np.sin(d.theta)
            scale_rot = np.array([[c * d.sigma_maj, -s * d.sigma_min],
                                  [s * d.sigma_maj, c * d.sigma_min]])
            pts = mean + ring @ scale_rot.T / spacing
            rows.extend(AnnotationRow(image_id, j, obs, float(x), float(y))
                        for obs, (x, y) in zip(OBSERVER_IDS, pts))
    return write_dataset(out_dir, ids, images, None, [spacing] * num_images,
                         len(INTEROBS_TARGETS_MM), observer_rows=rows, bits=8)
