"""Core 2-D Gaussian math for landmark heatmaps.

Covariances are parameterized either as plain 2x2 matrices (pixel^2) or as a
rotation/extent decomposition (theta, sigma_maj, sigma_min).  Heatmaps are
rendered by pointwise evaluation of the Gaussian density at integer pixel
centers; image arrays are indexed [row, col] = [y, x] while coordinates are
(x, y) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidParameterError(ValueError):
    """A Gaussian parameter is outside its valid domain."""


@dataclass(frozen=True)
class CovarianceDecomposition:
    """Rotation/extent parameterization of a 2x2 covariance.

    theta is the angle of the major axis against the x-axis in radians;
    sigma_maj and sigma_min are the extents along the major and minor axis
    in pixels.  Canonical form has sigma_maj >= sigma_min and
    theta in (-pi/2, pi/2]; when the extents are equal theta is 0.
    """

    theta: float
    sigma_maj: float
    sigma_min: float

    def validate(self) -> None:
        if not (math.isfinite(self.theta) and math.isfinite(self.sigma_maj)
                and math.isfinite(self.sigma_min)):
            raise InvalidParameterError("covariance parameters must be finite")
        if self.sigma_maj < 0 or self.sigma_min < 0:
            raise InvalidParameterError(
                f"sigma_maj={self.sigma_maj}, sigma_min={self.sigma_min} must be >= 0")

    def canonical(self) -> "CovarianceDecomposition":
        """Equivalent decomposition with sigma_maj >= sigma_min, theta in (-pi/2, pi/2]."""
        theta, maj, mnr = self.theta, self.sigma_maj, self.sigma_min
        if mnr > maj:
            maj, mnr = mnr, maj
            theta += 0.5 * math.pi
        if maj - mnr <= 1e-12 * maj:
            theta = 0.0  # rotation of an isotropic Gaussian is unidentifiable
        theta = wrap_axis_angle(theta)
        return CovarianceDecomposition(theta, maj, mnr)

    @property
    def ratio(self) -> float:
        return self.sigma_maj / self.sigma_min

    @property
    def product(self) -> float:
        return self.sigma_maj * self.sigma_min

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    @property
    def degenerate(self) -> bool:
        return self.sigma_min <= 1e-12 * max(1.0, self.sigma_maj)

    def scaled(self, factor: float) -> "CovarianceDecomposition":
        """Same orientation with extents multiplied by factor (unit change)."""
        return replace(self, sigma_maj=self.sigma_maj * factor,
                       sigma_min=self.sigma_min * factor)


@dataclass
class HeatmapGrid:
    """Rectangular grid of real intensities with isotropic pixel spacing (mm/px)."""

    values: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise InvalidParameterError(f"heatmap must be a 2-D grid, got shape {self.values.shape}")
        if not self.spacing > 0:
            raise InvalidParameterError(f"spacing must be > 0, got {self.spacing}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("heatmap values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class AnisotropicGaussian:
    """Normalized 2-D Gaussian scaled by `amplitude`, centered at `mean` = (x, y)."""

    mean: tuple[float, float]
    decomp: CovarianceDecomposition
    amplitude: float

    def validate(self) -> None:
        if not all(math.isfinite(c) for c in self.mean):
            raise InvalidParameterError("mean must be finite")
        if not self.amplitude > 0:
            raise InvalidParameterError(f"amplitude must be > 0, got {self.amplitude}")
        self.decomp.validate()
        if self.decomp.sigma_maj <= 0 or self.decomp.sigma_min <= 0:
            raise InvalidParameterError("sigmas must be > 0 for a renderable Gaussian")


def wrap_axis_angle(theta: float) -> float:
    """Wrap an (undirected) axis angle to the interval (-pi/2, pi/2]."""
    t = (theta + 0.5 * math.pi) % math.pi - 0.5 * math.pi
    if t == -0.5 * math.pi:  # modulo hit exactly 0
        t = 0.5 * math.pi
    return t


def axis_angle_difference_deg(a_deg: float, b_deg: float) -> float:
    """Absolute difference of two axis angles in degrees, modulo the 180-degree period."""
    d = abs(a_deg - b_deg) % 180.0
    return min(d, 180.0 - d)


def compose_covariance(d: CovarianceDecomposition) -> np.ndarray:
    """Covariance matrix R(theta) diag(sigma_maj^2, sigma_min^2) R(theta)^T."""
    d.validate()
    if d.sigma_maj <= 0 or d.sigma_min <= 0:
        raise InvalidParameterError(
            f"sigmas must be > 0 to compose a covariance, got ({d.sigma_maj}, {d.sigma_min})")
    c, s = math.cos(d.theta), math.sin(d.theta)
    r = np.array([[c, -s], [s, c]])
    star = np.diag([d.sigma_maj ** 2, d.sigma_min ** 2])
    return r @ star @ r.T


def decompose_covariance(m: np.ndarray, allow_semidefinite: bool = False) -> CovarianceDecomposition:
    """Canonical (theta, sigma_maj, sigma_min) of a symmetric positive definite matrix.

    With allow_semidefinite, rank-deficient (PSD) matrices are accepted and
    near-zero eigenvalues are clipped to 0, yielding a degenerate decomposition.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 2):
        raise InvalidParameterError(f"expected a 2x2 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidParameterError("covariance entries must be finite")
    scale = max(abs(m).max(), 1.0)
    if abs(m[0, 1] - m[1, 0]) > 1e-9 * scale:
        raise InvalidParameterError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    tol = 1e-12 * scale
    if allow_semidefinite:
        if vals[0] < -tol:
            raise InvalidParameterError(f"covariance has negative eigenvalue {vals[0]}")
        vals = np.clip(vals, 0.0, None)
    elif vals[0] <= 0:
        raise InvalidParameterError(f"covariance must be positive definite, eigenvalues {vals}")
    major = vecs[:, 1]
    theta = math.atan2(major[1], major[0])
    return CovarianceDecomposition(theta, math.sqrt(vals[1]), math.sqrt(vals[0])).canonical()


def _rotated_offsets(mean, theta, shape):
    """Offsets from `mean` at integer pixel centers, in the rotated frame (u1, u2)."""
    h, w = shape
    dx = np.arange(w, dtype=np.float64)[None, :] - mean[0]
    dy = np.arange(h, dtype=np.float64)[:, None] - mean[1]
    c, s = math.cos(theta), math.sin(theta)
    u1 = c * dx + s * dy
    u2 = -s * dx + c * dy
    return u1, u2


def _eval_gaussian(g: AnisotropicGaussian, shape, with_gradients: bool):
    g.validate()
    a, b = g.decomp.sigma_maj, g.decomp.sigma_min
    u1, u2 = _rotated_offsets(g.mean, g.decomp.theta, shape)
    q1 = (u1 / a) ** 2
    q2 = (u2 / b) ** 2
    h = (g.amplitude / (TWO_PI * a * b)) * np.exp(-0.5 * (q1 + q2))
    if not with_gradients:
        return h
    dtheta = h * u1 * u2 * (1.0 / b ** 2 - 1.0 / a ** 2)
    dmaj = h * (q1 - 1.0) / a
    dmin = h * (q2 - 1.0) / b
    return h, dtheta, dmaj, dmin


def render_anisotropic(g: AnisotropicGaussian, grid_shape: tuple[int, int],
                       spacing: float = 1.0) -> HeatmapGrid:
    """Render amplitude/(2 pi sqrt|S|) exp(-(x-mu)^T S^-1 (x-mu) / 2) on an (H, W) grid."""
    return HeatmapGrid(_eval_gaussian(g, grid_shape, with_gradients=False), spacing)


def render_isotropic(mean: tuple[float, float], sigma: float, gamma: float,
                     grid_shape: tuple[int, int], spacing: float = 1.0) -> HeatmapGrid:
    """Render an isotropic Gaussian with extent sigma and total mass gamma."""
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    g = AnisotropicGaussian(mean, CovarianceDecomposition(0.0, sigma, sigma), gamma)
    return render_anisotropic(g, grid_shape, spacing)


def heatmap_param_gradients(g: AnisotropicGaussian, grid_shape: tuple[int, int]
                            ) -> tuple[HeatmapGrid, HeatmapGrid, HeatmapGrid]:
    """Per-pixel partial derivatives of the rendered heatmap.

    Returns (dh/dtheta, dh/dsigma_maj, dh/dsigma_min) as heatmap grids.
    """
    _, dtheta, dmaj, dmin = _eval_gaussian(g, grid_shape, with_gradients=True)
    return HeatmapGrid(dtheta), HeatmapGrid(dmaj), HeatmapGrid(dmin)


def render_with_param_gradients(g: AnisotropicGaussian, grid_shape: tuple[int, int]):
    """Fused render + parameter gradients (single exp evaluation), as raw arrays."""
    return _eval_gaussian(g, grid_shape, with_gradients=True)


def sample_gaussian(g: AnisotropicGaussian, n: int, seed) -> np.ndarray:
    """Draw n points from N(mean, covariance) as an (n, 2) array of (x, y).

    Points are mean + R diag(sigma_maj, sigma_min) z with z standard normal;
    deterministic for a fixed seed.
    """
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    g.decomp.validate()
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 2))
    c, s = math.cos(g.decomp.theta), math.sin(g.decomp.theta)
    r = np.array([[c, -s], [s, c]])
    transform = r @ np.diag([g.decomp.sigma_maj, g.decomp.sigma_min])
    return np.asarray(g.mean, dtype=np.float64) + z @ transform.T
