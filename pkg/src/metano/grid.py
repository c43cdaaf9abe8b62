"""Uniform grids, sampled fields, discrete Fourier transforms and the error metric.

Fields are stored node-major: ``values.shape == (*grid.shape, channels)``.
The forward transform is unnormalized, the inverse carries ``1 / M**dim``.
Spectra are kept over the full mode set in standard wraparound order, so
index ``k`` along an axis holds frequency ``k`` for ``k <= M // 2`` and
``k - M`` otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from metano.errors import DegenerateReferenceError, InvalidArgumentError, InvalidInputError, InvalidSpectrumError

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class Grid:
    """Uniform grid on the unit interval (dim=1) or unit square (dim=2)."""

    dim: int
    M: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidInputError(f"grid dim must be 1 or 2, got {self.dim}")
        if self.M < 1:
            raise InvalidInputError(f"nodes per dim must be positive, got {self.M}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.dim

    @property
    def spacing(self) -> float:
        return 1.0 / self.M

    @property
    def node_count(self) -> int:
        return self.M**self.dim

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(self.dim))

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dim)``; node j sits at ``j / M``."""
        x = np.arange(self.M) / self.M
        mesh = np.meshgrid(*([x] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    def frequencies(self) -> np.ndarray:
        """Signed integer frequency per index along one axis (wraparound order)."""
        k = np.arange(self.M)
        return np.where(k <= self.M // 2, k, k - self.M)


@dataclass(frozen=True)
class Field:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == self.grid.dim:
            v = v[..., None]
        if v.shape[:-1] != self.grid.shape or v.shape[-1] < 1:
            raise InvalidInputError(f"field values of shape {v.shape} do not fit grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("field values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class Spectrum:
    """Complex coefficients over the full mode set; ``k_max=None`` means untruncated."""

    grid: Grid
    coeffs: np.ndarray = field(repr=False)
    k_max: int | None = None

    @property
    def channels(self) -> int:
        return self.coeffs.shape[-1]


def _mirror(coeffs: np.ndarray, dim: int) -> np.ndarray:
    """Return ``c[-k]`` for every mode k (wraparound indexing)."""
    out = coeffs
    for ax in range(dim):
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


def dft_forward(f: Field) -> Spectrum:
    axes = f.grid.axes
    raw = np.fft.fftn(f.values, axes=axes)
    # average with the mirrored conjugate so symmetry holds bitwise
    coeffs = 0.5 * (raw + np.conj(_mirror(raw, f.grid.dim)))
    return Spectrum(f.grid, coeffs)


def dft_inverse(s: Spectrum) -> Field:
    scale = np.max(np.abs(s.coeffs), initial=0.0)
    asym = np.max(np.abs(s.coeffs - np.conj(_mirror(s.coeffs, s.grid.dim))), initial=0.0)
    if asym > SYMMETRY_TOL * max(1.0, scale):
        raise InvalidSpectrumError(f"spectrum violates conjugate symmetry by {asym:.3e}")
    values = np.fft.ifftn(s.coeffs, axes=s.grid.axes)
    return Field(s.grid, values.real.copy())


def mode_mask(grid: Grid, k_max: int) -> np.ndarray:
    """Boolean mask over the full mode set: every frequency component within k_max."""
    check_truncation(grid, k_max)
    inside = np.abs(grid.frequencies()) <= k_max
    mask = inside
    for _ in range(grid.dim - 1):
        mask = mask[:, None] & inside[None, :]
    return mask


def check_truncation(grid: Grid, k_max: int) -> None:
    if k_max < 1 or 2 * k_max > grid.M:
        raise InvalidArgumentError(f"k_max={k_max} outside [1, M/2] for M={grid.M}")


def truncate_modes(s: Spectrum, k_max: int) -> Spectrum:
    mask = mode_mask(s.grid, k_max)
    coeffs = np.where(mask[..., None], s.coeffs, 0.0)
    return Spectrum(s.grid, coeffs, k_max)


def relative_l2_error(pred: Field | np.ndarray, truth: Field | np.ndarray) -> float:
    """``||pred - truth|| / ||truth||`` over all nodes and channels."""
    p = pred.values if isinstance(pred, Field) else np.asarray(pred, dtype=np.float64)
    t = truth.values if isinstance(truth, Field) else np.asarray(truth, dtype=np.float64)
    if isinstance(pred, Field) and isinstance(truth, Field) and pred.grid != truth.grid:
        raise InvalidInputError("pred and truth live on different grids")
    if p.shape != t.shape:
        raise InvalidInputError(f"shape mismatch {p.shape} vs {t.shape}")
    denom = np.linalg.norm(t)
    if denom == 0.0:
        raise DegenerateReferenceError("reference field has zero norm")
    return float(np.linalg.norm(p - t) / denom)


def batch_relative_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample relative L2 errors for batches shaped ``(N, *grid, channels)``."""
    axes = tuple(range(1, truth.ndim))
    denom = np.sqrt(np.sum(truth**2, axis=axes))
    if np.any(denom == 0.0):
        raise DegenerateReferenceError("a reference sample has zero norm")
    return np.sqrt(np.sum((pred - truth) ** 2, axis=axes)) / denom
