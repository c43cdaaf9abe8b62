"""Synthetic parametric-PDE task families with exact solvers.

Every task is ``F1[b](x) * F2[u](x) = g(x)`` for a hidden positive
coefficient field ``b``:

* ``REACTION``: ``b(x) * (u + u**3) = g(x)`` node by node (any grid dim).
* ``DIFFUSION``: ``-(b u')' = g`` on (0, 1) with ``u(0) = u(1) = 0`` (1D).
  Node ``x_0 = 0`` is the Dirichlet node; the M-1 interior nodes are solved
  with harmonic-mean face coefficients and the periodic extension of b.

Loadings are Gaussian random fields with power-law spectral density; every
random draw is seeded by an explicit integer tuple, never by shared RNG state.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from metano import kernels
from metano.errors import InvalidDatasetError, InvalidInputError
from metano.grid import Field, Grid

B_FLOOR = 0.5
DEFAULT_AMPLITUDE = 0.5
GRF_EXPONENT = -1.25
RESIDUAL_TOL = 1e-10


class Family(enum.IntEnum):
    REACTION = 1
    DIFFUSION = 2


def sample_grf(grid: Grid, seed, exponent: float = GRF_EXPONENT) -> Field:
    """White noise filtered by sqrt(gamma), gamma = |k|**(2*exponent), zero mode removed."""
    if exponent >= 0:
        raise InvalidInputError(f"GRF exponent must be negative, got {exponent}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid.shape)
    k = grid.frequencies().astype(np.float64)
    k2 = k**2
    for _ in range(grid.dim - 1):
        k2 = k2[:, None] + (k**2)[None, :]
    with np.errstate(divide="ignore"):
        amp = np.where(k2 > 0, k2 ** (exponent / 2.0), 0.0)
    phi = np.fft.ifftn(amp * np.fft.fftn(noise)).real
    phi -= phi.mean()  # clears the roundoff left in the zero mode
    return Field(grid, phi)


def coefficient_from_field(phi: np.ndarray, amplitude: float = DEFAULT_AMPLITUDE) -> np.ndarray:
    sd = float(np.std(phi))
    if sd == 0.0:
        return np.ones_like(phi)
    return 1.0 + amplitude * np.tanh(phi / sd)


@dataclass(frozen=True, eq=False)
class TaskSpec:
    family: Family
    b: Field
    seed: int
    grid: Grid
    amplitude: float = DEFAULT_AMPLITUDE

    def __post_init__(self):
        if self.b.channels != 1 or self.b.grid != self.grid:
            raise InvalidInputError("coefficient field must be one channel on the task grid")
        floor = min(B_FLOOR, 1.0 - self.amplitude)
        if float(self.b.values.min()) < floor - 1e-15 or float(self.b.values.min()) <= 0.0:
            raise InvalidInputError(f"coefficient field drops below {floor}")
        if self.family == Family.DIFFUSION and self.grid.dim != 1:
            raise InvalidInputError("DIFFUSION tasks are one-dimensional")


def make_task(family, grid: Grid, task_seed: int, amplitude: float = DEFAULT_AMPLITUDE) -> TaskSpec:
    family = Family(family)
    for attempt in range(4):
        phi = sample_grf(grid, (task_seed, 0xB, attempt)).values[..., 0]
        if np.std(phi) > 0.0:
            b = coefficient_from_field(phi, amplitude)
            return TaskSpec(family, Field(grid, b), task_seed, grid, amplitude)
    raise InvalidInputError(f"degenerate coefficient field for task seed {task_seed} after 3 retries")


# ------------------------------------------------------------------ solvers

def diffusion_system(b: np.ndarray):
    """Tridiagonal (lower, diag, upper) for the interior nodes, scaled by h**2 = 1/M**2."""
    M = b.shape[0]
    bp = np.append(b, b[0])
    face = 2.0 * bp[:-1] * bp[1:] / (bp[:-1] + bp[1:])  # face j sits between node j and j+1
    inv_h2 = float(M * M)
    diag = (face[:-1] + face[1:]) * inv_h2
    off = -face[1:-1] * inv_h2
    return off, diag, off.copy()


def solve(family, b: Field | np.ndarray, g: Field | np.ndarray) -> np.ndarray:
    """Oracle response for loading(s) ``g``; shape ``(..., *grid, 1)`` in and out."""
    family = Family(family)
    bv = b.values[..., 0] if isinstance(b, Field) else np.asarray(b, dtype=np.float64)
    gv = g.values if isinstance(g, Field) else np.asarray(g, dtype=np.float64)
    if gv.shape[-1] != 1 or gv.shape[-1 - bv.ndim : -1] != bv.shape:
        raise InvalidInputError(f"loading of shape {gv.shape} does not match coefficient grid {bv.shape}")
    if not np.all(np.isfinite(gv)):
        raise InvalidInputError("loading must be finite")
    if family == Family.REACTION:
        u, _ = kernels.cubic_solve(gv[..., 0] / bv)
        return u[..., None]
    if bv.ndim != 1:
        raise InvalidInputError("DIFFUSION is one-dimensional")
    lower, diag, upper = diffusion_system(bv)
    lead = gv.shape[:-2]
    rhs = gv[..., 1:, 0].reshape(-1, bv.shape[0] - 1).T
    interior = kernels.thomas(lower, diag, upper, np.ascontiguousarray(rhs))
    u = np.zeros(lead + bv.shape)
    u[..., 1:] = interior.T.reshape(lead + (bv.shape[0] - 1,))
    return u[..., None]


def residual(family, b: np.ndarray, g: np.ndarray, u: np.ndarray) -> float:
    """Max abs residual of the defining discrete equation."""
    family = Family(family)
    g, u = g[..., 0], u[..., 0]
    if family == Family.REACTION:
        return float(np.max(np.abs(b * (u + u**3) - g), initial=0.0))
    lower, diag, upper = diffusion_system(b)
    ui = u[..., 1:]
    au = diag * ui
    au[..., 1:] += lower * ui[..., :-1]
    au[..., :-1] += upper * ui[..., 1:]
    scale = max(1.0, float(np.max(np.abs(g), initial=0.0)))
    return float(max(np.max(np.abs(au - g[..., 1:]), initial=0.0), np.max(np.abs(u[..., 0]), initial=0.0)) / scale)


# ------------------------------------------------------------------ datasets

@dataclass(eq=False)
class TaskDataset:
    spec: TaskSpec
    context_g: np.ndarray
    context_u: np.ndarray
    target_g: np.ndarray
    target_u: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("context_g", "context_u", "target_g", "target_u"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape[1:-1] != self.spec.grid.shape:
                raise InvalidDatasetError(f"{name} of shape {arr.shape} does not match task grid")
            setattr(self, name, arr)
        if len(self.context_g) != len(self.context_u) or len(self.target_g) != len(self.target_u):
            raise InvalidDatasetError("loading/response counts differ")

    @property
    def context(self) -> list[tuple[Field, Field]]:
        grid = self.spec.grid
        return [(Field(grid, g), Field(grid, u)) for g, u in zip(self.context_g, self.context_u)]

    @property
    def target(self) -> list[tuple[Field, Field]]:
        grid = self.spec.grid
        return [(Field(grid, g), Field(grid, u)) for g, u in zip(self.target_g, self.target_u)]

    def context_subset(self, n: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
        """First n context pairs, or n pairs drawn without replacement by seed."""
        if not 1 <= n <= len(self.context_g):
            raise InvalidDatasetError(f"requested {n} of {len(self.context_g)} context pairs")
        idx = np.arange(n) if seed is None else np.sort(np.random.default_rng(seed).permutation(len(self.context_g))[:n])
        return self.context_g[idx], self.context_u[idx]

    def max_residual(self) -> float:
        b = self.spec.b.values[..., 0]
        res = [residual(self.spec.family, b, g, u) for g, u in
               ((self.context_g, self.context_u), (self.target_g, self.target_u)) if len(g)]  # fmt: skip
        return max(res, default=0.0)


def sample_loadings(grid: Grid, n: int, data_seed: int, offset: int = 0) -> np.ndarray:
    """``n`` unit-norm GRF loadings; sample i is seeded by (data_seed, offset + i)."""
    out = np.empty((n,) + grid.shape + (1,))
    for i in range(n):
        g = sample_grf(grid, (data_seed, offset + i)).values
        out[i] = g / np.linalg.norm(g)
    return out


def build_task_dataset(spec: TaskSpec, n_context: int, n_target: int, data_seed: int) -> TaskDataset:
    if n_context < 0 or n_target < 0 or n_context + n_target < 1:
        raise InvalidDatasetError("need at least one sample")
    g = sample_loadings(spec.grid, n_context + n_target, data_seed)
    u = solve(spec.family, spec.b, g)
    meta = {
        "data_seed": data_seed,
        "task_seed": spec.seed,
        "loading_norm": "unit l2",
        "grf_exponent": GRF_EXPONENT,
        "newton_tol": kernels.NEWTON_TOL,
    }
    return TaskDataset(spec, g[:n_context], u[:n_context], g[n_context:], u[n_context:], meta)
