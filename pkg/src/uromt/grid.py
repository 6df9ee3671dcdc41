"""Cell-centered 3D grids, flat field containers, and the Neumann diffusion operator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.fft import dctn, idctn
from scipy.sparse.linalg import cg as _sparse_cg
from scipy.sparse.linalg import splu


class DiffusionSolveError(RuntimeError):
    """Iterative diffusion solve failed to reach its residual tolerance."""


def fft_workers() -> int:
    """Worker count for FFT-based solves, read from UROMT_NUM_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("UROMT_NUM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Grid:
    """Cell-centered n1 x n2 x n3 grid with uniform per-axis spacing.

    Flat vectors enumerate voxels x-fastest: flat = i1 + n1*(i2 + n2*i3).
    Cell centers sit at physical coordinates (i1*dx, i2*dy, i3*dz).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("dims and spacing must each have three entries")
        if any(d <= 0 for d in dims):
            raise ValueError(f"grid dims must be positive, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"grid spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def cell_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def reshape(self, values: np.ndarray) -> np.ndarray:
        """Flat length-n vector -> (n1, n2, n3) volume indexed [i1, i2, i3]."""
        return np.asarray(values).reshape(self.dims, order="F")

    def flatten(self, volume: np.ndarray) -> np.ndarray:
        """(n1, n2, n3) volume -> flat length-n vector, x-fastest."""
        return np.asarray(volume).reshape(self.n, order="F")


def build_grid(dims, spacing=(1.0, 1.0, 1.0)) -> Grid:
    """Validate and construct a grid; rejects non-positive dims or spacing."""
    return Grid(tuple(dims), tuple(spacing))


@lru_cache(maxsize=32)
def _index_coords_cached(dims: tuple[int, int, int]) -> np.ndarray:
    n1, n2, _ = dims
    idx = np.arange(n1 * n2 * dims[2])
    coords = np.stack([idx % n1, (idx // n1) % n2, idx // (n1 * n2)]).astype(float)
    coords.setflags(write=False)
    return coords

def index_coords(grid: Grid) -> np.ndarray:
    """Per-voxel integer index coordinates as a read-only (3, n) float array."""
    return _index_coords_cached(grid.dims)


@dataclass
class ScalarField:
    """One real value per voxel, stored flat in the grid's x-fastest order."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"scalar field needs {self.grid.n} values, got shape {v.shape}")
        self.values = v

    def volume(self) -> np.ndarray:
        return self.grid.reshape(self.values)

    def total(self) -> float:
        return float(self.values.sum())


@dataclass
class VectorField:
    """Velocity per voxel: length-3n vector laid out [all x | all y | all z]."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.shape != (3 * self.grid.n,):
            raise ValueError(f"vector field needs {3 * self.grid.n} values, got shape {v.shape}")
        self.values = v

    def component(self, axis: int) -> np.ndarray:
        n = self.grid.n
        return self.values[axis * n:(axis + 1) * n]

    @classmethod
    def from_components(cls, grid: Grid, vx, vy, vz) -> "VectorField":
        return cls(grid, np.concatenate([vx, vy, vz]))

    def magnitude(self) -> np.ndarray:
        """Per-voxel Euclidean speed."""
        n = self.grid.n
        v = self.values.reshape(3, n)
        return np.sqrt((v * v).sum(axis=0))


def _neumann_1d(n: int) -> sp.csr_matrix:
    # Second difference with mirrored ghost cells: row sums are zero by construction.
    if n == 1:
        return sp.csr_matrix((1, 1))
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def build_laplacian(grid: Grid) -> sp.csr_matrix:
    """Discrete Laplacian with zero-flux (mirror ghost) closure on the cell-centered grid.

    Symmetric, with Q @ 1 = 0 and 1^T Q = 0; spacings enter as 1/dx^2 etc.
    """
    n1, n2, n3 = grid.dims
    dx, dy, dz = grid.spacing
    qx = _neumann_1d(n1) / dx ** 2
    qy = _neumann_1d(n2) / dy ** 2
    qz = _neumann_1d(n3) / dz ** 2
    ix = sp.identity(n1, format="csr")
    iy = sp.identity(n2, format="csr")
    iz = sp.identity(n3, format="csr")
    q = (
        sp.kron(iz, sp.kron(iy, qx))
        + sp.kron(iz, sp.kron(qy, ix))
        + sp.kron(qz, sp.kron(iy, ix))
    )
    return q.tocsr()


def _neumann_eigenvalues(n: int, h: float) -> np.ndarray:
    # Eigenvalues of minus the 1D operator above, under the DCT-II basis.
    k = np.arange(n)
    return (2.0 - 2.0 * np.cos(np.pi * k / n)) / h ** 2


class DiffusionSolver:
    """Reusable solver for (I - sigma*dt*Q) x = b on one grid.

    Three interchangeable backends:
      - "spectral": DCT-II diagonalization of Q; exact up to roundoff (default).
      - "direct":   sparse LU factorization, reused across solves.
      - "cg":       conjugate gradient at ``cg_tol`` relative residual, warm-started
                    from the previous solution.

    The operator has row and column sums equal to 1, so every backend preserves
    sum(x) = sum(b).
    """

    def __init__(self, grid: Grid, sigma: float, dt: float, method: str = "spectral",
                 cg_tol: float = 1e-10, cg_max_iters: int | None = None):
        if sigma < 0:
            raise ValueError(f"diffusion coefficient must be nonnegative, got {sigma}")
        if dt <= 0:
            raise ValueError(f"time step must be positive, got {dt}")
        if method not in ("spectral", "direct", "cg"):
            raise ValueError(f"unknown diffusion solver method {method!r}")
        self.grid = grid
        self.sigma = float(sigma)
        self.dt = float(dt)
        self.method = method
        self.cg_tol = cg_tol
        self.cg_max_iters = cg_max_iters if cg_max_iters is not None else 10 * grid.n
        self.matrix = (
            sp.identity(grid.n, format="csr") - sigma * dt * build_laplacian(grid)
        ).tocsr()
        self._is_identity = sigma * dt == 0.0
        self._lu = None
        self._modes = None
        self._warm = None
        if not self._is_identity:
            if method == "spectral":
                n1, n2, n3 = grid.dims
                dxs, dys, dzs = grid.spacing
                e1 = _neumann_eigenvalues(n1, dxs)
                e2 = _neumann_eigenvalues(n2, dys)
                e3 = _neumann_eigenvalues(n3, dzs)
                self._modes = 1.0 + sigma * dt * (
                    e1[:, None, None] + e2[None, :, None] + e3[None, None, :]
                )
            elif method == "direct":
                self._lu = splu(self.matrix.tocsc())

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve (I - sigma*dt*Q) x = b for one flat right-hand side."""
        b = np.asarray(b, dtype=float)
        if b.shape != (self.grid.n,):
            raise ValueError(f"right-hand side needs shape ({self.grid.n},), got {b.shape}")
        if self._is_identity:
            return b.copy()
        if self.method == "spectral":
            vol = self.grid.reshape(b)
            coeff = dctn(vol, type=2, norm="ortho", workers=fft_workers())
            coeff /= self._modes
            out = idctn(coeff, type=2, norm="ortho", workers=fft_workers())
            return self.grid.flatten(np.ascontiguousarray(out))
        if self.method == "direct":
            return self._lu.solve(b)
        x0 = self._warm if self._warm is not None else None
        x, info = _sparse_cg(self.matrix, b, x0=x0, rtol=self.cg_tol, atol=0.0,
                             maxiter=self.cg_max_iters)
        if info != 0:
            resid = np.linalg.norm(self.matrix @ x - b) / max(np.linalg.norm(b), 1e-300)
            raise DiffusionSolveError(
                f"diffusion CG did not converge (info={info}, relative residual {resid:.3e})"
            )
        self._warm = x
        return x


def build_diffusion_solver(grid: Grid, sigma: float, dt: float, method: str = "spectral",
                           cg_tol: float = 1e-10, cg_max_iters: int | None = None) -> DiffusionSolver:
    """Construct the implicit-Euler diffusion operator L = I - sigma*dt*Q with solve state."""
    return DiffusionSolver(grid, sigma, dt, method=method, cg_tol=cg_tol,
                           cg_max_iters=cg_max_iters)
