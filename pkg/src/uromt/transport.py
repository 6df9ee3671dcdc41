"""Operator-split forward dynamics: relative source, PIC advection, implicit diffusion.

One time step maps rho_i to rho_{i+1} = L^{-1} S(v_i) R(r_i) rho_i where
R scales mass by (1 + dt*r*chi), S redistributes voxel mass along the
displacement dt*v with trilinear particle-in-cell weights, and L is the
implicit diffusion operator from :mod:`uromt.grid`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import DiffusionSolver, Grid, ScalarField, VectorField, index_coords


class NegativeDensityWarning(UserWarning):
    """A source step scaled some voxel by a negative factor (1 + dt*r*chi < 0)."""


@dataclass
class IndicatorField:
    """Binary per-voxel mask restricting where the relative source may act."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"indicator needs {self.grid.n} values, got shape {v.shape}")
        if not np.all((v == 0.0) | (v == 1.0)):
            raise ValueError("indicator entries must be exactly 0 or 1")
        self.values = v


@dataclass
class TimeSeries:
    """Per-interval controls of one transport solve: m slices of (v, r, chi).

    Arrays are stacked per interval: v has shape (m, 3n), r and chi (m, n).
    """

    grid: Grid
    dt: float
    v: np.ndarray
    r: np.ndarray
    chi: np.ndarray

    def __post_init__(self):
        n = self.grid.n
        self.v = np.ascontiguousarray(self.v, dtype=float)
        self.r = np.ascontiguousarray(self.r, dtype=float)
        self.chi = np.ascontiguousarray(self.chi, dtype=float)
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.v.ndim != 2 or self.v.shape[1] != 3 * n or self.v.shape[0] < 1:
            raise ValueError(f"velocity series needs shape (m, {3 * n}), got {self.v.shape}")
        m = self.v.shape[0]
        if self.r.shape != (m, n):
            raise ValueError(f"source series needs shape ({m}, {n}), got {self.r.shape}")
        if self.chi.shape != (m, n):
            raise ValueError(f"indicator series needs shape ({m}, {n}), got {self.chi.shape}")
        if not np.all((self.chi == 0.0) | (self.chi == 1.0)):
            raise ValueError("indicator series entries must be exactly 0 or 1")

    @property
    def m(self) -> int:
        return self.v.shape[0]

    def velocity(self, i: int) -> VectorField:
        return VectorField(self.grid, self.v[i])

    def source(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.r[i])

    def indicator(self, i: int) -> IndicatorField:
        return IndicatorField(self.grid, self.chi[i])

    @classmethod
    def zeros(cls, grid: Grid, m: int, dt: float, chi: np.ndarray | None = None) -> "TimeSeries":
        n = grid.n
        if chi is None:
            chi = np.ones((m, n))
        return cls(grid, dt, np.zeros((m, 3 * n)), np.zeros((m, n)), np.asarray(chi, dtype=float))


def apply_source(rho: ScalarField, r: ScalarField, chi: IndicatorField, dt: float) -> ScalarField:
    """Mass gain/loss step: (1 + dt*r*chi) * rho, elementwise.

    Warns (without clamping) if any voxel factor is negative, since the
    density would change sign there.
    """
    factor = 1.0 + dt * r.values * chi.values
    bad = int(np.count_nonzero(factor < 0))
    if bad:
        warnings.warn(
            f"source step drives {bad} voxel(s) negative (1 + dt*r*chi < 0)",
            NegativeDensityWarning,
            stacklevel=2,
        )
    return ScalarField(rho.grid, factor * rho.values)


def _pic_geometry(grid: Grid, v_values: np.ndarray, dt: float):
    """Displacement geometry shared by the PIC matrix and its velocity Jacobian.

    Returns per-axis arrays of shape (3, n):
      low   -- lower deposit node index along the axis,
      frac  -- fractional position within [low, low+1],
      act   -- 1.0 where the raw displaced position is inside the cell-center
               box (derivative active), 0.0 where the clamp absorbs motion.
    """
    n = grid.n
    low = np.empty((3, n), dtype=np.int64)
    frac = np.empty((3, n))
    act = np.empty((3, n))
    base = index_coords(grid)
    for axis in range(3):
        na = grid.dims[axis]
        pos = base[axis] + (dt / grid.spacing[axis]) * v_values[axis * n:(axis + 1) * n]
        if na == 1:
            low[axis] = 0
            frac[axis] = 0.0
            act[axis] = 0.0
            continue
        inside = (pos >= 0.0) & (pos <= na - 1.0)
        clamped = np.clip(pos, 0.0, na - 1.0)
        lo = np.minimum(np.floor(clamped), na - 2.0)
        low[axis] = lo.astype(np.int64)
        frac[axis] = clamped - lo
        act[axis] = inside.astype(float)
    return low, frac, act


def _deposit_rows(grid: Grid, low: np.ndarray) -> np.ndarray:
    """Flat row indices of the 8 deposit corners, shape (8, n)."""
    n1, n2, n3 = grid.dims
    ix0 = low[0]
    iy0 = low[1]
    iz0 = low[2]
    ix1 = np.minimum(ix0 + 1, n1 - 1)
    iy1 = np.minimum(iy0 + 1, n2 - 1)
    iz1 = np.minimum(iz0 + 1, n3 - 1)
    rows = np.empty((8, grid.n), dtype=np.int64)
    corner = 0
    for bz, iz in ((0, iz0), (1, iz1)):
        for by, iy in ((0, iy0), (1, iy1)):
            for bx, ix in ((0, ix0), (1, ix1)):
                rows[corner] = ix + n1 * (iy + n2 * iz)
                corner += 1
    return rows


def build_pic_matrix(v: VectorField, dt: float) -> sp.csr_matrix:
    """Particle-in-cell redistribution matrix S(v).

    Column k spreads voxel k's mass over the 8 cell centers surrounding its
    displaced position; displaced positions are clamped to the cell-center
    box so every column sums to exactly 1.
    """
    grid = v.grid
    n = grid.n
    low, frac, _ = _pic_geometry(grid, v.values, dt)
    rows = _deposit_rows(grid, low)
    wx1, wy1, wz1 = frac
    wx0, wy0, wz0 = 1.0 - wx1, 1.0 - wy1, 1.0 - wz1
    data = np.empty((8, n))
    corner = 0
    for wz in (wz0, wz1):
        for wy in (wy0, wy1):
            for wx in (wx0, wx1):
                data[corner] = wx * wy * wz
                corner += 1
    cols = np.broadcast_to(np.arange(n), (8, n))
    s = sp.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))
    s.sum_duplicates()
    return s


def build_pic_jacobian(v: VectorField, mass: np.ndarray, dt: float) -> sp.csr_matrix:
    """Exact local derivative B = d/dv [S(v) mass], an (n, 3n) sparse matrix.

    Entries differentiate the trilinear deposit weights of each voxel's mass
    with respect to its own velocity components; coordinates absorbed by the
    domain clamp carry zero derivative.
    """
    grid = v.grid
    n = grid.n
    mass = np.asarray(mass, dtype=float)
    low, frac, act = _pic_geometry(grid, v.values, dt)
    rows = _deposit_rows(grid, low)
    wx1, wy1, wz1 = frac
    wx0, wy0, wz0 = 1.0 - wx1, 1.0 - wy1, 1.0 - wz1
    w_lohi = ((wx0, wx1), (wy0, wy1), (wz0, wz1))
    # Chain factor d(frac)/d(v_axis), zeroed where the clamp is active.
    scale = np.stack([act[a] * (dt / grid.spacing[a]) for a in range(3)])

    data = np.empty((3, 8, n))
    base_cols = np.broadcast_to(np.arange(n), (8, n))
    cols = np.empty((3, 8, n), dtype=np.int64)
    for axis in range(3):
        cols[axis] = base_cols + axis * n
        corner = 0
        for bz in (0, 1):
            for by in (0, 1):
                for bx in (0, 1):
                    bits = (bx, by, bz)
                    sign = 1.0 if bits[axis] else -1.0
                    other = mass * scale[axis] * sign
                    for a2 in range(3):
                        if a2 != axis:
                            other = other * w_lohi[a2][bits[a2]]
                    data[axis, corner] = other
                    corner += 1
    rows3 = np.broadcast_to(rows, (3, 8, n))
    b = sp.csr_matrix((data.ravel(), (rows3.ravel(), cols.ravel())), shape=(n, 3 * n))
    b.sum_duplicates()
    return b


def apply_advection(rho: ScalarField, v: VectorField, dt: float) -> ScalarField:
    """Advect a density by one step: S(v) @ rho. Preserves the total exactly."""
    s = build_pic_matrix(v, dt)
    return ScalarField(rho.grid, s @ rho.values)


def step(rho: ScalarField, v: VectorField, r: ScalarField, chi: IndicatorField,
         diffusion: DiffusionSolver, dt: float) -> ScalarField:
    """One operator-split step: source, then advection, then implicit diffusion.

    The diffusion solver carries sigma*dt; dt here feeds the source and
    advection sub-steps. Discrete mass balance holds:
    sum(out) = sum(rho) + dt * sum(r * chi * rho).
    """
    fed = apply_source(rho, r, chi, dt)
    moved = apply_advection(fed, v, dt)
    return ScalarField(rho.grid, diffusion.solve(moved.values))


def forward(rho0: ScalarField, series: TimeSeries, diffusion: DiffusionSolver) -> list[ScalarField]:
    """Chain m operator-split steps, returning densities rho_1 .. rho_m."""
    out = []
    current = rho0
    for i in range(series.m):
        current = step(current, series.velocity(i), series.source(i),
                       series.indicator(i), diffusion, series.dt)
        out.append(current)
    return out


def forward_values(rho0: np.ndarray, series: TimeSeries, diffusion: DiffusionSolver) -> np.ndarray:
    """Array variant of :func:`forward`: returns the full (m+1, n) chain incl. rho_0."""
    chain = np.empty((series.m + 1, series.grid.n))
    chain[0] = rho0
    current = ScalarField(series.grid, rho0)
    for i, f in enumerate(forward(current, series, diffusion)):
        chain[i + 1] = f.values
    return chain
