"""Discretized transport cost: kinetic energy + source penalty + endpoint mismatch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DiffusionSolver, Grid, ScalarField
from .transport import TimeSeries, forward_values


@dataclass
class CostBreakdown:
    """Cost terms of one (v, r) candidate: total = gamma1 + alpha*gamma2 + beta*gamma3."""

    gamma1: float
    gamma2: float
    gamma3: float
    alpha: float
    beta: float
    total: float = None

    def __post_init__(self):
        self.total = self.gamma1 + self.alpha * self.gamma2 + self.beta * self.gamma3

    def as_dict(self) -> dict:
        return {
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "gamma3": self.gamma3,
            "alpha": self.alpha,
            "beta": self.beta,
            "total": self.total,
        }


def component_sum(v: np.ndarray, n: int) -> np.ndarray:
    """Collapse (m, 3n) component blocks to (m, n): x-block + y-block + z-block."""
    return v[:, :n] + v[:, n:2 * n] + v[:, 2 * n:]


def gamma1(rho_chain: np.ndarray, v: np.ndarray, grid: Grid, dt: float) -> float:
    """Kinetic energy: dt*dV * sum_i rho_{i+1} . (vx_i^2 + vy_i^2 + vz_i^2).

    ``rho_chain`` holds the post-step densities rho_1..rho_m, shape (m, n);
    slice i pairs with velocity slice i.
    """
    speed2 = component_sum(v * v, grid.n)
    return float(dt * grid.cell_volume * np.sum(rho_chain * speed2))


def gamma2(rho_chain: np.ndarray, r: np.ndarray, chi: np.ndarray, grid: Grid, dt: float) -> float:
    """Source penalty: dt*dV * sum_i rho_{i+1} . (r_i^2 * chi_i)."""
    return float(dt * grid.cell_volume * np.sum(rho_chain * r * r * chi))


def gamma3(rho_m: np.ndarray, rho_target: np.ndarray, grid: Grid) -> float:
    """Endpoint mismatch: dV * ||rho_m - rho_target||^2."""
    diff = np.asarray(rho_m) - np.asarray(rho_target)
    return float(grid.cell_volume * np.dot(diff, diff))


def cost_breakdown(rho_chain: np.ndarray, series: TimeSeries, rho_target: np.ndarray,
                   alpha: float, beta: float) -> CostBreakdown:
    """Assemble all three terms for a forward chain (rho_chain excludes rho_0)."""
    grid = series.grid
    return CostBreakdown(
        gamma1=gamma1(rho_chain, series.v, grid, series.dt),
        gamma2=gamma2(rho_chain, series.r, series.chi, grid, series.dt),
        gamma3=gamma3(rho_chain[-1], rho_target, grid),
        alpha=alpha,
        beta=beta,
    )


def evaluate_cost(rho0: ScalarField, series: TimeSeries, diffusion: DiffusionSolver,
                  rho_target: ScalarField, alpha: float, beta: float):
    """Run the forward chain and price it; returns (CostBreakdown, chain (m+1, n))."""
    chain = forward_values(rho0.values, series, diffusion)
    return cost_breakdown(chain[1:], series, rho_target.values, alpha, beta), chain
