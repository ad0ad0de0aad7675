"""Particle-level validation: Euler-Maruyama ensembles and empirical flux.

Particles follow dX = (-grad V - u1 grad alpha - u2 (1/rho_s) perp_grad
phi) dt + sqrt(2D) dW with mirror reflection at the walls, i.e. the SDE
whose law the controlled equation evolves.  The ensemble is split into
fixed-size chunks, each with its own RNG stream seeded by (seed, chunk
index); results are bit-identical no matter how many worker threads run
the chunks.

The empirical flux estimator bins single-step displacements by the
position where the step started ("sample mean of the displacement" per
coarse cell) and multiplies by a binned density; clockwise circulation
shows up as a negative angular-momentum statistic x*vy - y*vx.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fields import FLOAT_FMT
from .control import ControlTrajectory
from .problem import InitialDensitySpec, ShapeFunctions

__all__ = [
    "CHUNK_SIZE",
    "ParticleEnsemble",
    "VelocityRecord",
    "FluxEstimate",
    "AngularMomentumStat",
    "sample_initial",
    "em_step",
    "simulate",
    "estimate_flux",
    "angular_momentum",
    "histogram_tv_distance",
]

CHUNK_SIZE = 16384
_MAX_REFLECTIONS = 1000


def _worker_count() -> int:
    raw = os.environ.get("FPCIRC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def _chunk_slices(n: int) -> list[slice]:
    return [slice(i, min(i + CHUNK_SIZE, n)) for i in range(0, n, CHUNK_SIZE)]


@dataclass
class ParticleEnsemble:
    """Positions in the box plus per-chunk RNG streams.

    The streams are part of the state: stepping mutates them, so two
    ensembles built with the same seed and stepped identically stay
    bit-identical (chunk i draws from SeedSequence((seed, i))).
    """

    positions: np.ndarray
    L: float
    seed: int
    t: float = 0.0
    rngs: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must be (N, 2)")
        if np.max(np.abs(self.positions)) > self.L:
            raise ValueError("positions must start inside the box")
        if not self.rngs:
            self.rngs = [
                np.random.default_rng(np.random.SeedSequence((self.seed, i)))
                for i in range(len(_chunk_slices(len(self.positions))))
            ]

    @property
    def n(self) -> int:
        return len(self.positions)


def _reflect_into_box(x: np.ndarray, L: float) -> None:
    """Mirror coordinates into [-L, L] in place (x -> 2L - x style)."""
    for _ in range(_MAX_REFLECTIONS):
        over = x > L
        under = x < -L
        if not (over.any() or under.any()):
            return
        x[over] = 2.0 * L - x[over]
        x[under] = -2.0 * L - x[under]
    raise RuntimeError("reflection did not terminate (step too large)")


def sample_initial(
    spec: InitialDensitySpec, n: int, seed: int, L: float
) -> ParticleEnsemble:
    """Draw n particles from the truncated mixture by per-chunk rejection."""
    if n < 1:
        raise ValueError("need at least one particle")
    weights = np.array([c.weight for c in spec.components])
    means = np.array([c.mean for c in spec.components])
    sigmas = np.sqrt(np.array([c.var for c in spec.components]))
    cum = np.cumsum(weights)

    slices = _chunk_slices(n)
    rngs = [
        np.random.default_rng(np.random.SeedSequence((seed, i)))
        for i in range(len(slices))
    ]
    positions = np.empty((n, 2))
    drawn = 0
    accepted = 0
    for sl, rng in zip(slices, rngs):
        need = sl.stop - sl.start
        out = np.empty((need, 2))
        got = 0
        while got < need:
            m = need - got
            comp = np.searchsorted(cum, rng.random(m))
            cand = means[comp] + sigmas[comp] * rng.standard_normal((m, 2))
            keep = np.max(np.abs(cand), axis=1) <= L
            k = int(keep.sum())
            out[got : got + k] = cand[keep]
            got += k
            drawn += m
            accepted += k
            if drawn >= 1000 and accepted < 0.5 * drawn:
                raise ValueError(
                    f"rejection rate {1 - accepted / drawn:.2f} > 0.5: "
                    "mixture barely overlaps the domain"
                )
        positions[sl] = out
    return ParticleEnsemble(positions, L, seed, 0.0, rngs)


def _step_chunk(ens, sl, u1, u2, dt, shapes, potential, D):
    x = ens.positions[sl, 0]
    y = ens.positions[sl, 1]
    gvx, gvy = potential.grad(x, y)
    bx, by = -gvx, -gvy
    if u1 != 0.0:
        gax, gay = shapes.grad_alpha_at(x, y)
        bx = bx - u1 * gax
        by = by - u1 * gay
    if u2 != 0.0:
        spx, spy = shapes.scaled_perp_phi_at(x, y)
        bx = bx - u2 * spx
        by = by - u2 * spy
    rng = ens.rngs[sl.start // CHUNK_SIZE]
    noise = rng.standard_normal((sl.stop - sl.start, 2))
    amp = np.sqrt(2.0 * D * dt)
    ens.positions[sl, 0] = x + dt * bx + amp * noise[:, 0]
    ens.positions[sl, 1] = y + dt * by + amp * noise[:, 1]
    _reflect_into_box(ens.positions[sl, 0], ens.L)
    _reflect_into_box(ens.positions[sl, 1], ens.L)


def em_step(
    ens: ParticleEnsemble,
    u1: float,
    u2: float,
    dt: float,
    shapes: ShapeFunctions,
    potential,
    D: float,
    *,
    executor: ThreadPoolExecutor | None = None,
) -> ParticleEnsemble:
    """One Euler-Maruyama step with wall reflection; mutates and returns ens."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    slices = _chunk_slices(ens.n)
    if executor is None:
        for sl in slices:
            _step_chunk(ens, sl, u1, u2, dt, shapes, potential, D)
    else:
        futs = [
            executor.submit(_step_chunk, ens, sl, u1, u2, dt, shapes, potential, D)
            for sl in slices
        ]
        for f in futs:
            f.result()
    ens.t += dt
    return ens


@dataclass
class VelocityRecord:
    """Displacement samples from the trailing window of steps.

    positions are step midpoints (x_k + x_{k+1})/2 and velocities the
    (reflected) displacement over the step divided by its duration.
    Midpoint binning is what makes the per-cell mean estimate the flux
    velocity J/rho rather than the drift: conditioning on the start
    yields the full drift -grad V - ..., whose reversible part does not
    vanish at stationarity, while the midpoint (Stratonovich) reading
    averages the forward and reverse conditionings and leaves only the
    irreversible current.
    """

    positions: np.ndarray
    velocities: np.ndarray
    dt: float


def simulate(
    ens: ParticleEnsemble,
    traj: ControlTrajectory,
    shapes: ShapeFunctions,
    potential,
    D: float,
    *,
    velocity_window: int = 1,
    em_substeps: int = 1,
) -> tuple[ParticleEnsemble, VelocityRecord]:
    """Run all control steps; keep displacement samples of the last window.

    Each control interval is integrated with em_substeps Euler-Maruyama
    steps (controls held constant), shrinking the weak error without
    touching the control grid.
    """
    K = traj.n_steps
    if not 1 <= velocity_window <= K:
        raise ValueError("velocity window must lie in [1, K]")
    if em_substeps < 1:
        raise ValueError("need at least one substep")
    dt_s = traj.dt / em_substeps
    workers = _worker_count()
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    mids, vels = [], []
    try:
        for k in range(K):
            record = k >= K - velocity_window
            for _ in range(em_substeps):
                if record:
                    before = ens.positions.copy()
                em_step(
                    ens, traj.u1[k], traj.u2[k], dt_s, shapes, potential, D,
                    executor=executor,
                )
                if record:
                    mids.append(0.5 * (before + ens.positions))
                    vels.append((ens.positions - before) / dt_s)
    finally:
        if executor is not None:
            executor.shutdown()
    return ens, VelocityRecord(np.concatenate(mids), np.concatenate(vels), dt_s)


@dataclass
class FluxEstimate:
    """Coarse-grid density, mean velocity, and their product (the flux).

    Cells with fewer than min_count velocity samples carry NaN velocity
    (masked); density is defined for every cell from the final
    positions.
    """

    x_centers: np.ndarray
    y_centers: np.ndarray
    density: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    count: np.ndarray
    min_count: int

    @property
    def flux_x(self) -> np.ndarray:
        return self.density * self.vx

    @property
    def flux_y(self) -> np.ndarray:
        return self.density * self.vy

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "y", "density", "vx", "vy", "count"])
            for i, xv in enumerate(self.x_centers):
                for j, yv in enumerate(self.y_centers):
                    wr.writerow(
                        [
                            FLOAT_FMT % xv,
                            FLOAT_FMT % yv,
                            FLOAT_FMT % self.density[i, j],
                            FLOAT_FMT % self.vx[i, j],
                            FLOAT_FMT % self.vy[i, j],
                            str(int(self.count[i, j])),
                        ]
                    )


def estimate_flux(
    ens: ParticleEnsemble,
    record: VelocityRecord,
    coarse_nx: int = 20,
    coarse_ny: int = 20,
    *,
    min_count: int = 10,
) -> FluxEstimate:
    """Bin velocities by step-midpoint cell, density by final position."""
    L = ens.L
    xe = np.linspace(-L, L, coarse_nx + 1)
    ye = np.linspace(-L, L, coarse_ny + 1)
    cell_area = (xe[1] - xe[0]) * (ye[1] - ye[0])

    hist, _, _ = np.histogram2d(
        ens.positions[:, 0], ens.positions[:, 1], bins=[xe, ye]
    )
    density = hist / (ens.n * cell_area)

    ix = np.clip(np.searchsorted(xe, record.positions[:, 0], side="right") - 1, 0, coarse_nx - 1)
    iy = np.clip(np.searchsorted(ye, record.positions[:, 1], side="right") - 1, 0, coarse_ny - 1)
    flat = ix * coarse_ny + iy
    ncell = coarse_nx * coarse_ny
    count = np.bincount(flat, minlength=ncell).astype(float)
    sx = np.bincount(flat, weights=record.velocities[:, 0], minlength=ncell)
    sy = np.bincount(flat, weights=record.velocities[:, 1], minlength=ncell)
    with np.errstate(invalid="ignore", divide="ignore"):
        vx = sx / count
        vy = sy / count
    bad = count < min_count
    vx[bad] = np.nan
    vy[bad] = np.nan

    centers_x = 0.5 * (xe[:-1] + xe[1:])
    centers_y = 0.5 * (ye[:-1] + ye[1:])
    return FluxEstimate(
        centers_x,
        centers_y,
        density,
        vx.reshape(coarse_nx, coarse_ny),
        vy.reshape(coarse_nx, coarse_ny),
        count.reshape(coarse_nx, coarse_ny),
        min_count,
    )


@dataclass
class AngularMomentumStat:
    """Mean of x*vy - y*vx over displacement samples inside a disc."""

    mean: float
    std_error: float
    n_samples: int

    @property
    def z_score(self) -> float:
        return self.mean / self.std_error if self.std_error > 0.0 else 0.0


def angular_momentum(record: VelocityRecord, radius: float = 2.0) -> AngularMomentumStat:
    """Circulation statistic over velocity samples with |midpoint| <= radius."""
    r = np.hypot(record.positions[:, 0], record.positions[:, 1])
    sel = r <= radius
    s = (
        record.positions[sel, 0] * record.velocities[sel, 1]
        - record.positions[sel, 1] * record.velocities[sel, 0]
    )
    n = int(sel.sum())
    if n < 2:
        raise ValueError("too few samples inside the disc")
    return AngularMomentumStat(float(np.mean(s)), float(np.std(s, ddof=1) / np.sqrt(n)), n)


def _cell_assignment(nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Map nodal quadrature mass to coarse cells.

    Returns S with S[i, c] = share of node i belonging to cell c; nodes
    exactly on an interior edge split 0.5/0.5 (that is what trapezoid
    integration over each cell separately would do).
    """
    n_cells = len(edges) - 1
    S = np.zeros((len(nodes), n_cells))
    idx = np.clip(np.searchsorted(edges, nodes, side="right") - 1, 0, n_cells - 1)
    tol = 1e-9 * (edges[-1] - edges[0])
    for i, (x, c) in enumerate(zip(nodes, idx)):
        if c > 0 and abs(x - edges[c]) <= tol:
            S[i, c - 1] = 0.5
            S[i, c] = 0.5
        else:
            S[i, c] = 1.0
    return S


def histogram_tv_distance(
    ens: ParticleEnsemble,
    rho,                      # ScalarField on the fine grid
    w,                        # QuadratureWeights
    coarse_nx: int = 20,
    coarse_ny: int = 20,
) -> tuple[float, float]:
    """Total-variation distance between the ensemble histogram and a density.

    The density is binned by summing quadrature-weighted nodal values
    over each coarse cell, so both sides are cell probabilities.
    Returns (tv, budget) where budget is the Monte Carlo standard-error
    sum 0.5 * sum_c sqrt(p_c (1 - p_c) / N).
    """
    L = ens.L
    xe = np.linspace(-L, L, coarse_nx + 1)
    ye = np.linspace(-L, L, coarse_ny + 1)
    hist, _, _ = np.histogram2d(ens.positions[:, 0], ens.positions[:, 1], bins=[xe, ye])
    p_hat = hist / ens.n

    grid = rho.grid
    weighted = rho.values * w.w
    Sx = _cell_assignment(grid.x, xe)
    Sy = _cell_assignment(grid.y, ye)
    p_cell = Sx.T @ weighted @ Sy
    p_cell = np.clip(p_cell, 0.0, None)
    p_cell /= p_cell.sum()

    tv = 0.5 * float(np.abs(p_hat - p_cell).sum())
    budget = 0.5 * float(np.sum(np.sqrt(p_cell * (1.0 - p_cell) / ens.n)))
    return tv, budget
