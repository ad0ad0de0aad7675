"""Problem definition: potential, control shape functions, initial density, config.

The reference setup is V = 2x^2 + 3y^2 with D = 2 on [-4, 4]^2, a cosine
bump alpha for the gradient-shaped control and a stream function phi
(stationary density times a polynomial bubble) for the rotational
control.  Everything is overridable through ExperimentConfig, whose
defaults reproduce that setup.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from typing import Callable, NamedTuple

import numpy as np

from .fields import (
    Grid2D,
    QuadratureWeights,
    ScalarField,
    VectorField,
    bilinear_interpolate,
    gradient,
    integrate,
    laplacian,
    make_grid,
    perp_gradient,
    trapezoid_weights,
)

__all__ = [
    "QuadraticPotential",
    "TabulatedPotential",
    "ShapeFunctions",
    "ShapeBcReport",
    "GaussianComponent",
    "InitialDensitySpec",
    "CostWeights",
    "ExperimentConfig",
    "reference_shapes",
    "tabulated_shapes",
    "validate_shape_bcs",
    "desired_vorticity",
    "build_initial_density",
    "reference_problem",
]

# Floor applied wherever a field is divided by rho_s.
RHO_FLOOR = 1e-300


@dataclass(frozen=True)
class QuadraticPotential:
    """V(x, y) = a*x^2 + b*y^2 with a, b > 0 (confining)."""

    a: float
    b: float

    def __post_init__(self) -> None:
        if not (self.a > 0.0 and self.b > 0.0):
            raise ValueError("potential curvatures must be positive")

    def value(self, x, y):
        return self.a * np.asarray(x) ** 2 + self.b * np.asarray(y) ** 2

    def grad(self, x, y):
        return 2.0 * self.a * np.asarray(x), 2.0 * self.b * np.asarray(y)

    def on_grid(self, grid: Grid2D) -> ScalarField:
        X, Y = grid.meshgrid()
        return ScalarField(grid, self.value(X, Y))

    def grad_on_grid(self, grid: Grid2D) -> VectorField:
        X, Y = grid.meshgrid()
        gx, gy = self.grad(X, Y)
        return VectorField(grid, ScalarField(grid, gx), ScalarField(grid, gy))

    def descriptor(self) -> dict:
        return {"kind": "quadratic", "a": self.a, "b": self.b}


@dataclass
class TabulatedPotential:
    """Potential given by nodal values plus a consistent nodal gradient.

    The supplied gradient must agree with the stencil gradient of the
    values to 1e-6 relative in max norm; this guards against mismatched
    inputs.
    """

    values: ScalarField
    grad_field: VectorField

    def __post_init__(self) -> None:
        if self.values.grid != self.grad_field.grid:
            raise ValueError("value and gradient grids differ")
        g = gradient(self.values)
        scale = max(self.grad_field.max_norm(), 1e-30)
        err = max(
            np.abs(g.x.values - self.grad_field.x.values).max(),
            np.abs(g.y.values - self.grad_field.y.values).max(),
        )
        if err > 1e-6 * scale:
            raise ValueError(
                f"supplied gradient inconsistent with tabulated values "
                f"(rel err {err / scale:.3e} > 1e-6)"
            )

    def value(self, x, y):
        return bilinear_interpolate(self.values, x, y)

    def grad(self, x, y):
        return (
            bilinear_interpolate(self.grad_field.x, x, y),
            bilinear_interpolate(self.grad_field.y, x, y),
        )

    def on_grid(self, grid: Grid2D) -> ScalarField:
        if grid != self.values.grid:
            raise ValueError("tabulated potential is bound to its own grid")
        return self.values

    def grad_on_grid(self, grid: Grid2D) -> VectorField:
        if grid != self.values.grid:
            raise ValueError("tabulated potential is bound to its own grid")
        return self.grad_field

    def descriptor(self) -> dict:
        return {"kind": "tabulated"}


@dataclass
class ShapeFunctions:
    """Control shape functions: a scalar bump alpha and a stream function phi.

    Nodal fields are always present.  When the shapes come from closed
    forms the point evaluators (``*_fn``) are set and ``analytic`` is
    True; otherwise evaluation falls back to bilinear interpolation of
    the nodal data.  ``scaled_perp_phi`` holds (1/rho_s) * perp_grad(phi),
    which is the drift actually entering the dynamics; for the reference
    shapes it is computed in closed form so no division by a tiny rho_s
    ever happens.
    """

    grid: Grid2D
    alpha: ScalarField
    grad_alpha: VectorField
    phi: ScalarField
    perp_grad_phi: VectorField
    scaled_perp_phi: VectorField
    analytic: bool = False
    alpha_fn: Callable | None = None
    grad_alpha_fn: Callable | None = None
    phi_fn: Callable | None = None
    scaled_perp_phi_fn: Callable | None = None

    def grad_alpha_at(self, x, y):
        if self.grad_alpha_fn is not None:
            return self.grad_alpha_fn(x, y)
        return (
            bilinear_interpolate(self.grad_alpha.x, x, y),
            bilinear_interpolate(self.grad_alpha.y, x, y),
        )

    def scaled_perp_phi_at(self, x, y):
        if self.scaled_perp_phi_fn is not None:
            return self.scaled_perp_phi_fn(x, y)
        return (
            bilinear_interpolate(self.scaled_perp_phi.x, x, y),
            bilinear_interpolate(self.scaled_perp_phi.y, x, y),
        )

    def phi_at(self, x, y):
        if self.phi_fn is not None:
            return self.phi_fn(x, y)
        return bilinear_interpolate(self.phi, x, y)


def reference_shapes(
    grid: Grid2D, potential, D: float, rho_s: ScalarField
) -> ShapeFunctions:
    """Reference shapes: alpha = cos(pi x/2L) cos(pi y/2L), phi = rho_s * g.

    g(x, y) = (L^2/4)(x^2/L^2 - 1)(y^2/L^2 - 1) vanishes on the boundary,
    so phi = 0 on the whole boundary and the rotational drift is exactly
    tangential there.  All evaluators are closed-form; scaled_perp_phi =
    perp_grad(g) - g*perp_grad(V)/D, which cancels rho_s algebraically.
    """
    L = grid.L
    X, Y = grid.meshgrid()

    def alpha_fn(x, y):
        return np.cos(np.pi * np.asarray(x) / (2 * L)) * np.cos(
            np.pi * np.asarray(y) / (2 * L)
        )

    def grad_alpha_fn(x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        k = np.pi / (2 * L)
        return (
            -k * np.sin(k * x) * np.cos(k * y),
            -k * np.cos(k * x) * np.sin(k * y),
        )

    def g_fn(x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (L**2 / 4.0) * (x**2 / L**2 - 1.0) * (y**2 / L**2 - 1.0)

    def g_grad_fn(x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (
            0.5 * x * (y**2 / L**2 - 1.0),
            0.5 * y * (x**2 / L**2 - 1.0),
        )

    # rho_s evaluator consistent with the nodal field: anchor at the node of
    # largest rho_s and scale by the analytic Boltzmann ratio.
    i0, j0 = np.unravel_index(np.argmax(rho_s.values), rho_s.values.shape)
    v_ref = float(potential.value(grid.x[i0], grid.y[j0]))
    r_ref = float(rho_s.values[i0, j0])

    def rho_s_fn(x, y):
        return r_ref * np.exp(-(potential.value(x, y) - v_ref) / D)

    def phi_fn(x, y):
        return rho_s_fn(x, y) * g_fn(x, y)

    def scaled_perp_phi_fn(x, y):
        # (1/rho_s) perp_grad(rho_s * g) = perp_grad(g) - g * perp_grad(V) / D
        gx, gy = g_grad_fn(x, y)
        vx, vy = potential.grad(x, y)
        g = g_fn(x, y)
        return (gy - g * vy / D, -gx + g * vx / D)

    alpha = ScalarField(grid, alpha_fn(X, Y))
    gax, gay = grad_alpha_fn(X, Y)
    grad_alpha = VectorField(grid, ScalarField(grid, gax), ScalarField(grid, gay))

    phi = ScalarField(grid, rho_s.values * g_fn(X, Y))
    spx, spy = scaled_perp_phi_fn(X, Y)
    scaled = VectorField(grid, ScalarField(grid, spx), ScalarField(grid, spy))
    perp = VectorField(
        grid,
        ScalarField(grid, rho_s.values * spx),
        ScalarField(grid, rho_s.values * spy),
    )

    return ShapeFunctions(
        grid=grid,
        alpha=alpha,
        grad_alpha=grad_alpha,
        phi=phi,
        perp_grad_phi=perp,
        scaled_perp_phi=scaled,
        analytic=True,
        alpha_fn=alpha_fn,
        grad_alpha_fn=grad_alpha_fn,
        phi_fn=phi_fn,
        scaled_perp_phi_fn=scaled_perp_phi_fn,
    )


def tabulated_shapes(
    alpha: ScalarField, phi: ScalarField, rho_s: ScalarField
) -> ShapeFunctions:
    """Shapes from nodal tables only; gradients by stencil, rho_s floored."""
    grid = alpha.grid
    if phi.grid != grid or rho_s.grid != grid:
        raise ValueError("shape fields live on different grids")
    perp = perp_gradient(phi)
    denom = np.maximum(rho_s.values, RHO_FLOOR)
    scaled = VectorField(
        grid,
        ScalarField(grid, perp.x.values / denom),
        ScalarField(grid, perp.y.values / denom),
    )
    return ShapeFunctions(
        grid=grid,
        alpha=alpha,
        grad_alpha=gradient(alpha),
        phi=phi,
        perp_grad_phi=perp,
        scaled_perp_phi=scaled,
        analytic=False,
    )


@dataclass(frozen=True)
class ShapeBcReport:
    """Measured boundary-normal components of the control drifts.

    The shape functions are supposed to satisfy <grad alpha, n> = 0 and
    <perp_grad phi, n> = 0 on the boundary.  The report records the
    measured maxima and flags each condition against a tolerance
    (1e-6 for analytic shapes, 5*dx^2 for tabulated ones); it does not
    raise, because the reference alpha genuinely violates its condition
    and the violation is part of the record.
    """

    max_alpha_normal: float
    max_phi_perp_normal: float
    tolerance: float
    alpha_ok: bool
    phi_ok: bool


def validate_shape_bcs(shapes: ShapeFunctions) -> ShapeBcReport:
    grid = shapes.grid
    tol = 1e-6 if shapes.analytic else 5.0 * grid.dx**2

    def edge_max(F: VectorField) -> float:
        return float(
            max(
                np.abs(F.x.values[0, :]).max(),
                np.abs(F.x.values[-1, :]).max(),
                np.abs(F.y.values[:, 0]).max(),
                np.abs(F.y.values[:, -1]).max(),
            )
        )

    a = edge_max(shapes.grad_alpha)
    p = edge_max(shapes.perp_grad_phi)
    return ShapeBcReport(a, p, tol, a <= tol, p <= tol)


def desired_vorticity(shapes: ShapeFunctions) -> ScalarField:
    """Target vorticity omega_d = Laplacian(phi), from the nodal phi.

    The stencil Laplacian of the tabulated phi is used even when phi has
    a closed form: the same discrete field then appears in the reduced
    vorticity matrices, which keeps the reduced target exactly
    consistent with this one.
    """
    return laplacian(shapes.phi)


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: tuple[float, float]
    var: tuple[float, float]

    def __post_init__(self) -> None:
        if not self.weight > 0.0:
            raise ValueError("mixture weights must be positive")
        if not (self.var[0] > 0.0 and self.var[1] > 0.0):
            raise ValueError("component variances must be positive")


@dataclass(frozen=True)
class InitialDensitySpec:
    """Truncated Gaussian mixture; weights must sum to one."""

    components: tuple[GaussianComponent, ...]

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("mixture needs at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {total}, expected 1")

    def density(self, x, y):
        """Un-truncated mixture density at points."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        for c in self.components:
            vx, vy = c.var
            norm = 1.0 / (2.0 * np.pi * np.sqrt(vx * vy))
            out += (
                c.weight
                * norm
                * np.exp(
                    -((x - c.mean[0]) ** 2) / (2 * vx) - ((y - c.mean[1]) ** 2) / (2 * vy)
                )
            )
        return out


def build_initial_density(
    spec: InitialDensitySpec, grid: Grid2D, w: QuadratureWeights
) -> ScalarField:
    """Mixture density restricted to the domain and renormalized to unit mass."""
    X, Y = grid.meshgrid()
    vals = spec.density(X, Y)
    rho = ScalarField(grid, vals)
    mass = integrate(rho, w)
    if mass <= 0.0:
        raise ValueError("initial density has nonpositive mass on the domain")
    rho = ScalarField(grid, vals / mass)
    if not np.all(rho.values > 0.0):
        raise ValueError("initial density must be strictly positive")
    return rho


@dataclass(frozen=True)
class CostWeights:
    """Objective weights; all nonnegative.  optimize() additionally
    requires R1, R2 > 0 for coercivity in the controls."""

    Q1: float = 1.0e4
    Q2: float = 10.0
    R1: float = 1.0
    R2: float = 1.0
    Qf: float = 100.0
    Rf: float = 1.0

    def __post_init__(self) -> None:
        for name in ("Q1", "Q2", "R1", "R2", "Qf", "Rf"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"cost weight {name} must be nonnegative")


_WEIGHT_KEYS = ("Q1", "Q2", "R1", "R2", "Qf", "Rf")


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete run configuration; defaults reproduce the reference study."""

    L: float = 4.0
    nx: int = 101
    ny: int = 101
    D: float = 2.0
    M: int = 21
    t0: float = 0.0
    tf: float = 1.0
    dt: float = 5.0e-3
    weights: CostWeights = field(default_factory=CostWeights)
    n_particles: int = 100_000
    seed: int = 0
    u1_init: float = 0.0
    u2_init: float = 1.0
    coarse_nx: int = 20
    coarse_ny: int = 20
    velocity_window: int = 1
    # substeps per control interval for the particle integrator; 2 keeps
    # the weak error under the Monte Carlo budget at N = 1e5
    em_substeps: int = 2

    def __post_init__(self) -> None:
        if self.D <= 0.0:
            raise ValueError("diffusion coefficient D must be positive")
        if self.M < 1:
            raise ValueError("mode count M must be at least 1")
        if not self.tf > self.t0:
            raise ValueError("tf must exceed t0")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        horizon = self.tf - self.t0
        k = round(horizon / self.dt)
        if k < 1 or abs(k * self.dt - horizon) > 1e-9 * horizon:
            raise ValueError("horizon (tf - t0) must be an integer number of steps")
        if self.n_particles < 1:
            raise ValueError("n_particles must be positive")
        if self.coarse_nx < 2 or self.coarse_ny < 2:
            raise ValueError("coarse grid must have at least 2 cells per axis")
        if self.velocity_window < 1:
            raise ValueError("velocity window must be at least one step")
        if self.em_substeps < 1:
            raise ValueError("em_substeps must be at least 1")
        # grid validity via make_grid
        make_grid(self.L, self.nx, self.ny)

    @property
    def n_steps(self) -> int:
        return round((self.tf - self.t0) / self.dt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {k: getattr(self.weights, k) for k in _WEIGHT_KEYS}
        return d

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ValueError("config root must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "weights" in kwargs:
            wdata = kwargs["weights"]
            if not isinstance(wdata, dict):
                raise ValueError("config 'weights' must be an object")
            unknown_w = set(wdata) - set(_WEIGHT_KEYS)
            if unknown_w:
                raise ValueError(f"unknown weight keys: {sorted(unknown_w)}")
            kwargs["weights"] = CostWeights(**wdata)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def eigen_hash(self) -> str:
        """Hash of the fields that determine the eigenbasis artifacts."""
        sub = {k: self.to_dict()[k] for k in ("L", "nx", "ny", "D", "M")}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()


class ReferenceProblem(NamedTuple):
    potential: QuadraticPotential
    shapes: ShapeFunctions
    initial: InitialDensitySpec
    config: ExperimentConfig
    grid: Grid2D
    w: QuadratureWeights
    rho_s: ScalarField


def reference_problem(config: ExperimentConfig | None = None) -> ReferenceProblem:
    """Assemble the reference study (optionally at a different resolution).

    The potential, shape functions and the two-bump initial mixture are
    fixed; grid, horizon, weights etc. come from the config.
    """
    cfg = config if config is not None else ExperimentConfig()
    grid = make_grid(cfg.L, cfg.nx, cfg.ny)
    w = trapezoid_weights(grid)
    potential = QuadraticPotential(2.0, 3.0)
    from .operators import stationary_density  # deferred: operators imports problem

    rho_s = stationary_density(potential, cfg.D, grid, w)
    shapes = reference_shapes(grid, potential, cfg.D, rho_s)
    initial = InitialDensitySpec(
        (
            GaussianComponent(0.5, (1.0, 0.0), (0.5, 0.5)),
            GaussianComponent(0.5, (-1.0, 0.0), (0.5, 0.5)),
        )
    )
    return ReferenceProblem(potential, shapes, initial, cfg, grid, w, rho_s)
