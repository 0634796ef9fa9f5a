"""D2Q9 lattice Boltzmann solver with BGK collision and half-way bounce-back.

Arrays are laid out (nx, ny, 9): axis 0 is x (flow direction), axis 1 is y,
axis 2 the discrete velocity index. The solver works in float64; states are
narrowed to float32 only when written to disk. All quantities are in lattice
units (cell = 1, step = 1).

Direction ordering is fixed and relied on by the opposite/reflection tables:

    0:( 0, 0)  1:( 1, 0)  2:( 0, 1)  3:(-1, 0)  4:( 0,-1)
    5:( 1, 1)  6:(-1, 1)  7:(-1,-1)  8:( 1,-1)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyBoundaryError,
    EmptyDomainError,
    InstabilityError,
    InvalidInputError,
    ShapeError,
)

# Populations beyond this magnitude mean the run has blown up; fail loudly
# instead of letting NaNs propagate into datasets.
STABILITY_LIMIT = 10.0


@dataclass(frozen=True)
class VelocitySet:
    """Discrete velocity stencil: directions c_i, weights w_i, reflection table."""

    directions: np.ndarray  # (q, 2) int
    weights: np.ndarray  # (q,) float
    opposite: np.ndarray  # (q,) int, opposite[i] indexes -c_i
    cs2: float  # lattice sound speed squared

    def validate(self) -> None:
        """Check the moment identities instead of trusting the constants.

        Requires: sum w = 1, sum w c = 0, sum w c_a c_b = cs2 I,
        opposite is an involution mapping c_i to -c_i, direction 0 is rest.
        """
        c, w = self.directions, self.weights
        if not np.all(c[0] == 0):
            raise InvalidInputError("direction 0 must be the rest velocity")
        if abs(w.sum() - 1.0) > 1e-14:
            raise InvalidInputError("weights must sum to 1")
        if np.abs(w @ c).max() > 1e-14:
            raise InvalidInputError("first weighted moment of c must vanish")
        second = np.einsum("i,ia,ib->ab", w, c.astype(float), c.astype(float))
        if np.abs(second - self.cs2 * np.eye(2)).max() > 1e-14:
            raise InvalidInputError("second weighted moment must equal cs2 * I")
        opp = self.opposite
        if not np.array_equal(opp[opp], np.arange(len(w))):
            raise InvalidInputError("opposite table must be an involution")
        if not np.array_equal(c[opp], -c):
            raise InvalidInputError("opposite table must negate directions")


def d2q9() -> VelocitySet:
    """The standard D2Q9 stencil, validated on construction."""
    directions = np.array(
        [[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1], [1, 1], [-1, 1], [-1, -1], [1, -1]],
        dtype=np.int64,
    )
    weights = np.array([4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36])
    opposite = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)
    vs = VelocitySet(directions, weights, opposite, cs2=1.0 / 3.0)
    vs.validate()
    return vs


D2Q9 = d2q9()


class BoundaryMode(str, enum.Enum):
    """Domain topology: fully periodic, or periodic in y with forced x ends."""

    FULLY_PERIODIC = "fully_periodic"
    INLET_OUTLET_X = "periodic_y_inlet_outlet_x"


@dataclass
class SolverConfig:
    tau: float
    inlet_velocity: float = 0.04
    boundary_mode: BoundaryMode = BoundaryMode.INLET_OUTLET_X

    def __post_init__(self):
        self.boundary_mode = BoundaryMode(self.boundary_mode)
        if not np.isfinite(self.tau) or self.tau <= 0.5:
            raise InvalidInputError(
                f"tau must exceed 0.5 for positive viscosity, got {self.tau}"
            )

    @property
    def viscosity(self) -> float:
        return D2Q9.cs2 * (self.tau - 0.5)


@dataclass
class LatticeState:
    """Distribution-function grid f of shape (nx, ny, 9)."""

    f: np.ndarray

    def __post_init__(self):
        if self.f.ndim != 3 or self.f.shape[2] != 9:
            raise ShapeError(f"lattice state must be (nx, ny, 9), got {self.f.shape}")

    @property
    def nx(self) -> int:
        return self.f.shape[0]

    @property
    def ny(self) -> int:
        return self.f.shape[1]

    def validate_finite(self) -> None:
        if not np.all(np.isfinite(self.f)):
            raise InstabilityError("lattice state contains non-finite populations")
        peak = np.abs(self.f).max()
        if peak > STABILITY_LIMIT:
            raise InstabilityError(
                f"population magnitude {peak:.3g} exceeds stability limit {STABILITY_LIMIT}"
            )


@dataclass
class BoundaryMask:
    """Binary solid/fluid grid, shape (nx, ny, 1); 1 marks solid cells."""

    solid: np.ndarray

    def __post_init__(self):
        if self.solid.ndim != 2:
            if self.solid.ndim == 3 and self.solid.shape[2] == 1:
                pass
            else:
                raise ShapeError(f"mask must be (nx, ny, 1), got {self.solid.shape}")
        else:
            self.solid = self.solid[:, :, None]
        vals = np.unique(self.solid)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise InvalidInputError("mask values must be exactly 0 or 1")
        self.solid = self.solid.astype(np.float64)

    @property
    def nx(self) -> int:
        return self.solid.shape[0]

    @property
    def ny(self) -> int:
        return self.solid.shape[1]

    @property
    def solid_bool(self) -> np.ndarray:
        return self.solid[:, :, 0] != 0.0

    @property
    def fluid_bool(self) -> np.ndarray:
        return self.solid[:, :, 0] == 0.0

    def validate_open_x_ends(self) -> None:
        """Inlet (x=0) and outlet (x=nx-1) columns must stay solid-free."""
        s = self.solid_bool
        if s[0, :].any() or s[-1, :].any():
            raise InvalidInputError("inlet/outlet columns must contain no solid cells")

    @staticmethod
    def empty(nx: int, ny: int) -> "BoundaryMask":
        return BoundaryMask(np.zeros((nx, ny, 1)))


@dataclass
class MacroFields:
    rho: np.ndarray  # (nx, ny)
    u: np.ndarray  # (nx, ny, 2)


def equilibrium(rho: float, u, vs: VelocitySet = D2Q9) -> np.ndarray:
    """BGK equilibrium populations for one cell.

    f_eq_i = w_i rho (1 + c.u/cs2 + (c.u)^2/(2 cs2^2) - u.u/(2 cs2)),
    the second-order polynomial whose first two moments are exactly
    (rho, rho u).
    """
    u = np.asarray(u, dtype=np.float64)
    if not (np.isfinite(rho) and np.all(np.isfinite(u))):
        raise InvalidInputError("equilibrium requires finite rho and u")
    rho_a = np.asarray(float(rho))[None, None]
    return equilibrium_field(rho_a, u[None, None, :], vs)[0, 0]


def equilibrium_field(rho: np.ndarray, u: np.ndarray, vs: VelocitySet = D2Q9) -> np.ndarray:
    """Vectorized equilibrium over a grid: rho (nx, ny), u (nx, ny, 2) -> (nx, ny, 9)."""
    cs2 = vs.cs2
    usq = (u[..., 0] ** 2 + u[..., 1] ** 2) / (2.0 * cs2)
    out = np.empty(rho.shape + (9,), dtype=np.float64)
    for i in range(9):
        cu = (vs.directions[i, 0] * u[..., 0] + vs.directions[i, 1] * u[..., 1]) / cs2
        out[..., i] = vs.weights[i] * rho * (1.0 + cu + 0.5 * cu * cu - usq)
    return out


def macroscopics(state: LatticeState, vs: VelocitySet = D2Q9) -> MacroFields:
    """Density and velocity moments; u is defined as 0 where rho is 0."""
    f = state.f
    rho = f.sum(axis=2)
    mom = np.zeros(rho.shape + (2,), dtype=np.float64)
    for i in range(1, 9):
        mom[..., 0] += vs.directions[i, 0] * f[..., i]
        mom[..., 1] += vs.directions[i, 1] * f[..., i]
    u = np.zeros_like(mom)
    np.divide(mom, rho[..., None], out=u, where=rho[..., None] != 0.0)
    return MacroFields(rho=rho, u=u)


def collide(state: LatticeState, tau: float, vs: VelocitySet = D2Q9) -> LatticeState:
    """BGK relaxation toward local equilibrium: f' = f + (f_eq - f)/tau.

    Per-cell density and momentum are invariant because the equilibrium
    shares the first two moments of f. Raises InstabilityError when any
    population leaves the stable range.
    """
    if not tau > 0.5:
        raise InvalidInputError(f"tau must exceed 0.5, got {tau}")
    fields = macroscopics(state, vs)
    feq = equilibrium_field(fields.rho, fields.u, vs)
    f_new = state.f + (feq - state.f) / tau
    out = LatticeState(f_new)
    out.validate_finite()
    return out


def stream(state: LatticeState, mask: BoundaryMask) -> LatticeState:
    """Propagate populations to neighbor cells with half-way bounce-back.

    A population leaving fluid cell x along c_i lands at x + c_i when that
    cell is fluid, and otherwise reflects in place into direction -c_i
    (the wall sits half-way along the link, so the reflection completes
    within the step). Solid cells carry no populations. The grid is
    toroidal: both axes wrap. In inlet/outlet mode the values streamed
    across the x seam land only in the forced columns, which
    apply_inlet_outlet overwrites in the same step.
    """
    f = state.f
    if (f.shape[0], f.shape[1]) != (mask.nx, mask.ny):
        raise ShapeError(
            f"state grid {f.shape[:2]} does not match mask grid {(mask.nx, mask.ny)}"
        )
    fluid = mask.fluid_bool
    solid = mask.solid_bool
    vs = D2Q9
    out = np.zeros_like(f)
    out[:, :, 0] = f[:, :, 0] * fluid
    for i in range(1, 9):
        cx, cy = int(vs.directions[i, 0]), int(vs.directions[i, 1])
        fi = f[:, :, i] * fluid
        nb_solid = np.roll(solid, (-cx, -cy), axis=(0, 1))
        out[:, :, i] += np.roll(np.where(nb_solid, 0.0, fi), (cx, cy), axis=(0, 1))
        out[:, :, int(vs.opposite[i])] += np.where(nb_solid, fi, 0.0)
    out *= fluid[:, :, None]
    return LatticeState(out)


def apply_inlet_outlet(state: LatticeState, cfg: SolverConfig) -> LatticeState:
    """Force the x ends: inlet to equilibrium(1, u_in), outlet to
    equilibrium(local density, u_in)."""
    u_in = np.zeros((state.ny, 2))
    u_in[:, 0] = cfg.inlet_velocity
    f = state.f.copy()
    f[0, :, :] = equilibrium_field(np.ones(state.ny), u_in)
    rho_out = state.f[-1, :, :].sum(axis=1)
    f[-1, :, :] = equilibrium_field(rho_out, u_in)
    return LatticeState(f)


def step(state: LatticeState, mask: BoundaryMask, cfg: SolverConfig) -> LatticeState:
    """One solver update: collide, stream, then force the open ends."""
    out = collide(state, cfg.tau)
    out = stream(out, mask)
    if cfg.boundary_mode == BoundaryMode.INLET_OUTLET_X:
        out = apply_inlet_outlet(out, cfg)
    return out


def uniform_state(mask: BoundaryMask, rho: float = 1.0, u=(0.0, 0.0)) -> LatticeState:
    """Equilibrium-initialized state on fluid cells, zeros on solid cells."""
    feq = equilibrium(rho, u)
    f = np.tile(feq, (mask.nx, mask.ny, 1))
    f *= mask.fluid_bool[:, :, None]
    return LatticeState(f)


def drag(state: LatticeState, mask: BoundaryMask, vs: VelocitySet = D2Q9) -> np.ndarray:
    """Momentum-exchange force on the solid cells.

    For every fluid-to-solid link (x, i) the wall absorbs the incident
    population and re-emits it reversed, transferring c_i (f_i + f_bounced)
    per step. With half-way bounce-back the bounced value equals the
    incident one, so each link contributes 2 c_i f_i(x). Pass the
    post-collision (pre-streaming) state: those are the populations about
    to hit the wall. Stored snapshots are post-step states, so collide
    them once before taking this sum.
    """
    solid = mask.solid_bool
    if not solid.any():
        raise EmptyBoundaryError("drag requires at least one solid cell")
    fluid = mask.fluid_bool
    f = state.f
    force = np.zeros(2)
    for i in range(1, 9):
        cx, cy = int(vs.directions[i, 0]), int(vs.directions[i, 1])
        # Links are interior by the mask contract (no solids on x ends),
        # so periodic neighbor lookup is exact in both boundary modes.
        nb_solid = np.roll(solid, (-cx, -cy), axis=(0, 1))
        link = fluid & nb_solid
        transfer = 2.0 * f[:, :, i][link].sum()
        force[0] += cx * transfer
        force[1] += cy * transfer
    return force


def flux_average(state: LatticeState, mask: BoundaryMask, vs: VelocitySet = D2Q9) -> np.ndarray:
    """Mean momentum density (rho u) over fluid cells."""
    fluid = mask.fluid_bool
    if not fluid.any():
        raise EmptyDomainError("flux average requires at least one fluid cell")
    f = state.f
    mom = np.zeros((state.nx, state.ny, 2))
    for i in range(1, 9):
        mom[:, :, 0] += vs.directions[i, 0] * f[:, :, i]
        mom[:, :, 1] += vs.directions[i, 1] * f[:, :, i]
    return np.array([mom[:, :, 0][fluid].mean(), mom[:, :, 1][fluid].mean()])


def divergence_field(u: np.ndarray, mask: BoundaryMask) -> np.ndarray:
    """Central-difference divergence of u on interior fluid cells.

    Defined only where the cell and its 4-neighborhood are fluid and in
    bounds; zero elsewhere.
    """
    if u.shape[:2] != (mask.nx, mask.ny):
        raise ShapeError(f"velocity grid {u.shape[:2]} does not match mask")
    fluid = mask.fluid_bool
    div = np.zeros((mask.nx, mask.ny))
    interior = np.zeros_like(fluid)
    interior[1:-1, 1:-1] = (
        fluid[1:-1, 1:-1]
        & fluid[2:, 1:-1]
        & fluid[:-2, 1:-1]
        & fluid[1:-1, 2:]
        & fluid[1:-1, :-2]
    )
    dux = np.zeros_like(div)
    duy = np.zeros_like(div)
    dux[1:-1, :] = (u[2:, :, 0] - u[:-2, :, 0]) / 2.0
    duy[:, 1:-1] = (u[:, 2:, 1] - u[:, :-2, 1]) / 2.0
    div[interior] = dux[interior] + duy[interior]
    return div


def mean_abs_divergence(u: np.ndarray, mask: BoundaryMask) -> float:
    """Reported divergence metric: mean |div u| over fluid cells."""
    div = divergence_field(u, mask)
    fluid = mask.fluid_bool
    if not fluid.any():
        raise EmptyDomainError("divergence metric requires fluid cells")
    return float(np.abs(div[fluid]).mean())


def mlups(cells: int, lbm_steps_equivalent: int, wall_seconds: float) -> float:
    """Million lattice updates per second: cells * steps * 1e-6 / seconds."""
    if not np.isfinite(wall_seconds) or wall_seconds <= 0:
        raise InvalidInputError(f"wall_seconds must be positive, got {wall_seconds}")
    return cells * lbm_steps_equivalent * 1e-6 / wall_seconds
