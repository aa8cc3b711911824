"""Triangular surface geometry and the Gaussian adsorption potential.

The fcc hollow sites form the triangular lattice {l}; every cell also holds
one hcp hollow site at ``(a1 + a2) / 3``. The potential energy surface is
a constant minus one Gaussian well per site:

    U(r) = U0 - sum_l [V_fcc g(r - l - r_fcc; s_fcc) + V_hcp g(r - l - r_hcp; s_hcp)]

with ``g`` a unit-height Gaussian. ``fit_potential`` adjusts the four well
parameters until the landscape and the resulting band structure match the
target barrier, gap, depth and site asymmetry.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, TYPE_CHECKING

import numpy as np
from scipy import optimize

from .constants import KINETIC_PREFACTOR, NI111_LATTICE_CONSTANT, TWO_PI
from .errors import ClassificationError, FitError, InvalidArgumentError

if TYPE_CHECKING:
    from .bands import KGrid

logger = logging.getLogger(__name__)

# Image wells whose summed contribution stays below this are dropped (meV).
IMAGE_TAIL_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class LatticeSpec:
    a: float
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    r_fcc: np.ndarray
    r_hcp: np.ndarray

    @property
    def direct(self) -> np.ndarray:
        """Rows are the primitive vectors."""
        return np.vstack([self.a1, self.a2])

    @property
    def reciprocal(self) -> np.ndarray:
        """Rows are the reciprocal primitive vectors."""
        return np.vstack([self.b1, self.b2])

    @property
    def cell_area(self) -> float:
        return float(abs(self.a1[0] * self.a2[1] - self.a1[1] * self.a2[0]))

    @property
    def site_separation(self) -> float:
        return float(np.linalg.norm(self.r_hcp - self.r_fcc))

    @property
    def r_top(self) -> np.ndarray:
        """On-top site, the remaining threefold point of the cell."""
        return 2.0 * (self.a1 + self.a2) / 3.0

    @property
    def bz_radius(self) -> float:
        """Distance from the zone centre to a Brillouin-zone corner."""
        return float(np.linalg.norm(self.b1)) / math.sqrt(3.0)

    def to_cartesian(self, frac: np.ndarray) -> np.ndarray:
        return np.asarray(frac, dtype=float) @ self.direct

    def to_fractional(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(r, dtype=float) @ self.reciprocal.T / TWO_PI


def build_lattice(a: float = NI111_LATTICE_CONSTANT) -> LatticeSpec:
    """Return the triangular lattice with fcc sites at the lattice points."""

    if not a > 0:
        raise InvalidArgumentError(f"lattice constant must be positive, got {a}")
    a1 = a * np.array([1.0, 0.0])
    a2 = a * np.array([0.5, math.sqrt(3.0) / 2.0])
    reciprocal = TWO_PI * np.linalg.inv(np.vstack([a1, a2])).T
    return LatticeSpec(
        a=float(a),
        a1=a1,
        a2=a2,
        b1=reciprocal[0],
        b2=reciprocal[1],
        r_fcc=np.zeros(2),
        r_hcp=(a1 + a2) / 3.0,
    )


@dataclass(frozen=True)
class PotentialParams:
    v_fcc: float
    v_hcp: float
    sigma_fcc: float
    sigma_hcp: float
    u0: float = 0.0

    def __post_init__(self) -> None:
        for name in ("v_fcc", "v_hcp", "sigma_fcc", "sigma_hcp"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{name} must be positive, got {value}")

    def wells(self, lattice: LatticeSpec) -> tuple[tuple[np.ndarray, float, float], ...]:
        """(site, depth, width) for the two wells of the cell."""
        return (
            (lattice.r_fcc, self.v_fcc, self.sigma_fcc),
            (lattice.r_hcp, self.v_hcp, self.sigma_hcp),
        )

    def scaled(self, depth_factor: float) -> "PotentialParams":
        """Same widths, depths multiplied by ``depth_factor``, U0 left unset."""
        return PotentialParams(
            v_fcc=self.v_fcc * depth_factor,
            v_hcp=self.v_hcp * depth_factor,
            sigma_fcc=self.sigma_fcc,
            sigma_hcp=self.sigma_hcp,
        )

    def to_dict(self, lattice: LatticeSpec) -> dict[str, float]:
        return {
            "a": lattice.a,
            "V_fcc": self.v_fcc,
            "V_hcp": self.v_hcp,
            "sigma_fcc": self.sigma_fcc,
            "sigma_hcp": self.sigma_hcp,
            "U0": self.u0,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "PotentialParams":
        return cls(
            v_fcc=float(payload["V_fcc"]),
            v_hcp=float(payload["V_hcp"]),
            sigma_fcc=float(payload["sigma_fcc"]),
            sigma_hcp=float(payload["sigma_hcp"]),
            u0=float(payload.get("U0", 0.0)),
        )


@dataclass(frozen=True)
class PotentialTargets:
    barrier: float = 196.0
    gap: float = 96.0
    depth_below_barrier: float = 207.0
    site_asymmetry: float = 0.0

    def __post_init__(self) -> None:
        for name, value in self.as_dict().items():
            if not value >= 0:
                raise InvalidArgumentError(f"target {name} must be non-negative, got {value}")

    def as_dict(self) -> dict[str, float]:
        return {
            "barrier": self.barrier,
            "gap": self.gap,
            "depth_below_barrier": self.depth_below_barrier,
            "site_asymmetry": self.site_asymmetry,
        }

    def scales(self) -> dict[str, float]:
        """Denominators of the relative residuals; the asymmetry uses the gap."""
        scales = {name: max(value, 1e-12) for name, value in self.as_dict().items()}
        scales["site_asymmetry"] = max(self.gap, 1.0)
        return scales


def _well_sum(
    lattice: LatticeSpec,
    points: np.ndarray,
    site: np.ndarray,
    depth: float,
    sigma: float,
    *,
    gradient: bool = False,
) -> np.ndarray:
    """Sum of one Gaussian well over all lattice images, at ``points``."""

    reach = sigma * math.sqrt(2.0 * math.log(max(depth, 1.0) * 10.0 / IMAGE_TAIL_TOLERANCE))
    n_max = int(math.ceil(reach * np.linalg.norm(lattice.b1) / TWO_PI)) + 1
    span = np.arange(-n_max, n_max + 1)
    offsets = np.stack(np.meshgrid(span, span, indexing="ij"), axis=-1).reshape(-1, 2) @ lattice.direct

    frac = lattice.to_fractional(points - site)
    reduced = lattice.to_cartesian(frac - np.floor(frac))
    d = reduced[..., None, :] - offsets
    weight = depth * np.exp(-np.sum(d * d, axis=-1) / (2.0 * sigma * sigma))
    if gradient:
        return np.sum(weight[..., None] * d, axis=-2) / (sigma * sigma)
    return np.sum(weight, axis=-1)


def _raw_potential(params: PotentialParams, lattice: LatticeSpec, points: np.ndarray) -> np.ndarray:
    total = np.zeros(points.shape[:-1])
    for site, depth, sigma in params.wells(lattice):
        total -= _well_sum(lattice, points, site, depth, sigma)
    return total


def make_potential(
    lattice: LatticeSpec,
    v_fcc: float,
    v_hcp: float,
    sigma_fcc: float,
    sigma_hcp: float,
) -> PotentialParams:
    """Build parameters whose additive constant puts the global minimum at zero.

    Both hollow sites are threefold points and therefore critical points of
    U; the lower of the two is the minimum.
    """

    bare = PotentialParams(v_fcc=v_fcc, v_hcp=v_hcp, sigma_fcc=sigma_fcc, sigma_hcp=sigma_hcp)
    sites = np.vstack([lattice.r_fcc, lattice.r_hcp])
    u0 = -float(np.min(_raw_potential(bare, lattice, sites)))
    return PotentialParams(v_fcc=v_fcc, v_hcp=v_hcp, sigma_fcc=sigma_fcc, sigma_hcp=sigma_hcp, u0=u0)


def potential_value(params: PotentialParams, lattice: LatticeSpec, r: np.ndarray) -> np.ndarray | float:
    """U(r) in meV for one point of shape (2,) or an array of shape (..., 2)."""

    points = np.asarray(r, dtype=float)
    values = params.u0 + _raw_potential(params, lattice, points)
    return float(values) if points.ndim == 1 else values


def potential_gradient(params: PotentialParams, lattice: LatticeSpec, r: np.ndarray) -> np.ndarray:
    points = np.asarray(r, dtype=float)
    grad = np.zeros(points.shape)
    for site, depth, sigma in params.wells(lattice):
        grad += _well_sum(lattice, points, site, depth, sigma, gradient=True)
    return grad


def fourier_coefficients(params: PotentialParams, lattice: LatticeSpec, h: np.ndarray) -> np.ndarray:
    """U_G for integer reciprocal indices ``h`` of shape (..., 2)."""

    h = np.asarray(h)
    g = h @ lattice.reciprocal
    g2 = np.sum(g * g, axis=-1)
    coeff = np.where(np.all(h == 0, axis=-1), params.u0, 0.0).astype(complex)
    for site, depth, sigma in params.wells(lattice):
        amplitude = depth * TWO_PI * sigma * sigma / lattice.cell_area
        coeff -= amplitude * np.exp(-0.5 * g2 * sigma * sigma) * np.exp(-1j * (g @ site))
    return coeff


def fourier_coefficient(params: PotentialParams, lattice: LatticeSpec, G: np.ndarray) -> complex:
    """U_G = (1/A_cell) ∫_cell U(r) exp(-iG·r) dr for a reciprocal-lattice vector G."""

    # G·a_i / 2π must be integer
    indices = np.asarray(G, dtype=float) @ lattice.direct.T / TWO_PI
    rounded = np.rint(indices)
    if np.any(np.abs(indices - rounded) > 1e-8 * np.maximum(1.0, np.abs(indices))):
        raise InvalidArgumentError(f"G={tuple(np.asarray(G))} is not a reciprocal lattice vector")
    return complex(fourier_coefficients(params, lattice, rounded.astype(int)))


def reconstruct_potential(
    params: PotentialParams,
    lattice: LatticeSpec,
    r: np.ndarray,
    cutoff: float,
) -> np.ndarray:
    """U(r) re-summed from the Fourier coefficients with |G| <= cutoff."""

    from .bands import planewave_indices

    h = planewave_indices(lattice, cutoff)
    coeff = fourier_coefficients(params, lattice, h)
    phases = np.exp(1j * (np.asarray(r, dtype=float) @ (h @ lattice.reciprocal).T))
    return np.real(phases @ coeff)


@dataclass(frozen=True, eq=False)
class PotentialLandscape:
    """Stationary points of U that the fit targets."""

    barrier: float
    saddle: np.ndarray
    u_fcc: float
    u_hcp: float
    u_top: float

    @property
    def site_asymmetry(self) -> float:
        return abs(self.u_hcp - self.u_fcc)


def find_saddle(params: PotentialParams, lattice: LatticeSpec) -> tuple[np.ndarray, float]:
    """Locate the fcc-hcp saddle point and return it with U there.

    A bounded 1D maximisation along the straight fcc→hcp segment seeds a 2D
    root search of the gradient.
    """

    start, stop = lattice.r_fcc, lattice.r_hcp

    def along(s: float) -> float:
        return -potential_value(params, lattice, start + s * (stop - start))

    line = optimize.minimize_scalar(along, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-10})
    seed = start + line.x * (stop - start)
    refined = optimize.root(lambda r: potential_gradient(params, lattice, r), seed, tol=1e-12)
    point = seed
    if refined.success and np.linalg.norm(refined.x - seed) < 0.25 * lattice.site_separation:
        point = refined.x
    return point, float(potential_value(params, lattice, point))


def potential_observables(params: PotentialParams, lattice: LatticeSpec) -> PotentialLandscape:
    saddle, u_saddle = find_saddle(params, lattice)
    u_fcc = float(potential_value(params, lattice, lattice.r_fcc))
    return PotentialLandscape(
        barrier=u_saddle - u_fcc,
        saddle=saddle,
        u_fcc=u_fcc,
        u_hcp=float(potential_value(params, lattice, lattice.r_hcp)),
        u_top=float(potential_value(params, lattice, lattice.r_top)),
    )


@dataclass(frozen=True)
class PotentialFit:
    params: PotentialParams
    observables: dict[str, float]
    residuals: dict[str, float]
    evaluations: int
    converged: bool
    cutoff: float
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def max_residual(self) -> float:
        return max(abs(value) for value in self.residuals.values())

    def to_dict(self, lattice: LatticeSpec) -> dict[str, Any]:
        payload: dict[str, Any] = self.params.to_dict(lattice)
        payload["fit_residuals"] = dict(self.residuals)
        payload["fit_observables"] = dict(self.observables)
        payload["fit_converged"] = self.converged
        payload["fit_evaluations"] = self.evaluations
        payload["cutoff"] = self.cutoff
        return payload


def default_initial_params(targets: PotentialTargets, lattice: LatticeSpec) -> PotentialParams:
    """Harmonic estimate: a well of width sigma whose vibrational quantum is the gap."""

    sigma = 0.4 * lattice.a / NI111_LATTICE_CONSTANT
    depth = sigma * sigma * targets.gap**2 / (2.0 * KINETIC_PREFACTOR)
    return make_potential(lattice, depth, depth, sigma, sigma)


def evaluate_fit_observables(
    params: PotentialParams,
    lattice: LatticeSpec,
    kgrid: "KGrid",
    cutoff: float,
    *,
    threads: int = 1,
) -> dict[str, float]:
    """Barrier, gap, depth below the crest and site asymmetry for ``params``."""

    from .bands import solve_bands

    landscape = potential_observables(params, lattice)
    table = solve_bands(params, lattice, kgrid, n_branches=6, cutoff=cutoff, threads=threads)
    lowest_center = float(table.centers[0])
    return {
        "barrier": landscape.barrier,
        "gap": table.gap,
        "depth_below_barrier": landscape.u_top - lowest_center,
        "site_asymmetry": landscape.site_asymmetry,
    }


class _FitConverged(Exception):
    pass


MAX_CUTOFF_ROUNDS = 3


def _search(
    start: PotentialParams,
    lattice: LatticeSpec,
    kgrid: "KGrid",
    cutoff: float,
    wanted: dict[str, float],
    scales: dict[str, float],
    *,
    max_iterations: int,
    tolerance: float,
    threads: int,
) -> tuple[dict[str, Any], list[float], bool]:
    best: dict[str, Any] = {"cost": math.inf}
    history: list[float] = []

    def cost(x: np.ndarray) -> float:
        v_fcc, v_hcp, s_fcc, s_hcp = np.exp(x)
        params = make_potential(lattice, v_fcc, v_hcp, s_fcc, s_hcp)
        try:
            observed = evaluate_fit_observables(params, lattice, kgrid, cutoff, threads=threads)
        except ClassificationError:
            return 1e6
        residuals = {name: (observed[name] - wanted[name]) / scales[name] for name in wanted}
        value = float(sum(r * r for r in residuals.values()))
        history.append(value)
        if value < best["cost"]:
            best.update(cost=value, params=params, observed=observed, residuals=residuals)
            logger.debug("fit evaluation %d: cost %.3e", len(history), value)
        if max(abs(r) for r in residuals.values()) < tolerance:
            raise _FitConverged
        return value

    x0 = np.log([start.v_fcc, start.v_hcp, start.sigma_fcc, start.sigma_hcp])
    converged = False
    try:
        optimize.minimize(
            cost,
            x0,
            method="Nelder-Mead",
            options={"maxiter": max_iterations, "xatol": 1e-6, "fatol": 1e-10},
        )
    except _FitConverged:
        converged = True
    return best, history, converged


def fit_potential(
    targets: PotentialTargets,
    lattice: LatticeSpec,
    *,
    initial: PotentialParams | None = None,
    cutoff: float | None = None,
    check_size: int = 6,
    max_iterations: int = 500,
    tolerance: float = 0.02,
    acceptance: float = 0.10,
    threads: int = 1,
) -> PotentialFit:
    """Nelder-Mead search over the four well parameters.

    Parameters are optimised in log space so they stay positive. The search
    stops as soon as every relative residual is below ``tolerance`` or after
    ``max_iterations`` simplex iterations, and keeps the best point seen.

    Without an explicit ``cutoff`` the plane-wave cutoff is converged for
    the starting point and checked again for the fitted wells. Narrower
    wells need more plane waves, so the search is restarted from the best
    point at the larger cutoff, at most ``MAX_CUTOFF_ROUNDS`` times.
    """

    from .bands import build_kgrid, converged_cutoff

    if not (targets.gap < targets.depth_below_barrier < targets.barrier + targets.gap):
        raise InvalidArgumentError(
            "inconsistent targets: need gap < depth_below_barrier < barrier + gap, got "
            f"{targets.as_dict()}"
        )

    start = initial or default_initial_params(targets, lattice)
    adaptive = cutoff is None
    if cutoff is None:
        cutoff = converged_cutoff(start, lattice)
    kgrid = build_kgrid(lattice, check_size)
    wanted = targets.as_dict()
    scales = targets.scales()

    history: list[float] = []
    for round_index in range(MAX_CUTOFF_ROUNDS):
        best, evaluations, converged = _search(
            start,
            lattice,
            kgrid,
            cutoff,
            wanted,
            scales,
            max_iterations=max_iterations,
            tolerance=tolerance,
            threads=threads,
        )
        history.extend(evaluations)
        if "params" not in best or not adaptive:
            break
        required = converged_cutoff(best["params"], lattice)
        if required <= cutoff:
            break
        logger.info(
            "fitted wells need cutoff %.3f 1/A instead of %.3f, refitting (round %d)",
            required,
            cutoff,
            round_index + 2,
        )
        start, cutoff = best["params"], required

    if "params" not in best:
        raise FitError("no admissible potential found: every trial left the 2+4 band regime", {})
    fit = PotentialFit(
        params=best["params"],
        observables=best["observed"],
        residuals=best["residuals"],
        evaluations=len(history),
        converged=converged,
        cutoff=float(cutoff),
        history=history,
    )
    logger.info(
        "potential fit finished after %d evaluations, max residual %.2f%%",
        fit.evaluations,
        100.0 * fit.max_residual,
    )
    if fit.max_residual >= acceptance:
        raise FitError(
            f"potential fit stalled with max residual {100.0 * fit.max_residual:.1f}%",
            fit.residuals,
        )
    return fit


__all__ = [
    "LatticeSpec",
    "PotentialFit",
    "PotentialLandscape",
    "PotentialParams",
    "PotentialTargets",
    "build_lattice",
    "default_initial_params",
    "evaluate_fit_observables",
    "find_saddle",
    "fit_potential",
    "fourier_coefficient",
    "fourier_coefficients",
    "make_potential",
    "potential_gradient",
    "potential_observables",
    "potential_value",
    "reconstruct_potential",
]
