"""Bloch bands of the adatom by plane-wave expansion on a periodic k-grid."""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np
from scipy import linalg

from .constants import HBAR_MEV_PS, KINETIC_PREFACTOR, TWO_PI
from .errors import ClassificationError, ConvergenceError, InvalidArgumentError, SolverError
from .lattice import LatticeSpec, PotentialParams, build_lattice, fourier_coefficients

logger = logging.getLogger(__name__)

LOWER_GROUP_SIZE = 2
UPPER_GROUP_SIZE = 4
NARROW_BAND_FACTOR = 50.0
CLUSTER_GAP_FACTOR = 10.0

# Branch centers and widths of the six lowest H/Ni(111) branches (meV).
REFERENCE_CENTERS = (104.487, 104.497, 200.346, 200.446, 200.621, 200.721)
REFERENCE_WIDTHS = (0.008, 0.008, 0.017, 0.146, 0.146, 0.017)


@dataclass(frozen=True, eq=False)
class KGrid:
    """Unshifted L×L grid k = (n1 b1 + n2 b2) / L."""

    L: int
    lattice: LatticeSpec

    @cached_property
    def indices(self) -> np.ndarray:
        n = np.arange(self.L)
        return np.stack(np.meshgrid(n, n, indexing="ij"), axis=-1)

    @cached_property
    def k_points(self) -> np.ndarray:
        return (self.indices / self.L) @ self.lattice.reciprocal

    @property
    def size(self) -> int:
        return self.L * self.L

    def flat_indices(self) -> np.ndarray:
        return self.indices.reshape(-1, 2)

    def wrap(self, n: np.ndarray) -> np.ndarray:
        return np.mod(n, self.L)

    def negate(self, n: np.ndarray) -> np.ndarray:
        return np.mod(-np.asarray(n), self.L)


def build_kgrid(lattice: LatticeSpec, L: int) -> KGrid:
    if L < 1:
        raise InvalidArgumentError(f"k-grid size must be positive, got {L}")
    return KGrid(L=int(L), lattice=lattice)


def reciprocal_shells(lattice: LatticeSpec, n_shells: int) -> np.ndarray:
    """Radii of the first ``n_shells`` + 1 distinct |G| values, starting at 0."""

    reach = n_shells + 2
    span = np.arange(-reach, reach + 1)
    h = np.stack(np.meshgrid(span, span, indexing="ij"), axis=-1).reshape(-1, 2)
    radii = np.linalg.norm(h @ lattice.reciprocal, axis=-1)
    distinct = np.unique(np.round(radii, 9))
    return distinct[: n_shells + 1]


def planewave_indices(lattice: LatticeSpec, cutoff: float, k: np.ndarray | None = None) -> np.ndarray:
    """Integer (h1, h2) of every G with |k+G| <= cutoff, ordered by |k+G|."""

    center = np.zeros(2) if k is None else np.asarray(k, dtype=float)
    reach = cutoff + float(np.linalg.norm(center))
    n_max = int(math.ceil(reach * lattice.a / TWO_PI)) + 1
    span = np.arange(-n_max, n_max + 1)
    h = np.stack(np.meshgrid(span, span, indexing="ij"), axis=-1).reshape(-1, 2)
    radii = np.linalg.norm(center + h @ lattice.reciprocal, axis=-1)
    keep = radii <= cutoff * (1.0 + 1e-9) + 1e-12
    h, radii = h[keep], radii[keep]
    order = np.lexsort((h[:, 1], h[:, 0], np.round(radii, 9)))
    return h[order]


def fold_to_zone(lattice: LatticeSpec, k: np.ndarray) -> np.ndarray:
    """k minus the nearest reciprocal lattice vector, i.e. k mapped into the first Brillouin zone."""

    k = np.asarray(k, dtype=float)
    base = np.floor(k @ lattice.direct.T / TWO_PI)
    span = np.arange(-1, 3)
    candidates = base + np.stack(np.meshgrid(span, span, indexing="ij"), axis=-1).reshape(-1, 2)
    shifted = k - candidates @ lattice.reciprocal
    return shifted[int(np.argmin(np.round(np.linalg.norm(shifted, axis=-1), 12)))]


@dataclass(frozen=True, eq=False)
class _PlanewaveBasis:
    """Plane waves of every zone-folded k up to ``cutoff``.

    ``h`` is the union over the first Brillouin zone; each k uses the
    subset with |k+G| <= cutoff, so k and k+G' share one basis up to order.
    """

    lattice: LatticeSpec
    cutoff: float
    h: np.ndarray
    potential_matrix: np.ndarray

    @classmethod
    def build(cls, potential: PotentialParams, lattice: LatticeSpec, cutoff: float) -> "_PlanewaveBasis":
        if cutoff < float(np.linalg.norm(lattice.b1)) * (1.0 - 1e-9):
            raise InvalidArgumentError(f"cutoff {cutoff} does not include the first reciprocal shell")
        h = planewave_indices(lattice, cutoff + lattice.bz_radius)
        return cls(
            lattice=lattice,
            cutoff=float(cutoff),
            h=h,
            potential_matrix=fourier_coefficients(potential, lattice, h[:, None] - h[None, :]),
        )

    def active(self, k: np.ndarray) -> np.ndarray:
        radii = np.linalg.norm(np.asarray(k, dtype=float) + self.h @ self.lattice.reciprocal, axis=-1)
        return radii <= self.cutoff * (1.0 + 1e-9) + 1e-12

    def hamiltonian(self, k: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        mask = self.active(k) if mask is None else mask
        kg = np.asarray(k, dtype=float) + self.h[mask] @ self.lattice.reciprocal
        kinetic = KINETIC_PREFACTOR * np.sum(kg * kg, axis=-1)
        return self.potential_matrix[np.ix_(mask, mask)] + np.diag(kinetic)


def build_planewave_hamiltonian(
    potential: PotentialParams,
    lattice: LatticeSpec,
    k: np.ndarray,
    cutoff: float,
) -> np.ndarray:
    """H_GG' = (ħ²/2m)|k+G|² δ_GG' + U_{G-G'} over the plane waves with |k+G| <= cutoff.

    Rows follow ``planewave_indices(lattice, cutoff, k)``.
    """

    if cutoff < float(np.linalg.norm(lattice.b1)) * (1.0 - 1e-9):
        raise InvalidArgumentError(f"cutoff {cutoff} does not include the first reciprocal shell")
    h = planewave_indices(lattice, cutoff, k)
    kg = np.asarray(k, dtype=float) + h @ lattice.reciprocal
    kinetic = KINETIC_PREFACTOR * np.sum(kg * kg, axis=-1)
    return fourier_coefficients(potential, lattice, h[:, None] - h[None, :]) + np.diag(kinetic)


@dataclass(frozen=True, eq=False)
class BandTable:
    """Energies, velocities and eigenvectors of the lowest branches on an L×L grid.

    Arrays are branch-major: ``energies[m, n1, n2]``, ``velocities[m, n1, n2, :]``
    and ``eigvecs[m, n1, n2, :]`` over the plane waves ``planewaves``.
    """

    energies: np.ndarray
    velocities: np.ndarray
    lattice: LatticeSpec
    eigvecs: np.ndarray | None = None
    planewaves: np.ndarray | None = None
    cutoff: float | None = None
    groups: tuple[tuple[int, ...], tuple[int, ...]] | None = None
    source: str = "solve"
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def n_branches(self) -> int:
        return int(self.energies.shape[0])

    @property
    def L(self) -> int:
        return int(self.energies.shape[1])

    @property
    def kgrid(self) -> KGrid:
        return KGrid(L=self.L, lattice=self.lattice)

    @cached_property
    def centers(self) -> np.ndarray:
        flat = self.energies.reshape(self.n_branches, -1)
        return 0.5 * (flat.max(axis=1) + flat.min(axis=1))

    @cached_property
    def widths(self) -> np.ndarray:
        flat = self.energies.reshape(self.n_branches, -1)
        return flat.max(axis=1) - flat.min(axis=1)

    def _require_groups(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.groups is None:
            raise ClassificationError("band table has no composite-group classification")
        return self.groups

    @property
    def lower(self) -> tuple[int, ...]:
        return self._require_groups()[0]

    @property
    def upper(self) -> tuple[int, ...]:
        return self._require_groups()[1]

    @cached_property
    def group_of(self) -> np.ndarray:
        """0 for lower-group branches, 1 for upper-group branches."""
        labels = np.zeros(self.n_branches, dtype=int)
        labels[list(self.upper)] = 1
        return labels

    @property
    def gap(self) -> float:
        return float(np.mean(self.centers[list(self.upper)]) - np.mean(self.centers[list(self.lower)]))

    def group_width(self, branches: Sequence[int]) -> float:
        block = self.energies[list(branches)]
        return float(block.max() - block.min())

    @property
    def upper_width(self) -> float:
        return self.group_width(self.upper)

    @property
    def lower_width(self) -> float:
        return self.group_width(self.lower)

    def with_groups(self, groups: tuple[tuple[int, ...], tuple[int, ...]] | None) -> "BandTable":
        return dataclasses.replace(self, groups=groups)

    def summary(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "L": self.L,
            "n_branches": self.n_branches,
            "centers_meV": [float(c) for c in self.centers],
            "widths_meV": [float(w) for w in self.widths],
            "cutoff_inv_A": self.cutoff,
            "n_planewaves": None if self.planewaves is None else int(len(self.planewaves)),
            "source": self.source,
        }
        if self.groups is not None:
            payload.update(
                groups={"A": list(self.lower), "E": list(self.upper)},
                gap_meV=self.gap,
                upper_width_meV=self.upper_width,
                lower_width_meV=self.lower_width,
            )
        payload.update(self.metadata)
        return payload


def band_velocities(energies: np.ndarray, lattice: LatticeSpec) -> np.ndarray:
    """(1/ħ)∇_k ε by central differences on the periodic grid, in Å/ps."""

    L = energies.shape[-1]
    d1 = (np.roll(energies, -1, axis=-2) - np.roll(energies, 1, axis=-2)) * (L / 2.0)
    d2 = (np.roll(energies, -1, axis=-1) - np.roll(energies, 1, axis=-1)) * (L / 2.0)
    # k = κ1 b1 + κ2 b2 with κ_i = k·a_i / 2π
    grad = (d1[..., None] * lattice.a1 + d2[..., None] * lattice.a2) / TWO_PI
    return grad / HBAR_MEV_PS


def group_velocity(bandtable: BandTable, k_index: Sequence[int], m: int) -> np.ndarray:
    n1, n2 = (int(n) % bandtable.L for n in k_index)
    return np.array(bandtable.velocities[m, n1, n2])


def _fix_gauge(vectors: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude coefficient is real positive."""
    rows = np.argmax(np.abs(vectors), axis=0)
    pivots = vectors[rows, np.arange(vectors.shape[1])]
    return vectors * (np.abs(pivots) / pivots)


def solve_bands(
    potential: PotentialParams,
    lattice: LatticeSpec,
    kgrid: KGrid,
    n_branches: int = 6,
    cutoff: float | None = None,
    *,
    threads: int = 1,
    classify: bool = True,
) -> BandTable:
    """Lowest ``n_branches`` Bloch energies on ``kgrid``.

    Each k is folded into the first Brillouin zone and solved over the plane
    waves with |k+G| <= cutoff. ``eigvecs[m, n1, n2, j]`` is the coefficient of
    exp(i(k̄+G_j)·r), with k̄ the folded k and G_j from ``planewaves``; plane
    waves outside a k's sphere carry zero.
    """

    if n_branches < 6:
        raise InvalidArgumentError(f"need at least 6 branches, got {n_branches}")
    if cutoff is None:
        cutoff = converged_cutoff(potential, lattice, threads=threads)
    basis = _PlanewaveBasis.build(potential, lattice, cutoff)
    flat = kgrid.flat_indices()
    n_pw = len(basis.h)

    def solve_one(index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = fold_to_zone(lattice, (index / kgrid.L) @ lattice.reciprocal)
        mask = basis.active(k)
        if mask.sum() < n_branches:
            raise InvalidArgumentError(
                f"cutoff {cutoff} gives {int(mask.sum())} plane waves at k-index "
                f"{tuple(int(i) for i in index)}, fewer than {n_branches} branches"
            )
        try:
            values, vectors = linalg.eigh(basis.hamiltonian(k, mask), subset_by_index=[0, n_branches - 1])
        except (linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"eigensolver failed at k-index {tuple(int(i) for i in index)}: {exc}") from exc
        full = np.zeros((n_pw, n_branches), dtype=complex)
        full[mask] = _fix_gauge(vectors)
        return values, full

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        solved = list(pool.map(solve_one, flat))

    L = kgrid.L
    energies = np.stack([values for values, _ in solved], axis=-1).reshape(n_branches, L, L)
    eigvecs = np.stack([vectors.T for _, vectors in solved], axis=1).reshape(n_branches, L, L, n_pw)
    table = BandTable(
        energies=energies,
        velocities=band_velocities(energies, lattice),
        lattice=lattice,
        eigvecs=eigvecs,
        planewaves=basis.h,
        cutoff=float(cutoff),
    )
    logger.info("solved %d branches on a %dx%d grid with up to %d plane waves", n_branches, L, L, n_pw)
    if classify:
        table = table.with_groups(classify_groups(table))
    return table


def _admissible_shell(lattice: LatticeSpec, radii: np.ndarray, kgrid: KGrid, n_branches: int) -> int:
    """First shell index >= 1 whose sphere holds ``n_branches`` plane waves at every k of ``kgrid``."""

    folded = [fold_to_zone(lattice, (index / kgrid.L) @ lattice.reciprocal) for index in kgrid.flat_indices()]
    for shell in range(1, len(radii)):
        if all(len(planewave_indices(lattice, radii[shell], k)) >= n_branches for k in folded):
            return shell
    raise ConvergenceError(f"no reciprocal shell holds {n_branches} plane waves at every k")


def converged_cutoff(
    potential: PotentialParams,
    lattice: LatticeSpec,
    tol: float = 1e-3,
    *,
    check_size: int = 6,
    max_shells: int = 30,
    threads: int = 1,
) -> float:
    """Smallest shell radius whose six branch centers and widths are stable to ``tol``.

    Stability is judged against the next shell on a ``check_size`` grid.
    Widths are compared on an absolute floor of 0.01 meV so flat bands do
    not demand unbounded relative accuracy. The search starts at the first
    shell that holds six plane waves at every checked k (the zone corner needs
    the second shell).
    """

    if not tol > 0:
        raise InvalidArgumentError(f"tolerance must be positive, got {tol}")
    radii = reciprocal_shells(lattice, max_shells + 1)
    kgrid = build_kgrid(lattice, check_size)

    def solve_at(shell: int) -> BandTable:
        return solve_bands(potential, lattice, kgrid, 6, radii[shell], threads=threads, classify=False)

    first = _admissible_shell(lattice, radii, kgrid, 6)
    previous = solve_at(first)
    for shell in range(first, max_shells + 1):
        following = solve_at(shell + 1)
        center_change = np.abs(following.centers - previous.centers)
        width_change = np.abs(following.widths - previous.widths)
        if np.all(center_change <= tol * np.maximum(np.abs(previous.centers), 0.01)) and np.all(
            width_change <= tol * np.maximum(previous.widths, 0.01)
        ):
            logger.info("band structure converged at shell %d (|k+G| <= %.4f 1/A)", shell, radii[shell])
            return float(radii[shell])
        previous = following
    raise ConvergenceError(f"band structure not converged within {max_shells} reciprocal shells")


def classify_groups(bandtable: BandTable) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split the six lowest branches into the 2-branch A and 4-branch E groups."""

    if bandtable.n_branches < 6:
        raise ClassificationError(f"need at least 6 branches, got {bandtable.n_branches}")
    centers = np.asarray(bandtable.centers[:6])
    split = int(np.argmax(np.diff(centers))) + 1
    lower, upper = tuple(range(split)), tuple(range(split, 6))
    if (len(lower), len(upper)) != (LOWER_GROUP_SIZE, UPPER_GROUP_SIZE):
        raise ClassificationError(
            f"branch clustering gives {len(lower)}+{len(upper)} instead of 2+4; "
            "potential is outside the modeled regime"
        )
    spread = max(np.ptp(centers[list(lower)]), np.ptp(centers[list(upper)]))
    separation = centers[split] - centers[split - 1]
    if separation < CLUSTER_GAP_FACTOR * spread:
        raise ClassificationError(
            f"cluster separation {separation:.4g} meV is below {CLUSTER_GAP_FACTOR:g}x the spread {spread:.4g} meV"
        )

    grouped = bandtable.with_groups((lower, upper))
    widest = max(grouped.lower_width, grouped.upper_width)
    if grouped.gap < NARROW_BAND_FACTOR * widest:
        raise ClassificationError(
            f"gap {grouped.gap:.4g} meV violates the narrow-band condition against width {widest:.4g} meV"
        )
    return lower, upper


def triangular_dispersion(L: int) -> np.ndarray:
    """Nearest-neighbour triangular-lattice dispersion on the L×L grid, range [-1.5, 3]."""
    n = np.arange(L) * (TWO_PI / L)
    k1, k2 = np.meshgrid(n, n, indexing="ij")
    return np.cos(k1) + np.cos(k2) + np.cos(k2 - k1)


def synthetic_band_table(
    centers: Sequence[float],
    widths: Sequence[float],
    L: int,
    lattice: LatticeSpec | None = None,
    *,
    classify: bool = True,
    groups: tuple[tuple[int, ...], tuple[int, ...]] | None = None,
) -> BandTable:
    """Band table with tabulated centers and widths and a tight-binding shape.

    Centers and widths are reproduced exactly when L is a multiple of 3 (the
    grid then contains the zone corner where the dispersion is minimal).
    """

    if len(centers) != len(widths):
        raise InvalidArgumentError("centers and widths must have the same length")
    lattice = lattice or build_lattice()
    shape = (triangular_dispersion(L) - 0.75) / 4.5
    energies = np.stack([c + w * shape for c, w in zip(centers, widths)])
    energies = np.sort(energies, axis=0)
    table = BandTable(
        energies=energies,
        velocities=band_velocities(energies, lattice),
        lattice=lattice,
        source="synthetic",
    )
    if groups is not None:
        return table.with_groups(groups)
    if classify:
        return table.with_groups(classify_groups(table))
    return table


def reference_band_table(L: int, lattice: LatticeSpec | None = None) -> BandTable:
    """Synthetic table carrying the tabulated H/Ni(111) branch centers and widths."""
    table = synthetic_band_table(REFERENCE_CENTERS, REFERENCE_WIDTHS, L, lattice)
    return dataclasses.replace(table, source="reference-table")


__all__ = [
    "BandTable",
    "KGrid",
    "REFERENCE_CENTERS",
    "REFERENCE_WIDTHS",
    "band_velocities",
    "build_kgrid",
    "build_planewave_hamiltonian",
    "classify_groups",
    "converged_cutoff",
    "fold_to_zone",
    "group_velocity",
    "planewave_indices",
    "reciprocal_shells",
    "reference_band_table",
    "solve_bands",
    "synthetic_band_table",
    "triangular_dispersion",
]
