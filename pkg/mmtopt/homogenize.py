"""
Copolymer patterns, periodic homogenization and the homogenized tensor database.

Pattern formation follows the Cahn-Hilliard-Oono flow

    d_t phi = Lap mu - (phi - m),    mu = -gamma^-2 Lap phi + phi^3 - phi

on a periodic rectangle. Each grid value of ``phi`` is also the (constant) phase value of the
pixel ``[i dx, (i+1) dx] x [j dy, (j+1) dy]`` used by the bilinear cell problems.
"""

import enum
import hashlib
import json
import logging
import os
from functools import partial
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import attr
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from . import errors
from .materials import (
    DatabaseInterval,
    HomogenizedDatabase,
    Tensor4,
    density_affine,
    isotropic_matrix,
    lame_parameters,
    normalized_stiffness,
    rotate_tensor,
)

logger = logging.getLogger(__name__)

M1 = 0.2
M2 = 0.6
GAMMA = 20.0
CACHE_ENV = "MMTOPT_DATABASE_CACHE"
STRIPE_POWER_FRACTION = 0.6
STRIPE_HALF_WINDOW = np.deg2rad(10.0)
UNIFORM_AMPLITUDE = 0.1


class PatternClass(enum.Enum):
    """Copolymer pattern classes ordered by increasing m."""

    A_SPOTS = "a_spots"
    STRIPES = "stripes"
    B_SPOTS = "b_spots"


DEFAULT_INTERVALS: Tuple[Tuple[float, float, PatternClass], ...] = (
    (-M2, -M1, PatternClass.A_SPOTS),
    (-M1, M1, PatternClass.STRIPES),
    (M1, M2, PatternClass.B_SPOTS),
)


def classify_pattern(m: float, m1: float = M1, m2: float = M2) -> PatternClass:
    """Return the pattern class of m on the open intervals split at +-m1 and +-m2."""
    if abs(m) >= m2:
        raise errors.DisorderException(m)
    if abs(m) == m1:
        raise errors.PatternClassificationException(
            m, f"m lies on the boundary |m| = {m1} between two pattern classes."
        )
    if m < -m1:
        return PatternClass.A_SPOTS
    if m > m1:
        return PatternClass.B_SPOTS
    return PatternClass.STRIPES


@attr.s(auto_attribs=True, frozen=True, kw_only=True)
class CHOParams:
    """Numerical parameters of the pattern simulation."""

    gamma: float = GAMMA
    nx: int = 128
    ny: int = 128
    dt: float = 0.05
    max_time: float = 500.0
    stabilization: float = 2.0
    noise: float = 0.05
    template_amplitude: float = 0.25
    periods: int = 6
    tolerance: float = 1e-6
    energy_every: int = 50
    seed: int = 0


@attr.s(auto_attribs=True, frozen=True, kw_only=True)
class ElasticityParams:
    """Phase moduli (plane strain) and densities; densities default to rho_a / rho_b = E_a / E_b."""

    e_a: float = 1000.0
    e_b: float = 100.0
    nu_a: float = 0.3
    nu_b: float = 0.3
    rho_a: Optional[float] = None
    rho_b: Optional[float] = None
    solver: str = "direct"
    tolerance: float = 1e-9

    @property
    def densities(self) -> Tuple[float, float]:
        rho_b = 1.0 if self.rho_b is None else self.rho_b
        rho_a = rho_b * self.e_a / self.e_b if self.rho_a is None else self.rho_a
        return rho_a, rho_b

    @property
    def lame_a(self) -> Tuple[float, float]:
        return lame_parameters(self.e_a, self.nu_a)

    @property
    def lame_b(self) -> Tuple[float, float]:
        return lame_parameters(self.e_b, self.nu_b)


@attr.s(auto_attribs=True, eq=False)
class PeriodicCell:
    """Order parameter on a periodic nx x ny grid over an Lx x Ly rectangle."""

    phi: np.ndarray
    lx: float
    ly: float
    m: float
    gamma: float = GAMMA
    time: float = 0.0
    converged: bool = True
    energy_history: List[float] = attr.Factory(list)

    @property
    def nx(self) -> int:
        return int(self.phi.shape[0])

    @property
    def ny(self) -> int:
        return int(self.phi.shape[1])

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny


def intrinsic_wavelength(gamma: float) -> float:
    """Return the wavelength of the fastest-growing mode of the uniform state at m = 0."""
    return 2 * np.pi * np.sqrt(2.0) / gamma


def cell_size(pattern: Optional[PatternClass], gamma: float, periods: int) -> Tuple[float, float]:
    """
    Return (Lx, Ly) holding ``periods`` pattern periods.

    Stripes and uniform cells are square. Spot cells are the rectangular re-tiling of the
    hexagonal lattice with aspect sqrt(3) : 1, two spots per lattice rectangle.
    """
    wavelength = intrinsic_wavelength(gamma)
    if pattern in (PatternClass.A_SPOTS, PatternClass.B_SPOTS):
        spacing = 2 * wavelength / np.sqrt(3.0)
        return periods * spacing, periods * np.sqrt(3.0) * spacing
    return periods * wavelength, periods * wavelength


def _wavenumbers(nx: int, ny: int, lx: float, ly: float, real: bool = True):
    kx = 2 * np.pi * np.fft.fftfreq(nx, d=lx / nx)
    ky = 2 * np.pi * (np.fft.rfftfreq(ny, d=ly / ny) if real else np.fft.fftfreq(ny, d=ly / ny))
    return np.meshgrid(kx, ky, indexing="ij")


def _template(
    pattern: Optional[PatternClass], m: float, nx: int, ny: int, lx: float, ly: float, periods: int
) -> np.ndarray:
    x = (np.arange(nx) * lx / nx)[:, None]
    y = (np.arange(ny) * ly / ny)[None, :]
    if pattern == PatternClass.STRIPES:
        return np.cos(2 * np.pi * periods * y / ly) + 0 * x
    if pattern in (PatternClass.A_SPOTS, PatternClass.B_SPOTS):
        a = lx / periods
        b1 = (2 * np.pi / a) * np.array([1.0, -1.0 / np.sqrt(3.0)])
        b2 = (2 * np.pi / a) * np.array([0.0, 2.0 / np.sqrt(3.0)])
        waves = sum(np.cos(k[0] * x + k[1] * y) for k in (b1, b2, b1 + b2))
        # minority phase sits on the lattice points
        return -np.sign(m) * waves / 3.0
    return np.zeros((nx, ny))


def initial_phase_field(
    m: float,
    params: CHOParams,
    lx: float,
    ly: float,
    pattern: Optional[PatternClass] = None,
) -> np.ndarray:
    """Return m plus seeded noise and an optional weak template, with mean exactly m."""
    rng = np.random.default_rng(params.seed)
    phi = params.noise * rng.uniform(-1.0, 1.0, size=(params.nx, params.ny))
    if pattern is not None and params.template_amplitude:
        phi += params.template_amplitude * _template(
            pattern, m, params.nx, params.ny, lx, ly, params.periods
        )
    return phi - phi.mean() + m


def lyapunov_energy(phi: np.ndarray, m: float, gamma: float, lx: float, ly: float) -> float:
    """Return the gradient, double-well and long-range energy of phi (periodic)."""
    nx, ny = phi.shape
    kx, ky = _wavenumbers(nx, ny, lx, ly, real=False)
    k2 = kx**2 + ky**2
    phi_hat = np.fft.fft2(phi)
    power = np.abs(phi_hat) ** 2 / (nx * ny)
    inverse = np.divide(1.0, k2, out=np.zeros_like(k2), where=k2 > 0)
    cell_area = lx * ly / (nx * ny)
    local = np.sum(0.25 * (1.0 - phi**2) ** 2)
    spectral = np.sum((0.5 * k2 / gamma**2 + 0.5 * inverse) * power)
    return float(cell_area * (local + spectral))


def solve_cho(
    m: float,
    params: CHOParams = CHOParams(),
    lx: Optional[float] = None,
    ly: Optional[float] = None,
    initial: Optional[np.ndarray] = None,
    pattern: Optional[PatternClass] = None,
) -> PeriodicCell:
    """
    Integrate the CHO equation to a stationary state.

    Semi-implicit pseudo-spectral stepping: the fourth-order, reaction and stabilization terms
    are implicit, the cubic is explicit. The mean is reset to m every step.
    """
    if abs(m) >= 1:
        raise errors.InvalidArgumentException("m", "Monomer proportion must satisfy |m| < 1.")
    if params.gamma <= 0:
        raise errors.InvalidArgumentException("gamma", "Interface parameter must be positive.")
    if lx is None or ly is None:
        lx, ly = cell_size(pattern, params.gamma, params.periods)

    phi = (
        initial_phase_field(m, params, lx, ly, pattern)
        if initial is None
        else np.array(initial, dtype=float)
    )
    nx, ny = phi.shape
    kx, ky = _wavenumbers(nx, ny, lx, ly)
    k2 = kx**2 + ky**2
    dt, S = params.dt, params.stabilization
    denominator = 1.0 + dt * (k2**2 / params.gamma**2 + S * k2 + 1.0)
    explicit = 1.0 + dt * S * k2
    mean_mode = m * nx * ny

    cell = PeriodicCell(phi=phi, lx=lx, ly=ly, m=m, gamma=params.gamma, converged=False)
    energy = lyapunov_energy(phi, m, params.gamma, lx, ly)
    cell.energy_history.append(energy)

    steps = int(np.ceil(params.max_time / dt))
    phi_hat = np.fft.rfft2(phi)
    for step in range(1, steps + 1):
        nonlinear = np.fft.rfft2(phi**3 - phi)
        phi_hat = (explicit * phi_hat - dt * k2 * nonlinear) / denominator
        phi_hat[0, 0] = mean_mode
        updated = np.fft.irfft2(phi_hat, s=(nx, ny))
        change = float(np.max(np.abs(updated - phi))) / dt
        phi = updated

        if not np.isfinite(change) or np.max(np.abs(phi)) > 2.0:
            raise errors.CHOInstabilityException(step * dt)

        if step % params.energy_every == 0 or change <= params.tolerance:
            current = lyapunov_energy(phi, m, params.gamma, lx, ly)
            if current > energy + 1e-10 * max(abs(energy), 1.0):
                logger.warning(f"CHO energy increased from {energy:.8g} to {current:.8g}")
            energy = current
            cell.energy_history.append(energy)

        if change <= params.tolerance:
            cell.converged = True
            break

    cell.phi = phi
    cell.time = step * dt
    if not cell.converged:
        logger.warning(f"CHO at m={m:g} not stationary after t={cell.time:g}")
    logger.debug(f"CHO at m={m:g} finished at t={cell.time:g}")
    return cell


def _periodic_component_count(mask: np.ndarray) -> int:
    labels, count = ndimage.label(mask)
    if count == 0:
        return 0
    parent = list(range(count + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for first, last in ((labels[0, :], labels[-1, :]), (labels[:, 0], labels[:, -1])):
        for a, b in zip(first, last):
            if a and b:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[ra] = rb
    return len({find(label) for label in range(1, count + 1)})


@attr.s(auto_attribs=True, frozen=True)
class PatternDiagnostics:
    """Spectral and topological signature of a phase field."""

    amplitude: float
    dominant_wavevector: Tuple[float, float]
    stripe_power_fraction: float
    a_components: int
    b_components: int


def pattern_diagnostics(cell: PeriodicCell) -> PatternDiagnostics:
    """Return the FFT and connected-component signature of the cell."""
    fluctuation = cell.phi - cell.phi.mean()
    power = np.abs(np.fft.fft2(fluctuation)) ** 2
    power[0, 0] = 0.0
    kx, ky = _wavenumbers(cell.nx, cell.ny, cell.lx, cell.ly, real=False)
    peak = np.unravel_index(int(np.argmax(power)), power.shape)
    k_peak = (float(kx[peak]), float(ky[peak]))

    total = float(power.sum())
    fraction = 0.0
    if total > 0:
        direction = np.arctan2(k_peak[1], k_peak[0])
        angles = np.arctan2(ky, kx)
        offset = np.abs(np.mod(angles - direction + np.pi / 2, np.pi) - np.pi / 2)
        fraction = float(power[offset <= STRIPE_HALF_WINDOW].sum() / total)

    return PatternDiagnostics(
        amplitude=float(fluctuation.std()),
        dominant_wavevector=k_peak,
        stripe_power_fraction=fraction,
        a_components=_periodic_component_count(cell.phi > 0),
        b_components=_periodic_component_count(cell.phi < 0),
    )


def detect_pattern(cell: PeriodicCell) -> Optional[PatternClass]:
    """Classify a simulated field; ``None`` for a (near) uniform state."""
    diagnostics = pattern_diagnostics(cell)
    if diagnostics.amplitude < UNIFORM_AMPLITUDE:
        return None
    if diagnostics.stripe_power_fraction >= STRIPE_POWER_FRACTION:
        return PatternClass.STRIPES
    if diagnostics.b_components >= 2 and diagnostics.a_components == 1:
        return PatternClass.B_SPOTS
    if diagnostics.a_components >= 2 and diagnostics.b_components == 1:
        return PatternClass.A_SPOTS
    raise errors.PatternClassificationException(cell.m, f"Ambiguous pattern: {diagnostics}.")


def stripe_angle(cell: PeriodicCell) -> float:
    """Return the stripe direction relative to x, in (-pi/2, pi/2]."""
    kx, ky = pattern_diagnostics(cell).dominant_wavevector
    angle = np.arctan2(ky, kx) - np.pi / 2
    return float(np.pi / 2 - np.mod(np.pi / 2 - angle, np.pi))


def phase_to_stiffness(
    cell: PeriodicCell, lame_a: Tuple[float, float], lame_b: Tuple[float, float]
) -> np.ndarray:
    """Return per-pixel isotropic matrices with Lame parameters affine in clipped phi."""
    phi = np.clip(cell.phi, -1.0, 1.0)
    lam = 0.5 * (lame_a[0] + lame_b[0]) + 0.5 * (lame_a[0] - lame_b[0]) * phi
    mu = 0.5 * (lame_a[1] + lame_b[1]) + 0.5 * (lame_a[1] - lame_b[1]) * phi
    return isotropic_matrix(lam, mu)


# engineering unit strains for e^xx, e^yy, e^xy
UNIT_STRAINS = {"xx": 0, "yy": 1, "xy": 2}
_GAUSS = 1.0 / np.sqrt(3.0)
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


def _q4_operators(dx: float, dy: float) -> Tuple[np.ndarray, np.ndarray]:
    """Return B at the 2x2 Gauss points (4, 3, 8) and the quadrature weights (4,)."""
    points = [(sx * _GAUSS, sy * _GAUSS) for sy in (-1, 1) for sx in (-1, 1)]
    B = np.zeros((4, 3, 8))
    for g, (xi, eta) in enumerate(points):
        dndx = 0.25 * _XI * (1 + _ETA * eta) * 2.0 / dx
        dndy = 0.25 * _ETA * (1 + _XI * xi) * 2.0 / dy
        B[g, 0, 0::2] = dndx
        B[g, 1, 1::2] = dndy
        B[g, 2, 0::2] = dndy
        B[g, 2, 1::2] = dndx
    weights = np.full(4, dx * dy / 4.0)
    return B, weights


def _element_dofs(nx: int, ny: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    ip, jp = (i + 1) % nx, (j + 1) % ny
    nodes = np.stack([i * ny + j, ip * ny + j, ip * ny + jp, i * ny + jp], axis=1)
    dofs = np.empty((nodes.shape[0], 8), dtype=np.int64)
    dofs[:, 0::2] = 2 * nodes
    dofs[:, 1::2] = 2 * nodes + 1
    return dofs


@attr.s(auto_attribs=True, eq=False)
class CellElasticity:
    """Pixel stiffness field, periodic correctors and the homogenized tensor."""

    stiffness: np.ndarray
    lx: float
    ly: float
    correctors: Dict[str, np.ndarray] = attr.Factory(dict)
    residuals: Dict[str, float] = attr.Factory(dict)
    tensor: Optional[Tensor4] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.stiffness.shape[0]), int(self.stiffness.shape[1])


class CellProblem:
    """Bilinear periodic discretization of the cell problems; K is factorized once."""

    def __init__(
        self,
        stiffness: np.ndarray,
        lx: float,
        ly: float,
        solver: str = "direct",
        tolerance: float = 1e-9,
    ):
        """Assemble the periodic stiffness matrix with node 0 pinned."""
        nx, ny = stiffness.shape[:2]
        self.nx, self.ny, self.lx, self.ly = nx, ny, lx, ly
        self.solver = solver
        self.tolerance = tolerance
        self.C = stiffness.reshape(nx * ny, 3, 3)
        self.B, self.weights = _q4_operators(lx / nx, ly / ny)
        self.dofs = _element_dofs(nx, ny)

        basis = np.einsum("g,gai,gbj->abij", self.weights, self.B, self.B)
        Ke = np.einsum("eab,abij->eij", self.C, basis)
        rows = np.broadcast_to(self.dofs[:, :, None], Ke.shape).ravel()
        cols = np.broadcast_to(self.dofs[:, None, :], Ke.shape).ravel()
        n = 2 * nx * ny
        self.K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        self.free = np.arange(2, n)
        self.Kff = self.K[self.free][:, self.free].tocsc()
        self._factor = spla.splu(self.Kff) if solver == "direct" else None

        # G = Sum_g w B_g^T, so that the load of a macro strain e is -G C e per element
        self.G = np.einsum("g,gai->ia", self.weights, self.B)

    def load(self, ij: str) -> np.ndarray:
        """Return the right-hand side -div(C e^ij) in weak form."""
        column = UNIT_STRAINS[ij]
        element_loads = -np.einsum("ia,ea->ei", self.G, self.C[:, :, column])
        return np.bincount(
            self.dofs.ravel(), weights=element_loads.ravel(), minlength=2 * self.nx * self.ny
        )

    def solve(self, ij: str) -> Tuple[np.ndarray, float]:
        """Return the zero-mean periodic corrector (nx, ny, 2) and the relative residual."""
        f = self.load(ij)[self.free]
        norm = np.linalg.norm(f)
        w = np.zeros(2 * self.nx * self.ny)
        residual = 0.0
        if norm > 0:
            if self._factor is not None:
                x = self._factor.solve(f)
                for _ in range(3):
                    r = f - self.Kff @ x
                    if np.linalg.norm(r) <= self.tolerance * norm:
                        break
                    x = x + self._factor.solve(r)
            else:
                diagonal = self.Kff.diagonal()
                preconditioner = spla.LinearOperator(
                    self.Kff.shape, matvec=lambda v: v / diagonal, dtype=float
                )
                x, status = spla.cg(self.Kff, f, rtol=self.tolerance, atol=0.0, M=preconditioner)
            residual = float(np.linalg.norm(f - self.Kff @ x) / norm)
            if not np.isfinite(residual) or residual > self.tolerance:
                raise errors.SolverException(residual, f"Cell problem {ij} did not converge.")
            w[self.free] = x
        w = w.reshape(self.nx, self.ny, 2)
        w -= w.mean(axis=(0, 1))
        return w, residual

    def strains(self, ij: str, corrector: np.ndarray) -> np.ndarray:
        """Return e^ij + sym grad w at the Gauss points, shape (elements, 4, 3)."""
        u = corrector.reshape(-1)[self.dofs]
        strain = np.einsum("gki,ei->egk", self.B, u)
        strain[:, :, UNIT_STRAINS[ij]] += 1.0
        return strain

    def homogenized(self, correctors: Dict[str, np.ndarray]) -> Tensor4:
        """Return (1/|Y|) int C (e^a + grad w^a) : (e^b + grad w^b)."""
        names = list(UNIT_STRAINS)
        strains = {name: self.strains(name, correctors[name]) for name in names}
        matrix = np.zeros((3, 3))
        for a, name_a in enumerate(names):
            for b, name_b in enumerate(names):
                matrix[a, b] = np.einsum(
                    "g,egk,ekl,egl->", self.weights, strains[name_a], self.C, strains[name_b]
                )
        matrix /= self.lx * self.ly
        return Tensor4(0.5 * (matrix + matrix.T))


def solve_cell_problem(
    stiffness: np.ndarray, ij: str, lx: float = 1.0, ly: float = 1.0, solver: str = "direct"
) -> np.ndarray:
    """Return the periodic zero-mean corrector w^ij for a pixel stiffness field."""
    if ij not in UNIT_STRAINS:
        raise errors.InvalidArgumentException("ij", f"Expected one of {', '.join(UNIT_STRAINS)}.")
    return CellProblem(stiffness, lx, ly, solver).solve(ij)[0]


def cell_elasticity(
    stiffness: np.ndarray, lx: float, ly: float, solver: str = "direct", tolerance: float = 1e-9
) -> CellElasticity:
    """Solve the three cell problems and homogenize."""
    problem = CellProblem(stiffness, lx, ly, solver, tolerance)
    result = CellElasticity(stiffness=stiffness, lx=lx, ly=ly)
    for ij in UNIT_STRAINS:
        result.correctors[ij], result.residuals[ij] = problem.solve(ij)
    result.tensor = problem.homogenized(result.correctors)
    return result


def homogenized_tensor(elasticity: CellElasticity) -> Tensor4:
    """Return the homogenized tensor of solved cell problems."""
    if elasticity.tensor is None or len(elasticity.correctors) < 3:
        raise errors.InvalidArgumentException("elasticity", "Cell problems are not solved.")
    return elasticity.tensor


def laminate_tensor(tensors: Sequence[Tensor4], fractions: Sequence[float]) -> Tensor4:
    """
    Return the exact rank-one laminate with layers normal to y.

    Stress components yy, xy and strain component xx are continuous across the layers.
    """
    fractions = np.asarray(fractions, dtype=float)
    fractions = fractions / fractions.sum()
    jump = [1, 2]
    inv_ss = [np.linalg.inv(t.matrix[np.ix_(jump, jump)]) for t in tensors]
    C_ss = np.linalg.inv(sum(f * inv for f, inv in zip(fractions, inv_ss)))
    avg_s0 = sum(f * inv @ t.matrix[jump, 0] for f, inv, t in zip(fractions, inv_ss, tensors))
    C_s0 = C_ss @ avg_s0
    C_00 = sum(
        f * (t.matrix[0, 0] - t.matrix[0, jump] @ inv @ t.matrix[jump, 0])
        for f, inv, t in zip(fractions, inv_ss, tensors)
    ) + avg_s0 @ C_ss @ avg_s0

    matrix = np.zeros((3, 3))
    matrix[0, 0] = C_00
    matrix[np.ix_(jump, jump)] = C_ss
    matrix[jump, 0] = C_s0
    matrix[0, jump] = C_s0
    return Tensor4(0.5 * (matrix + matrix.T))


def laminate_cell(
    n: int, fraction_a: float = 0.5, size: float = 1.0, m: float = 0.0
) -> PeriodicCell:
    """Return a sharp laminate (phase A in the lower rows) with layers normal to y."""
    phi = -np.ones((n, n))
    phi[:, : int(round(fraction_a * n))] = 1.0
    return PeriodicCell(phi=phi, lx=size, ly=size, m=m)


def anisotropy_deviation(tensor: Tensor4) -> float:
    """Return |2 C_xyxy / (C_xxxx - C_xxyy) - 1|, zero for isotropic tensors."""
    return abs(2 * tensor.xyxy / (tensor.xxxx - tensor.xxyy) - 1.0)


@attr.s(auto_attribs=True, eq=False)
class HomogenizationSample:
    """Homogenized tensor (canonical frame) and density of one m value."""

    m: float
    pattern: PatternClass
    detected: Optional[PatternClass]
    tensor: Tensor4
    density: float
    seed: int
    stripe_angle: float = 0.0
    anisotropy: float = 0.0
    cell: Optional[PeriodicCell] = None


def _accepted_patterns(m: float, pattern: PatternClass) -> Set[Optional[PatternClass]]:
    accepted: Set[Optional[PatternClass]] = {pattern}
    if np.isclose(abs(m), M1):
        accepted.add(PatternClass.STRIPES)
        accepted.add(PatternClass.B_SPOTS if m > 0 else PatternClass.A_SPOTS)
    if np.isclose(abs(m), M2):
        accepted.add(None)
    return accepted


def homogenize_cell(cell: PeriodicCell, elasticity: ElasticityParams) -> CellElasticity:
    """Build the pixel stiffness of a phase field and solve its cell problems."""
    stiffness = phase_to_stiffness(cell, elasticity.lame_a, elasticity.lame_b)
    return cell_elasticity(stiffness, cell.lx, cell.ly, elasticity.solver, elasticity.tolerance)


def homogenize_for_m(
    m: float,
    cho: CHOParams = CHOParams(),
    elasticity: ElasticityParams = ElasticityParams(),
    pattern: Optional[PatternClass] = None,
) -> HomogenizationSample:
    """
    Simulate the pattern at m, homogenize it and report the tensor in the canonical frame.

    Stripe tensors are de-rotated so that stripes run along x. An explicit ``pattern`` allows
    interval endpoints (|m| = m1 or m2) to be sampled for a given class.
    """
    if pattern is None:
        pattern = classify_pattern(m)
    elif abs(m) > M2:
        raise errors.DisorderException(m)

    cell = solve_cho(m, cho, pattern=pattern)
    detected = detect_pattern(cell)
    if detected not in _accepted_patterns(m, pattern):
        found = detected.value if detected else "uniform"
        raise errors.PatternClassificationException(
            m, f"Expected {pattern.value} but the simulation produced {found}."
        )

    tensor = homogenized_tensor(homogenize_cell(cell, elasticity))
    angle = 0.0
    if detected == PatternClass.STRIPES:
        angle = stripe_angle(cell)
        tensor = rotate_tensor(tensor, -angle)
    rho_a, rho_b = elasticity.densities
    sample = HomogenizationSample(
        m=m,
        pattern=pattern,
        detected=detected,
        tensor=tensor,
        density=density_affine(rho_a, rho_b, m),
        seed=cho.seed,
        stripe_angle=angle,
        anisotropy=anisotropy_deviation(tensor),
        cell=cell,
    )
    logger.info(
        f"m={m:g} {pattern.value}: {tensor} density={sample.density:g} "
        f"anisotropy={sample.anisotropy:.3g}"
    )
    return sample


def _sample_task(
    cho: CHOParams, elasticity: ElasticityParams, task: Tuple[float, PatternClass, int]
) -> HomogenizationSample:
    m, pattern, seed = task
    sample = homogenize_for_m(m, attr.evolve(cho, seed=seed), elasticity, pattern)
    sample.cell = None
    return sample


def build_database(
    intervals: Sequence[Tuple[float, float, PatternClass]] = DEFAULT_INTERVALS,
    cho: CHOParams = CHOParams(),
    elasticity: ElasticityParams = ElasticityParams(),
    seeds: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> HomogenizedDatabase:
    """Homogenize endpoints and midpoint of every interval (in parallel) into a database."""
    tasks = []
    for index, (lower, upper, pattern) in enumerate(intervals):
        for k, m in enumerate((lower, 0.5 * (lower + upper), upper)):
            position = 3 * index + k
            seed = seeds[position] if seeds is not None else cho.seed + position
            tasks.append((float(m), pattern, int(seed)))

    with ThreadPool(max(threads, 1)) as pool:
        samples = pool.map(partial(_sample_task, cho, elasticity), tasks)

    rho_a, rho_b = elasticity.densities
    database = HomogenizedDatabase(
        intervals=tuple(
            DatabaseInterval(
                pattern=pattern.value,
                samples=tuple(s.m for s in samples[3 * i : 3 * i + 3]),
                tensors=tuple(s.tensor for s in samples[3 * i : 3 * i + 3]),
                seeds=tuple(s.seed for s in samples[3 * i : 3 * i + 3]),
            )
            for i, (_, _, pattern) in enumerate(intervals)
        ),
        rho_a=rho_a,
        rho_b=rho_b,
        metadata={
            "gamma": cho.gamma,
            "nx": cho.nx,
            "ny": cho.ny,
            "e_a": elasticity.e_a,
            "e_b": elasticity.e_b,
            "nu_a": elasticity.nu_a,
            "nu_b": elasticity.nu_b,
        },
    )
    for sample in samples:
        ratio, _ = normalized_stiffness(sample.tensor, sample.density)
        logger.info(f"m={sample.m:g} {sample.pattern.value}: max E/rho = {ratio:.6g}")
    return database


def rotation_consistency_check(
    tensor: Tensor4,
    cell: PeriodicCell,
    elasticity: ElasticityParams = ElasticityParams(),
    angle: float = np.pi / 2,
) -> float:
    """Return the relative deviation between the rotated cell's tensor and Q(angle) tensor."""
    if cell.nx != cell.ny or not np.isclose(cell.lx, cell.ly):
        raise errors.UnsupportedAngleException(angle, "Only square grids rotate exactly.")
    if not np.isclose(angle, np.pi / 2):
        raise errors.UnsupportedAngleException(angle)
    rotated = PeriodicCell(phi=np.rot90(cell.phi).copy(), lx=cell.lx, ly=cell.ly, m=cell.m)
    observed = homogenized_tensor(homogenize_cell(rotated, elasticity))
    expected = rotate_tensor(tensor, angle)
    scale = float(np.max(np.abs(expected.matrix)))
    return float(np.max(np.abs(observed.matrix - expected.matrix)) / scale)


def dump_phase_field(cell: PeriodicCell, path: Union[str, Path]):
    """Write phi as a header line ``nx ny Lx Ly`` followed by row-major float64 values."""
    with open(path, "wb") as f:
        f.write(f"{cell.nx} {cell.ny} {float(cell.lx)!r} {float(cell.ly)!r}\n".encode("ascii"))
        f.write(np.ascontiguousarray(cell.phi, dtype="<f8").tobytes())


def load_phase_field(path: Union[str, Path], m: Optional[float] = None) -> PeriodicCell:
    """Read a field written by ``dump_phase_field``."""
    with open(path, "rb") as f:
        nx, ny, lx, ly = f.readline().decode("ascii").split()
        phi = np.frombuffer(f.read(), dtype="<f8").reshape(int(nx), int(ny)).copy()
    return PeriodicCell(
        phi=phi, lx=float(lx), ly=float(ly), m=float(phi.mean()) if m is None else m
    )


def database_cache_path(
    cho: CHOParams, elasticity: ElasticityParams, cache_dir: Optional[str] = None
) -> Optional[Path]:
    """Return the cache file for these parameters, or None when no cache directory is set."""
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    if not cache_dir:
        return None
    key = json.dumps(
        {"cho": attr.asdict(cho), "elasticity": attr.asdict(elasticity)}, sort_keys=True
    )
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]
    return Path(cache_dir) / f"database-{digest}.toml"


def load_or_build_database(
    cho: CHOParams,
    elasticity: ElasticityParams,
    threads: int = 1,
    cache_dir: Optional[str] = None,
) -> HomogenizedDatabase:
    """Return the cached database for these parameters, building and caching it if missing."""
    path = database_cache_path(cho, elasticity, cache_dir)
    if path is not None and path.exists():
        logger.info(f"Loading cached database {path}")
        return HomogenizedDatabase.load(path)
    database = build_database(cho=cho, elasticity=elasticity, threads=threads)
    if path is not None:
        database.save(path)
        logger.info(f"Cached database at {path}")
    return database
