"""Linear-elastic equilibrium, compliance, mass and element energy sensitivities."""

import logging
from typing import Any, Dict, Optional, Sequence

import attr
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import errors
from .materials import MaterialClass, Tensor4, rotate_matrices, rotate_matrices_derivative
from .mesh import Mesh, element_areas

logger = logging.getLogger(__name__)

SOLVERS = ("direct", "cg")
REFINEMENT_STEPS = 3


@attr.s(auto_attribs=True, eq=False)
class DesignField:
    """
    Per-material, per-element design arrays of shape (N, N_e).

    ``z``, ``m`` and ``theta`` are the control variables; the hatted arrays are their filtered
    (physical) counterparts and default to copies of the controls.
    """

    z: np.ndarray
    m: np.ndarray
    theta: np.ndarray
    zhat: Optional[np.ndarray] = None
    mhat: Optional[np.ndarray] = None
    thetahat: Optional[np.ndarray] = None

    def __attrs_post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        self.m = np.atleast_2d(np.asarray(self.m, dtype=float))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if not self.z.shape == self.m.shape == self.theta.shape:
            raise errors.InvalidArgumentException(
                "design", f"Shape mismatch {self.z.shape}, {self.m.shape}, {self.theta.shape}."
            )
        self.zhat = self.z.copy() if self.zhat is None else np.asarray(self.zhat, dtype=float)
        self.mhat = self.m.copy() if self.mhat is None else np.asarray(self.mhat, dtype=float)
        self.thetahat = (
            self.theta.copy() if self.thetahat is None else np.asarray(self.thetahat, dtype=float)
        )

    @property
    def material_count(self) -> int:
        return int(self.z.shape[0])

    @property
    def element_count(self) -> int:
        return int(self.z.shape[1])

    def copy(self) -> "DesignField":
        """Return a deep copy."""
        return DesignField(
            self.z.copy(),
            self.m.copy(),
            self.theta.copy(),
            self.zhat.copy(),
            self.mhat.copy(),
            self.thetahat.copy(),
        )

    def constraint_violation(self, classes: Sequence[MaterialClass], z_min: float) -> float:
        """Return the largest bound or overlap violation over control and physical arrays."""
        lower = np.array([c.m_lower for c in classes])[:, None]
        upper = np.array([c.m_upper for c in classes])[:, None]
        worst = 0.0
        for z, m in ((self.z, self.m), (self.zhat, self.mhat)):
            worst = max(
                worst,
                float(np.max(z_min - z)),
                float(np.max(z - 1.0)),
                float(np.max(z.sum(axis=0) - 1.0)),
                float(np.max(lower - m)),
                float(np.max(m - upper)),
            )
        return max(worst, 0.0)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class ElementGeometry:
    """P1 strain-displacement matrices (engineering shear), areas and dof maps per element."""

    areas: np.ndarray
    B: np.ndarray
    dofs: np.ndarray


def element_geometry(mesh: Mesh) -> ElementGeometry:
    """Return the constant P1 strain operators of every element."""
    xy = mesh.nodes[mesh.triangles]
    x, y = xy[..., 0], xy[..., 1]
    areas = element_areas(mesh)
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    dNdx = b / (2 * areas[:, None])
    dNdy = c / (2 * areas[:, None])

    B = np.zeros((mesh.element_count, 3, 6))
    B[:, 0, 0::2] = dNdx
    B[:, 1, 1::2] = dNdy
    B[:, 2, 0::2] = dNdy
    B[:, 2, 1::2] = dNdx

    dofs = np.empty((mesh.element_count, 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.triangles
    dofs[:, 1::2] = 2 * mesh.triangles + 1
    return ElementGeometry(areas=areas, B=B, dofs=dofs)


def _orients(cls: MaterialClass) -> bool:
    return cls.angular_period is not None


def element_stiffness_matrices(
    design: DesignField, classes: Sequence[MaterialClass], p: float
) -> np.ndarray:
    """Return Sum_i zhat^p Q(thetahat) E_i(mhat) per element, shape (N_e, 3, 3)."""
    total = np.zeros((design.element_count, 3, 3))
    for i, cls in enumerate(classes):
        matrices = cls.stiffness.matrices(design.mhat[i])
        if _orients(cls):
            matrices = rotate_matrices(matrices, design.thetahat[i])
        total += (design.zhat[i] ** p)[:, None, None] * matrices
    return total


def assemble_stiffness(
    mesh: Mesh,
    physical_design: DesignField,
    classes: Sequence[MaterialClass],
    p: float,
    geometry: Optional[ElementGeometry] = None,
) -> sp.csr_matrix:
    """Assemble the global stiffness matrix (before Dirichlet elimination)."""
    if p < 1:
        raise errors.InvalidArgumentException("p", f"Penalization exponent must be >= 1, got {p}.")
    geometry = geometry or element_geometry(mesh)
    C = element_stiffness_matrices(physical_design, classes, p)
    Ke = geometry.areas[:, None, None] * np.einsum(
        "eki,ekl,elj->eij", geometry.B, C, geometry.B
    )
    Ke = 0.5 * (Ke + Ke.transpose(0, 2, 1))
    rows = np.broadcast_to(geometry.dofs[:, :, None], Ke.shape).ravel()
    cols = np.broadcast_to(geometry.dofs[:, None, :], Ke.shape).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.dof_count, mesh.dof_count))
    return K.tocsr()


def load_vector(mesh: Mesh) -> np.ndarray:
    """Return the global load vector f from the mesh's nodal forces."""
    return mesh.forces.reshape(-1).astype(float)


def free_dofs(mesh: Mesh) -> np.ndarray:
    """Return the unconstrained degrees of freedom."""
    if mesh.dirichlet_dofs.size == 0:
        raise errors.MeshException(
            "dirichlet_dofs", "Stiffness is singular without a Dirichlet boundary."
        )
    mask = np.ones(mesh.dof_count, dtype=bool)
    mask[mesh.dirichlet_dofs] = False
    return np.nonzero(mask)[0]


@attr.s(auto_attribs=True, eq=False)
class EquilibriumState:
    """Displacements (zero on Dirichlet dofs), load and compliance of an equilibrium solve."""

    U: np.ndarray
    f: np.ndarray
    compliance: float
    residual: float
    solver: Dict[str, Any] = attr.Factory(dict)


class EquilibriumSolver:
    """
    Solve K U = f on the free dofs.

    The direct method keeps the sparse LU factor of the reduced matrix, so repeated solves with
    the same K (and different loads) reuse it.
    """

    def __init__(
        self,
        K: sp.spmatrix,
        free: np.ndarray,
        method: str = "direct",
        tolerance: float = 1e-10,
        max_iterations: Optional[int] = None,
    ):
        """Initialize the solver, factorizing K when the direct method is used."""
        if method not in SOLVERS:
            raise errors.InvalidArgumentException(
                "solver", f"Unknown solver '{method}', expected one of {', '.join(SOLVERS)}."
            )
        self.method = method
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.free = free
        self.K = K.tocsr()
        self.Kff = self.K[free][:, free].tocsc()
        self._factor = None
        if method == "direct":
            try:
                self._factor = spla.splu(self.Kff)
            except RuntimeError as e:
                raise errors.SolverException(float("inf"), f"Factorization failed: {e}")

    def _solve_reduced(self, rhs: np.ndarray):
        norm = np.linalg.norm(rhs)
        if norm == 0.0:
            return np.zeros_like(rhs), 0.0, {"method": self.method, "iterations": 0}

        if self.method == "direct":
            x = self._factor.solve(rhs)
            residual = rhs - self.Kff @ x
            steps = 0
            while steps < REFINEMENT_STEPS and np.linalg.norm(residual) > self.tolerance * norm:
                x = x + self._factor.solve(residual)
                residual = rhs - self.Kff @ x
                steps += 1
            info = {"method": "direct", "refinement_steps": steps}
        else:
            diagonal = self.Kff.diagonal()
            preconditioner = spla.LinearOperator(
                self.Kff.shape, matvec=lambda v: v / diagonal, dtype=float
            )
            iterations = []
            x, status = spla.cg(
                self.Kff,
                rhs,
                rtol=self.tolerance,
                atol=0.0,
                maxiter=self.max_iterations,
                M=preconditioner,
                callback=lambda _: iterations.append(1),
            )
            residual = rhs - self.Kff @ x
            if status != 0:
                raise errors.SolverException(
                    float(np.linalg.norm(residual) / norm),
                    f"Conjugate gradients stopped after {len(iterations)} iterations.",
                )
            info = {"method": "cg", "iterations": len(iterations)}

        relative = float(np.linalg.norm(residual) / norm)
        if not np.isfinite(relative) or relative > self.tolerance:
            raise errors.SolverException(relative)
        return x, relative, info

    def solve(self, f: np.ndarray) -> EquilibriumState:
        """Return the equilibrium state for load f."""
        U = np.zeros(self.K.shape[0])
        U[self.free], residual, info = self._solve_reduced(f[self.free])
        return EquilibriumState(
            U=U, f=f, compliance=float(f @ U), residual=residual, solver=info
        )


def solve_equilibrium(
    K: sp.spmatrix,
    f: np.ndarray,
    mesh: Mesh,
    method: str = "direct",
    tolerance: float = 1e-10,
) -> EquilibriumState:
    """Solve K U = f with Dirichlet dofs of ``mesh`` eliminated."""
    return EquilibriumSolver(K, free_dofs(mesh), method, tolerance).solve(f)


def compliance(state: EquilibriumState) -> float:
    """Return f^T U."""
    return float(state.f @ state.U)


def total_mass(
    mesh: Mesh,
    physical_design: DesignField,
    classes: Sequence[MaterialClass],
    areas: Optional[np.ndarray] = None,
) -> float:
    """Return Sum_i Sum_l |e_l| zhat_il rho_i(mhat_il)."""
    areas = element_areas(mesh) if areas is None else areas
    mass = 0.0
    for i, cls in enumerate(classes):
        mass += float(
            np.sum(areas * physical_design.zhat[i] * cls.density.values(physical_design.mhat[i]))
        )
    return mass


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Sensitivities:
    """U^T (dK/dx) U for x in (zhat, mhat, thetahat), each of shape (N, N_e)."""

    s_z: np.ndarray
    s_m: np.ndarray
    s_theta: np.ndarray


def element_strains(geometry: ElementGeometry, U: np.ndarray) -> np.ndarray:
    """Return engineering strains (e_xx, e_yy, 2 e_xy) per element."""
    return np.einsum("eki,ei->ek", geometry.B, U[geometry.dofs])


def element_energy_sensitivities(
    mesh: Mesh,
    physical_design: DesignField,
    classes: Sequence[MaterialClass],
    p: float,
    U: np.ndarray,
    geometry: Optional[ElementGeometry] = None,
) -> Sensitivities:
    """Return the element energy sensitivities for every material and element."""
    geometry = geometry or element_geometry(mesh)
    strain = element_strains(geometry, U)

    def energy(matrices: np.ndarray) -> np.ndarray:
        return geometry.areas * np.einsum("ek,ekl,el->e", strain, matrices, strain)

    shape = physical_design.z.shape
    s_z, s_m, s_theta = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for i, cls in enumerate(classes):
        zhat = physical_design.zhat[i]
        mhat = physical_design.mhat[i]
        E = cls.stiffness.matrices(mhat)
        dE = cls.stiffness.derivatives(mhat)
        if _orients(cls):
            theta = physical_design.thetahat[i]
            s_theta[i] = zhat**p * energy(rotate_matrices_derivative(E, theta))
            E = rotate_matrices(E, theta)
            dE = rotate_matrices(dE, theta)
        s_z[i] = p * zhat ** (p - 1) * energy(E)
        s_m[i] = zhat**p * energy(dE)
    return Sensitivities(s_z=s_z, s_m=s_m, s_theta=s_theta)


def beam_compliance(force: float, length: float, area: float, tensor: Tensor4) -> float:
    """Return F^2 L / (A E_eff) with E_eff = C_xxxx - C_xxyy^2 / C_yyyy."""
    e_eff = tensor.xxxx - tensor.xxyy**2 / tensor.yyyy
    return force**2 * length / (area * e_eff)
