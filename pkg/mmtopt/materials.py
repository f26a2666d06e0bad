"""
Stiffness tensors, rotations, parametrized material classes and homogenized databases.

Tensor convention: a 2D fourth-order tensor with minor and major symmetries is stored as the
symmetric 3x3 matrix of its components in the basis (xx, yy, xy)::

    [[C_xxxx, C_xxyy, C_xxxy],
     [C_xxyy, C_yyyy, C_yyxy],
     [C_xxxy, C_yyxy, C_xyxy]]

The shear row and column hold the plain tensor components. Contracting with a tensorial strain
``e = (e_xx, e_yy, e_xy)`` therefore needs the weight ``W = diag(1, 1, 2)``: ``C:e:e = (We)^T C
(We)``. Equivalently the matrix is the usual stiffness matrix acting on engineering strains
``(e_xx, e_yy, 2 e_xy)``, which is how ``fem`` and ``homogenize`` use it. Eigenvalues are
reported for the Mandel form ``S C S`` with ``S = diag(1, 1, sqrt 2)``, which rotations preserve.

Plane strain is used throughout, so Lame parameters are the 3D ones.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import attr
import numpy as np
import toml

from . import errors

logger = logging.getLogger(__name__)

_PAIR_INDEX = np.array([[0, 2], [2, 1]])
_ROWS = np.array([0, 1, 0])
_COLS = np.array([0, 1, 1])
_MANDEL = np.array([1.0, 1.0, np.sqrt(2.0)])

# order of the six independent entries in database files
ENTRY_NAMES = ("xxxx", "yyyy", "xxyy", "xyxy", "xxxy", "yyxy")
_ENTRY_INDEX = ((0, 0), (1, 1), (0, 1), (2, 2), (0, 2), (1, 2))

ANGLE_SETS: Dict[str, Tuple[float, ...]] = {
    "orthogonal": (0.0, np.pi / 2),
    "diagonal": (np.pi / 4, 3 * np.pi / 4),
    "quarters": (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4),
    "eighths": tuple(k * np.pi / 8 for k in range(8)),
}


def to_full(matrix: np.ndarray) -> np.ndarray:
    """Expand (..., 3, 3) matrices to (..., 2, 2, 2, 2) component arrays."""
    return matrix[..., _PAIR_INDEX[:, :, None, None], _PAIR_INDEX[None, None, :, :]]


def from_full(full: np.ndarray) -> np.ndarray:
    """Collapse (..., 2, 2, 2, 2) component arrays to (..., 3, 3) matrices."""
    return full[..., _ROWS[:, None], _COLS[:, None], _ROWS[None, :], _COLS[None, :]]


def rotation_matrix(theta) -> np.ndarray:
    """Return R(theta) = [[cos, -sin], [sin, cos]] with shape theta.shape + (2, 2)."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)


def _rotation_derivative(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([-s, -c], axis=-1), np.stack([c, -s], axis=-1)], axis=-2)


def _transform(full, r1, r2, r3, r4):
    shape = np.broadcast_shapes(full.shape[:-4], r1.shape[:-2])
    full = np.broadcast_to(full, shape + (2, 2, 2, 2))
    out = np.einsum("...ip,...pqrs->...iqrs", np.broadcast_to(r1, shape + (2, 2)), full)
    out = np.einsum("...jq,...iqrs->...ijrs", np.broadcast_to(r2, shape + (2, 2)), out)
    out = np.einsum("...kr,...ijrs->...ijks", np.broadcast_to(r3, shape + (2, 2)), out)
    return np.einsum("...ls,...ijks->...ijkl", np.broadcast_to(r4, shape + (2, 2)), out)


def rotate_matrices(matrices: np.ndarray, theta) -> np.ndarray:
    """Rotate stiffness matrices counter-clockwise: (QC)_ijkl = R_ip R_jq R_kr R_ls C_pqrs."""
    r = rotation_matrix(theta)
    return from_full(_transform(to_full(np.asarray(matrices, dtype=float)), r, r, r, r))


def rotate_matrices_derivative(matrices: np.ndarray, theta) -> np.ndarray:
    """Return d/dtheta of ``rotate_matrices(matrices, theta)``."""
    r = rotation_matrix(theta)
    dr = _rotation_derivative(theta)
    full = to_full(np.asarray(matrices, dtype=float))
    total = (
        _transform(full, dr, r, r, r)
        + _transform(full, r, dr, r, r)
        + _transform(full, r, r, dr, r)
        + _transform(full, r, r, r, dr)
    )
    return from_full(total)


def _as_matrix(value) -> np.ndarray:
    matrix = np.array(value, dtype=float)
    if matrix.shape != (3, 3):
        raise errors.InvalidArgumentException(
            "matrix", f"Expected a 3x3 matrix, got {matrix.shape}."
        )
    return matrix


@attr.s(frozen=True, eq=False)
class Tensor4:
    """2D stiffness tensor stored as a symmetric 3x3 matrix (see module docstring)."""

    matrix: np.ndarray = attr.ib(converter=_as_matrix)

    @matrix.validator
    def _check_symmetric(self, attribute, value):
        if not np.allclose(value, value.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(value).max())):
            raise errors.InvalidArgumentException("matrix", "Stiffness matrix must be symmetric.")

    @classmethod
    def from_entries(
        cls,
        xxxx: float,
        yyyy: float,
        xxyy: float,
        xyxy: float,
        xxxy: float = 0.0,
        yyxy: float = 0.0,
    ) -> "Tensor4":
        """Build a tensor from its six independent components."""
        return cls(
            [[xxxx, xxyy, xxxy], [xxyy, yyyy, yyxy], [xxxy, yyxy, xyxy]],
        )

    def entries(self) -> Tuple[float, ...]:
        """Return the six independent components in ``ENTRY_NAMES`` order."""
        return tuple(float(self.matrix[i, j]) for i, j in _ENTRY_INDEX)

    def component(self, name: str) -> float:
        """Return a component by name, e.g. ``"xxyy"``."""
        return self.entries()[ENTRY_NAMES.index(name)]

    @property
    def xxxx(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def yyyy(self) -> float:
        return float(self.matrix[1, 1])

    @property
    def xxyy(self) -> float:
        return float(self.matrix[0, 1])

    @property
    def xyxy(self) -> float:
        return float(self.matrix[2, 2])

    def full(self) -> np.ndarray:
        """Return the (2, 2, 2, 2) component array."""
        return to_full(self.matrix)

    def contract(self, strain) -> float:
        """Return C : e : e for a symmetric 2x2 tensorial strain."""
        strain = np.asarray(strain, dtype=float)
        return float(np.einsum("ijkl,ij,kl->", self.full(), strain, strain))

    def eigenvalues(self) -> np.ndarray:
        """Return the rotation-invariant (Mandel) eigenvalues in ascending order."""
        return np.linalg.eigvalsh(_MANDEL[:, None] * self.matrix * _MANDEL[None, :])

    def is_positive_definite(self) -> bool:
        """Return whether the tensor is positive definite."""
        return bool(self.eigenvalues()[0] > 0)

    def rotate(self, theta: float) -> "Tensor4":
        """Return the tensor rotated counter-clockwise by ``theta``."""
        return rotate_tensor(self, theta)

    def __add__(self, other: "Tensor4") -> "Tensor4":
        return Tensor4(self.matrix + other.matrix)

    def __mul__(self, factor: float) -> "Tensor4":
        return Tensor4(self.matrix * factor)

    __rmul__ = __mul__

    def __repr__(self):
        values = ", ".join(f"{n}={v:.6g}" for n, v in zip(ENTRY_NAMES, self.entries()))
        return f"Tensor4({values})"


def lame_parameters(E: float, nu: float) -> Tuple[float, float]:
    """Return the Lame pair (lambda, mu) for Young's modulus and Poisson ratio."""
    if E <= 0:
        raise errors.InvalidArgumentException("E", f"Young's modulus must be positive, got {E}.")
    if not -1.0 < nu < 0.5:
        raise errors.InvalidArgumentException(
            "nu", f"Poisson ratio must lie in (-1, 0.5) for plane strain, got {nu}."
        )
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam, mu


def isotropic_matrix(lam, mu) -> np.ndarray:
    """Return (..., 3, 3) isotropic stiffness matrices for arrays of Lame parameters."""
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    out = np.zeros(np.broadcast_shapes(lam.shape, mu.shape) + (3, 3))
    out[..., 0, 0] = 2 * mu + lam
    out[..., 1, 1] = 2 * mu + lam
    out[..., 0, 1] = lam
    out[..., 1, 0] = lam
    out[..., 2, 2] = mu
    return out


def isotropic_tensor(E: float, nu: float) -> Tensor4:
    """Return the plane-strain isotropic tensor for (E, nu)."""
    lam, mu = lame_parameters(E, nu)
    return Tensor4(isotropic_matrix(lam, mu))


def rotate_tensor(C: Tensor4, theta: float) -> Tensor4:
    """Rotate a tensor counter-clockwise by ``theta``."""
    return Tensor4(rotate_matrices(C.matrix, theta))


def rotate_tensor_derivative(C: Tensor4, theta: float) -> Tensor4:
    """Return the derivative of ``rotate_tensor(C, theta)`` with respect to ``theta``."""
    return Tensor4(rotate_matrices_derivative(C.matrix, theta))


def density_affine(rho_a: float, rho_b: float, m):
    """Return (rho_a + rho_b) / 2 + (rho_a - rho_b) / 2 * m for |m| <= 1."""
    m_arr = np.asarray(m, dtype=float)
    if np.any(np.abs(m_arr) > 1.0 + 1e-12):
        raise errors.InvalidArgumentException("m", "Monomer proportion must satisfy |m| <= 1.")
    value = 0.5 * (rho_a + rho_b) + 0.5 * (rho_a - rho_b) * m_arr
    return float(value) if np.ndim(value) == 0 else value


def directional_stiffness(C: Tensor4, alpha) -> np.ndarray:
    """Return n x n : C : n x n for unit directions n = (cos alpha, sin alpha)."""
    c, s = np.cos(alpha), np.sin(alpha)
    M = C.matrix
    return (
        M[0, 0] * c**4
        + M[1, 1] * s**4
        + 2 * (M[0, 1] + 2 * M[2, 2]) * c**2 * s**2
        + 4 * M[0, 2] * c**3 * s
        + 4 * M[1, 2] * c * s**3
    )


def directional_modulus(C: Tensor4, alpha) -> np.ndarray:
    """
    Return the uniaxial-stress modulus along direction alpha.

    At alpha = 0 for an orthotropic tensor this is C_xxxx - C_xxyy^2 / C_yyyy.
    """
    alpha = np.asarray(alpha, dtype=float)
    c, s = np.cos(alpha), np.sin(alpha)
    v = np.stack([c**2, s**2, c * s], axis=-1)
    compliance = np.linalg.inv(C.matrix)
    return 1.0 / np.einsum("...a,ab,...b->...", v, compliance, v)


def normalized_stiffness(C: Tensor4, density: float, samples: int = 360) -> Tuple[float, float]:
    """Return (max_alpha E(alpha) / density, maximizing alpha)."""
    alpha = np.linspace(0.0, np.pi, samples, endpoint=False)
    moduli = directional_modulus(C, alpha)
    best = int(np.argmax(moduli))
    return float(moduli[best] / density), float(alpha[best])


def voigt_bound(tensors: Sequence[Tensor4], fractions: Sequence[float]) -> Tensor4:
    """Return the arithmetic-mean (Voigt) bound."""
    return Tensor4(sum(f * t.matrix for t, f in zip(tensors, fractions)))


def reuss_bound(tensors: Sequence[Tensor4], fractions: Sequence[float]) -> Tensor4:
    """Return the harmonic-mean (Reuss) bound."""
    compliance = sum(f * np.linalg.inv(t.matrix) for t, f in zip(tensors, fractions))
    inverse = np.linalg.inv(compliance)
    return Tensor4(0.5 * (inverse + inverse.T))


# Homogenized tensor of equally spaced horizontal stripes (E = 1000 / 100, nu = 0.3)
STRIPES_REFERENCE = Tensor4.from_entries(xxxx=665.5, yyyy=332.8, xxyy=142.6, xyxy=95.2)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class DatabaseInterval:
    """Three homogenized samples (endpoints and midpoint) of one pattern class."""

    pattern: str
    samples: Tuple[float, float, float]
    tensors: Tuple[Tensor4, Tensor4, Tensor4]
    seeds: Tuple[int, ...] = ()

    @property
    def lower(self) -> float:
        return float(self.samples[0])

    @property
    def upper(self) -> float:
        return float(self.samples[-1])

    def _basis(self, m: np.ndarray):
        x0, x1, x2 = self.samples
        d0 = (x0 - x1) * (x0 - x2)
        d1 = (x1 - x0) * (x1 - x2)
        d2 = (x2 - x0) * (x2 - x1)
        values = ((m - x1) * (m - x2) / d0, (m - x0) * (m - x2) / d1, (m - x0) * (m - x1) / d2)
        slopes = ((2 * m - x1 - x2) / d0, (2 * m - x0 - x2) / d1, (2 * m - x0 - x1) / d2)
        return values, slopes

    def matrices(self, m) -> np.ndarray:
        """Return quadratic Lagrange interpolants of the sample matrices."""
        m = np.asarray(m, dtype=float)
        values, _ = self._basis(m)
        return sum(v[..., None, None] * t.matrix for v, t in zip(values, self.tensors))

    def derivative_matrices(self, m) -> np.ndarray:
        """Return derivatives of ``matrices`` with respect to m."""
        m = np.asarray(m, dtype=float)
        _, slopes = self._basis(m)
        return sum(s[..., None, None] * t.matrix for s, t in zip(slopes, self.tensors))


@attr.s(auto_attribs=True, frozen=True, eq=False)
class HomogenizedDatabase:
    """Sampled homogenized tensors per pattern interval plus affine density coefficients."""

    intervals: Tuple[DatabaseInterval, ...]
    rho_a: float
    rho_b: float
    metadata: Dict[str, float] = attr.Factory(dict)
    tolerance: float = 1e-9

    def bounds(self) -> List[Tuple[float, float]]:
        """Return the (lower, upper) pair of every interval."""
        return [(iv.lower, iv.upper) for iv in self.intervals]

    def locate(self, m: float, interval: Optional[int] = None) -> Tuple[int, float]:
        """Return the interval index containing ``m`` and ``m`` clamped into it."""
        candidates = range(len(self.intervals)) if interval is None else [interval]
        for index in candidates:
            iv = self.intervals[index]
            if iv.lower - self.tolerance <= m <= iv.upper + self.tolerance:
                return index, min(max(m, iv.lower), iv.upper)
        raise errors.OutOfRangeException(m, self.bounds())

    def density(self, m):
        """Return the affine density at m."""
        return density_affine(self.rho_a, self.rho_b, m)

    def save(self, path: Union[str, Path]):
        """Write the database as TOML; floats round-trip exactly."""
        data = {
            "rho_a": float(self.rho_a),
            "rho_b": float(self.rho_b),
            "metadata": {k: float(v) for k, v in self.metadata.items()},
            "interval": [
                {
                    "pattern": iv.pattern,
                    "sample": [
                        {
                            "m": float(m),
                            "seed": int(iv.seeds[k]) if k < len(iv.seeds) else -1,
                            "entries": [float(e) for e in t.entries()],
                        }
                        for k, (m, t) in enumerate(zip(iv.samples, iv.tensors))
                    ],
                }
                for iv in self.intervals
            ],
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            toml.dump(data, f)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HomogenizedDatabase":
        """Read a database written by ``save``."""
        data = toml.load(path)
        intervals = []
        for iv in data.get("interval", []):
            samples = iv["sample"]
            if len(samples) != 3:
                raise errors.ConfigurationException(
                    f"{path}", "Every database interval needs exactly three samples."
                )
            intervals.append(
                DatabaseInterval(
                    pattern=iv["pattern"],
                    samples=tuple(s["m"] for s in samples),
                    tensors=tuple(Tensor4.from_entries(*s["entries"]) for s in samples),
                    seeds=tuple(s.get("seed", -1) for s in samples),
                )
            )
        return cls(
            intervals=tuple(intervals),
            rho_a=data["rho_a"],
            rho_b=data["rho_b"],
            metadata=data.get("metadata", {}),
        )


def interp_database(
    db: HomogenizedDatabase, m: float, interval: Optional[int] = None
) -> Tensor4:
    """Interpolate the database tensor at m."""
    index, clamped = db.locate(m, interval)
    return Tensor4(db.intervals[index].matrices(clamped))


def interp_database_derivative(
    db: HomogenizedDatabase, m: float, interval: Optional[int] = None
) -> Tensor4:
    """Return the derivative of the interpolated tensor at m."""
    index, clamped = db.locate(m, interval)
    return Tensor4(db.intervals[index].derivative_matrices(clamped))


class StiffnessModel(Protocol):
    """Maps arrays of m to stiffness matrices and their m-derivatives."""

    def matrices(self, m: np.ndarray) -> np.ndarray:
        ...

    def derivatives(self, m: np.ndarray) -> np.ndarray:
        ...


class DensityModel(Protocol):
    """Maps arrays of m to densities and their m-derivatives."""

    def values(self, m: np.ndarray) -> np.ndarray:
        ...

    def derivatives(self, m: np.ndarray) -> np.ndarray:
        ...


@attr.s(auto_attribs=True, frozen=True)
class ConstantStiffness:
    """Stiffness independent of m."""

    tensor: Tensor4

    def matrices(self, m: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.tensor.matrix, np.shape(m) + (3, 3)).copy()

    def derivatives(self, m: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(m) + (3, 3))


@attr.s(auto_attribs=True, frozen=True)
class DatabaseStiffness:
    """Stiffness interpolated on one interval of a homogenized database."""

    database: HomogenizedDatabase
    interval: int

    def matrices(self, m: np.ndarray) -> np.ndarray:
        iv = self.database.intervals[self.interval]
        return iv.matrices(np.clip(m, iv.lower, iv.upper))

    def derivatives(self, m: np.ndarray) -> np.ndarray:
        iv = self.database.intervals[self.interval]
        return iv.derivative_matrices(np.clip(m, iv.lower, iv.upper))


@attr.s(auto_attribs=True, frozen=True)
class ConstantDensity:
    """Density independent of m."""

    value: float = 1.0

    def values(self, m: np.ndarray) -> np.ndarray:
        return np.full(np.shape(m), float(self.value))

    def derivatives(self, m: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(m))


@attr.s(auto_attribs=True, frozen=True)
class AffineDensity:
    """Copolymer density (rho_a + rho_b) / 2 + (rho_a - rho_b) / 2 * m."""

    rho_a: float
    rho_b: float

    def values(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(density_affine(self.rho_a, self.rho_b, m), dtype=float)

    def derivatives(self, m: np.ndarray) -> np.ndarray:
        return np.full(np.shape(m), 0.5 * (self.rho_a - self.rho_b))


@attr.s(auto_attribs=True, frozen=True)
class MaterialClass:
    """
    One candidate material class.

    :param angular_period: period T of the orientation (pi for orthotropic, 2 pi generic);
        ``None`` marks a class whose stiffness does not depend on the orientation.
    :param orientation_free: whether the optimizer may change the orientation. Fixed classes
        keep theta = 0, so their stiffness is used as given.
    :param base_angle: orientation already built into ``stiffness`` (for rendering only).
    """

    label: str
    stiffness: StiffnessModel
    density: DensityModel = attr.Factory(ConstantDensity)
    m_lower: float = 0.0
    m_upper: float = 1.0
    angular_period: Optional[float] = None
    orientation_free: bool = False
    base_angle: float = 0.0

    def __attrs_post_init__(self):
        if not self.m_lower < self.m_upper:
            raise errors.InvalidArgumentException(
                self.label, f"m_lower ({self.m_lower}) must be below m_upper ({self.m_upper})."
            )
        if self.orientation_free and self.angular_period is None:
            raise errors.InvalidArgumentException(
                self.label, "An orientable class needs an angular period."
            )

    @property
    def m_mid(self) -> float:
        return 0.5 * (self.m_lower + self.m_upper)

    @property
    def optimizes_orientation(self) -> bool:
        return self.orientation_free and self.angular_period is not None

    def stiffness_at(self, m: float) -> Tensor4:
        """Return the stiffness tensor at a single m."""
        return Tensor4(self.stiffness.matrices(np.asarray(m, dtype=float)))

    def validate(self, samples: int = 1000):
        """Check positive definiteness and monotone density on the parameter interval."""
        m = np.linspace(self.m_lower, self.m_upper, samples)
        rho = self.density.values(m)
        if np.any(np.diff(rho) < -1e-12 * np.abs(rho).max()):
            raise errors.InvalidArgumentException(self.label, "Density must be non-decreasing.")
        if np.any(rho <= 0):
            raise errors.InvalidArgumentException(self.label, "Density must be positive.")
        mats = self.stiffness.matrices(m)
        mandel = _MANDEL[:, None] * mats * _MANDEL[None, :]
        if np.any(np.linalg.eigvalsh(mandel)[..., 0] <= 0):
            raise errors.InvalidArgumentException(
                self.label, "Stiffness must be positive definite on [m_lower, m_upper]."
            )


def rotated_copies(
    reference: Tensor4,
    angles: Sequence[float],
    density: float = 1.0,
    label: str = "theta",
) -> List[MaterialClass]:
    """Return one fixed-orientation class per candidate angle (the discrete orientation set)."""
    return [
        MaterialClass(
            label=f"{label}={angle:.4f}",
            stiffness=ConstantStiffness(rotate_tensor(reference, angle)),
            density=ConstantDensity(density),
            angular_period=np.pi,
            base_angle=float(angle),
        )
        for angle in angles
    ]


def copolymer_classes(
    db: HomogenizedDatabase, orientation_free: bool = True
) -> List[MaterialClass]:
    """Return one class per database interval with affine density."""
    classes = []
    for index, iv in enumerate(db.intervals):
        anisotropic = iv.pattern == "stripes"
        classes.append(
            MaterialClass(
                label=iv.pattern,
                stiffness=DatabaseStiffness(db, index),
                density=AffineDensity(db.rho_a, db.rho_b),
                m_lower=iv.lower,
                m_upper=iv.upper,
                angular_period=np.pi if anisotropic else None,
                orientation_free=orientation_free and anisotropic,
            )
        )
    return classes
