"""
Density and circular filtering, and the chain rules back to control variables.

The kernel is the cone max(0, r_min - |x|): only elements with centroids closer than r_min
interact, and every element sees itself.
"""

import logging
from typing import Optional, Sequence

import attr
import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import errors
from .fem import DesignField, Sensitivities
from .materials import MaterialClass
from .mesh import Mesh, element_areas, element_centroids

logger = logging.getLogger(__name__)

# squared norm below which the circular mean is undefined and returns 0
DEGENERATE_NORM = 1e-24


@attr.s(auto_attribs=True, frozen=True, eq=False)
class FilterOperator:
    """Row-stochastic filter matrix H (rows are target elements) and its radius."""

    matrix: sp.csr_matrix
    r_min: float

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def transpose(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()


def build_filter(mesh: Mesh, r_min: float) -> FilterOperator:
    """Build H_lr = K(x_l - x_r) |e_r| / Sum_s K(x_l - x_s) |e_s| from centroids and areas."""
    if r_min <= 0:
        raise errors.InvalidArgumentException(
            "r_min", f"Filter radius must be positive, got {r_min}."
        )
    centroids = element_centroids(mesh)
    areas = element_areas(mesh)
    tree = cKDTree(centroids)
    neighbors = tree.query_ball_point(centroids, r_min, return_sorted=True)

    counts = np.fromiter((len(n) for n in neighbors), dtype=np.int64, count=len(neighbors))
    rows = np.repeat(np.arange(mesh.element_count), counts)
    cols = np.concatenate([np.asarray(n, dtype=np.int64) for n in neighbors])
    distances = np.linalg.norm(centroids[rows] - centroids[cols], axis=1)
    weights = (r_min - distances) * areas[cols]

    keep = weights > 0
    rows, cols, weights = rows[keep], cols[keep], weights[keep]
    weights = weights / np.bincount(rows, weights, minlength=mesh.element_count)[rows]

    matrix = sp.csr_matrix((weights, (rows, cols)), shape=(mesh.element_count,) * 2)
    logger.debug(f"Filter with radius {r_min} has {matrix.nnz} nonzeros")
    return FilterOperator(matrix=matrix, r_min=r_min)


def identity_filter(element_count: int) -> FilterOperator:
    """Return the filter that leaves every field unchanged."""
    return FilterOperator(matrix=sp.identity(element_count, format="csr"), r_min=0.0)


def _check_length(filter_op: FilterOperator, field: np.ndarray):
    if field.shape[-1] != filter_op.size:
        raise errors.InvalidArgumentException(
            "field", f"Expected {filter_op.size} element values, got {field.shape[-1]}."
        )


def apply(filter_op: FilterOperator, field) -> np.ndarray:
    """Return H @ field; 2D input is filtered row by row."""
    field = np.asarray(field, dtype=float)
    _check_length(filter_op, field)
    return np.asarray((filter_op.matrix @ field.T).T)


def _circular_sums(filter_op: FilterOperator, angles: np.ndarray, period: float):
    phase = 2 * np.pi * angles / period
    return phase, filter_op.matrix @ np.sin(phase), filter_op.matrix @ np.cos(phase)


def apply_circular(filter_op: FilterOperator, angles, period: float) -> np.ndarray:
    """Return (T / 2 pi) atan2(H sin(2 pi theta / T), H cos(2 pi theta / T)) mapped to [0, T)."""
    if period <= 0:
        raise errors.InvalidArgumentException("period", f"Period must be positive, got {period}.")
    angles = np.asarray(angles, dtype=float)
    _check_length(filter_op, angles)
    _, s, c = _circular_sums(filter_op, angles, period)
    degenerate = s**2 + c**2 <= DEGENERATE_NORM
    filtered = period / (2 * np.pi) * np.arctan2(s, c)
    filtered = np.where(degenerate, 0.0, filtered)
    return wrap_period(filtered, period)


def wrap_period(angles, period):
    """Map angles into [0, period); values that round up to the period become 0."""
    wrapped = np.mod(angles, period)
    return np.where(wrapped >= period, 0.0, wrapped)


def filter_design(
    filter_op: FilterOperator, design: DesignField, classes: Sequence[MaterialClass]
) -> DesignField:
    """Return the design with its physical arrays recomputed from the controls."""
    thetahat = design.theta.copy()
    for i, cls in enumerate(classes):
        if cls.optimizes_orientation:
            thetahat[i] = apply_circular(filter_op, design.theta[i], cls.angular_period)
    return DesignField(
        z=design.z,
        m=design.m,
        theta=design.theta,
        zhat=apply(filter_op, design.z),
        mhat=apply(filter_op, design.m),
        thetahat=thetahat,
    )


@attr.s(auto_attribs=True, frozen=True, eq=False)
class ChainRuleTerms:
    """
    Transposed-filter accumulations per (i, l).

    ``z_numerator`` = Sum_r H_rl s_z[r], ``z_mass`` = Sum_r H_rl |e_r| rho(mhat_r),
    ``m_numerator`` = Sum_r H_rl s_m[r], ``m_mass`` = Sum_r H_rl |e_r| rho'(mhat_r) zhat_r.
    """

    z_numerator: np.ndarray
    z_mass: np.ndarray
    m_numerator: np.ndarray
    m_mass: np.ndarray


def chain_rule_z(
    filter_op: FilterOperator,
    sensitivities: Sensitivities,
    physical_design: DesignField,
    classes: Sequence[MaterialClass],
    areas: Optional[np.ndarray] = None,
) -> ChainRuleTerms:
    """Map physical-variable sensitivities and mass derivatives to the control variables."""
    _check_length(filter_op, sensitivities.s_z)
    areas = np.ones(filter_op.size) if areas is None else areas
    Ht = filter_op.transpose
    rho = np.stack([c.density.values(physical_design.mhat[i]) for i, c in enumerate(classes)])
    drho = np.stack(
        [c.density.derivatives(physical_design.mhat[i]) for i, c in enumerate(classes)]
    )
    return ChainRuleTerms(
        z_numerator=np.asarray((Ht @ sensitivities.s_z.T).T),
        z_mass=np.asarray((Ht @ (areas * rho).T).T),
        m_numerator=np.asarray((Ht @ sensitivities.s_m.T).T),
        m_mass=np.asarray((Ht @ (areas * drho * physical_design.zhat).T).T),
    )


def chain_rule_theta(
    filter_op: FilterOperator, s_theta, angles, period: float
) -> np.ndarray:
    """
    Return dC/dtheta for the control angles of one material through the circular filter.

    dC/dtheta_l = -cos(a_l) Sum_s H_sl C_s s_s / (S_s^2 + C_s^2)
                  - sin(a_l) Sum_s H_sl S_s s_s / (S_s^2 + C_s^2)
    with a = 2 pi theta / T, S = H sin(a), C = H cos(a). Targets with S = C = 0 contribute 0.
    """
    s_theta = np.asarray(s_theta, dtype=float)
    angles = np.asarray(angles, dtype=float)
    _check_length(filter_op, s_theta)
    phase, s, c = _circular_sums(filter_op, angles, period)
    norm = s**2 + c**2
    safe = np.where(norm > DEGENERATE_NORM, norm, 1.0)
    weight_c = np.where(norm > DEGENERATE_NORM, c * s_theta / safe, 0.0)
    weight_s = np.where(norm > DEGENERATE_NORM, s * s_theta / safe, 0.0)
    Ht = filter_op.transpose
    return -np.cos(phase) * (Ht @ weight_c) - np.sin(phase) * (Ht @ weight_s)
