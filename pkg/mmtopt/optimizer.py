"""Generalized Optimality Criteria driver for multimaterial anisotropic compliance minimization."""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import attr
import numpy as np

from . import errors
from .fem import (
    DesignField,
    EquilibriumSolver,
    assemble_stiffness,
    element_energy_sensitivities,
    element_geometry,
    free_dofs,
    load_vector,
    total_mass,
)
from .filtering import (
    ChainRuleTerms,
    FilterOperator,
    apply,
    chain_rule_theta,
    chain_rule_z,
    filter_design,
    wrap_period,
)
from .materials import MaterialClass
from .mesh import Mesh, element_areas

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"


@attr.s(auto_attribs=True, frozen=True, kw_only=True)
class OCParams:
    """Parameters of the Optimality Criteria scheme."""

    z_min: float = 1e-3
    delta: float = 1e-3
    move_z: float = 0.05
    move_m: float = 0.05
    eta: float = 0.5
    p_initial: float = 1.0
    p_final: float = 3.0
    p_hold: int = 30
    p_ramp: int = 30
    # stabilizer epsilon = epsilon_scale * mean element strain energy
    epsilon_scale: float = 1e-9
    tolerance: float = 1e-4
    max_iterations: int = 300
    convergence: float = 0.01
    theta_backtrack: float = 0.5
    theta_armijo: float = 1e-4
    theta_max_move: float = np.pi / 8
    theta_max_backtracks: int = 12
    max_doublings: int = 200
    max_bisections: int = 200
    solver: str = "direct"
    solver_tolerance: float = 1e-10
    random_theta: bool = False
    seed: int = 0

    @property
    def continuation_end(self) -> int:
        return self.p_hold + self.p_ramp


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Problem:
    """Mesh with boundary conditions, material classes, mass budget and filter."""

    mesh: Mesh
    classes: Tuple[MaterialClass, ...] = attr.ib(converter=tuple)
    mass_budget: float
    filter: FilterOperator
    areas: np.ndarray = attr.ib(init=False)

    def __attrs_post_init__(self):
        object.__setattr__(self, "areas", element_areas(self.mesh))

    @property
    def domain_area(self) -> float:
        return float(self.areas.sum())

    @property
    def m_lower(self) -> np.ndarray:
        return np.array([c.m_lower for c in self.classes])[:, None]

    @property
    def m_upper(self) -> np.ndarray:
        return np.array([c.m_upper for c in self.classes])[:, None]

    def minimum_budget(self, z_min: float) -> float:
        """Return |Omega| z_min Sum_i rho_i(m_upper_i); budgets must exceed it."""
        return self.domain_area * z_min * sum(
            float(c.density.values(np.array(c.m_upper))) for c in self.classes
        )

    def maximum_density(self) -> float:
        """Return max_i rho_i(m_upper_i)."""
        return max(float(c.density.values(np.array(c.m_upper))) for c in self.classes)

    def validate(self, params: OCParams):
        """Check the mesh, the classes and the feasibility bounds on z_min and the budget."""
        self.mesh.validate()
        if not self.classes:
            raise errors.ConfigurationException("materials", "At least one material class.")
        for cls in self.classes:
            cls.validate()
        if not 0 < params.z_min < 1.0 / len(self.classes):
            raise errors.ConfigurationException(
                "optimizer.z_min",
                f"z_min must lie in (0, 1/N) = (0, {1.0 / len(self.classes):g}).",
            )
        if self.filter.size != self.mesh.element_count:
            raise errors.ConfigurationException("filter", "Filter size differs from the mesh.")
        minimum = self.minimum_budget(params.z_min)
        if not self.mass_budget > minimum:
            raise errors.InfeasibleBudgetException(self.mass_budget, minimum)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class FilteredSensitivities:
    """Chain-rule terms on control variables plus the OC stabilizer epsilon."""

    terms: ChainRuleTerms
    theta_gradient: np.ndarray
    epsilon: float

    @property
    def z_numerator(self) -> np.ndarray:
        return self.terms.z_numerator

    @property
    def z_mass(self) -> np.ndarray:
        return self.terms.z_mass

    @property
    def m_numerator(self) -> np.ndarray:
        return self.terms.m_numerator

    @property
    def m_mass(self) -> np.ndarray:
        return self.terms.m_mass


@attr.s(auto_attribs=True, frozen=True, eq=False)
class MultiplierSolution:
    """Outcome of the nested bisection: multipliers, candidate controls and their mass."""

    lam: float
    mu: np.ndarray
    z: np.ndarray
    m: np.ndarray
    mass: float


@attr.s(auto_attribs=True, eq=False)
class OptimizationResult:
    """Final design, histories and the post-processed binary design."""

    design: DesignField
    compliance_history: List[float]
    mass_history: List[float]
    multiplier_history: List[float]
    kkt_history: List[float]
    iterations: int
    termination: str
    compliance: float
    mass: float
    lam: float
    mu: np.ndarray
    binary_design: DesignField
    binary_compliance: float
    # largest orientation move per iteration, as a fraction of the angular period
    orientation_history: List[float] = attr.Factory(list)

    @property
    def converged(self) -> bool:
        return self.termination == CONVERGED

    def summary(self) -> str:
        """Return a one-line summary."""
        return (
            f"{self.termination} after {self.iterations} iterations: "
            f"compliance {self.compliance:.6g}, rounded {self.binary_compliance:.6g}, "
            f"mass {self.mass:.6g}"
        )


def continuation_p(iteration: int, params: OCParams = OCParams()) -> float:
    """Return p_initial during the hold phase, then ramp linearly to p_final."""
    if iteration < params.p_hold:
        return params.p_initial
    if params.p_ramp <= 0:
        return params.p_final
    fraction = min(1.0, (iteration - params.p_hold) / params.p_ramp)
    return params.p_initial + (params.p_final - params.p_initial) * fraction


def filtered_sensitivities(
    problem: Problem,
    design: DesignField,
    s,
    compliance_value: float,
    params: OCParams,
) -> FilteredSensitivities:
    """Map raw sensitivities to control variables and fix the stabilizer for this iteration."""
    terms = chain_rule_z(problem.filter, s, design, problem.classes, problem.areas)
    gradient = np.zeros_like(design.theta)
    for i, cls in enumerate(problem.classes):
        if cls.optimizes_orientation:
            gradient[i] = chain_rule_theta(
                problem.filter, s.s_theta[i], design.theta[i], cls.angular_period
            )
    mean_energy = abs(compliance_value) / max(problem.mesh.element_count, 1)
    epsilon = max(params.epsilon_scale * mean_energy, np.finfo(float).tiny)
    return FilteredSensitivities(terms=terms, theta_gradient=gradient, epsilon=epsilon)


def _z_candidate(z, z_numerator, z_mass, lam, mu, epsilon, params: OCParams):
    ratio = (np.maximum(z_numerator, 0.0) + epsilon) / (lam * z_mass + mu + epsilon)
    lower = np.maximum(z - params.move_z, params.z_min)
    upper = z + params.move_z
    return np.minimum(np.maximum(ratio**params.eta * z, lower), upper)


def _m_candidate(m, m_lower, m_upper, m_numerator, m_mass, lam, epsilon, params: OCParams):
    ratio = (np.maximum(m_numerator, 0.0) + epsilon) / (lam * m_mass + epsilon)
    shift = m_lower - params.delta
    m_tilde = shift + ratio**params.eta * (m - shift)
    lower = np.maximum(m - params.move_m, m_lower)
    upper = np.minimum(m + params.move_m, m_upper)
    return np.minimum(np.maximum(m_tilde, lower), upper)


def update_zm(
    design: DesignField,
    sensitivities: FilteredSensitivities,
    lam: float,
    mu,
    params: OCParams,
    classes: Sequence[MaterialClass],
) -> Tuple[np.ndarray, np.ndarray]:
    """Return the damped, move-limited fixed-point candidate (z', m') for multipliers (lam, mu)."""
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (design.element_count,))
    z_new = _z_candidate(
        design.z,
        sensitivities.z_numerator,
        sensitivities.z_mass,
        lam,
        mu[None, :],
        sensitivities.epsilon,
        params,
    )
    lower = np.array([c.m_lower for c in classes])[:, None]
    upper = np.array([c.m_upper for c in classes])[:, None]
    m_new = _m_candidate(
        design.m,
        lower,
        upper,
        sensitivities.m_numerator,
        sensitivities.m_mass,
        lam,
        sensitivities.epsilon,
        params,
    )
    return z_new, m_new


def _bisect_mu(
    z: np.ndarray,
    z_numerator: np.ndarray,
    z_mass: np.ndarray,
    lam: float,
    epsilon: float,
    params: OCParams,
    mu_start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vectorized bisection of mu over the columns (elements) of (N, k) arrays."""
    k = z.shape[1]

    def overlap(mu):
        return _z_candidate(z, z_numerator, z_mass, lam, mu[None, :], epsilon, params).sum(axis=0)

    mu = np.zeros(k)
    active = overlap(mu) > 1.0 + params.tolerance
    if not np.any(active):
        return mu

    cols = np.nonzero(active)[0]
    start = np.zeros(k) if mu_start is None else np.asarray(mu_start, dtype=float)
    hi = np.maximum(start[cols], np.max(np.maximum(z_numerator[:, cols], 0.0), axis=0) + epsilon)
    lo = np.zeros(cols.size)
    sub = (z[:, cols], z_numerator[:, cols], z_mass[:, cols])

    def sub_overlap(values):
        return _z_candidate(sub[0], sub[1], sub[2], lam, values[None, :], epsilon, params).sum(
            axis=0
        )

    for _ in range(params.max_doublings):
        above = sub_overlap(hi) > 1.0 + params.tolerance
        if not np.any(above):
            break
        lo = np.where(above, hi, lo)
        hi = np.where(above, 2.0 * hi, hi)
    else:
        raise errors.NumericalFailureException(
            "mu", f"No bracket after {params.max_doublings} doublings."
        )

    result = hi.copy()
    pending = np.ones(cols.size, dtype=bool)
    for _ in range(params.max_bisections):
        mid = 0.5 * (lo + hi)
        value = sub_overlap(mid)
        done = pending & (np.abs(value - 1.0) <= params.tolerance)
        result = np.where(done, mid, result)
        pending &= ~done
        if not np.any(pending):
            break
        lo = np.where(value > 1.0, mid, lo)
        hi = np.where(value > 1.0, hi, mid)
        result = np.where(pending, hi, result)

    mu[cols] = result
    return mu


def inner_bisection_mu(
    element: int,
    lam: float,
    design: DesignField,
    sensitivities: FilteredSensitivities,
    params: OCParams,
    mu_start: float = 0.0,
) -> float:
    """Return mu_l so that Sum_i z'_il <= 1 (mu_l = 0) or |Sum_i z'_il - 1| <= tolerance."""
    col = [element]
    return float(
        _bisect_mu(
            design.z[:, col],
            sensitivities.z_numerator[:, col],
            sensitivities.z_mass[:, col],
            lam,
            sensitivities.epsilon,
            params,
            np.array([mu_start]),
        )[0]
    )


def resolve_mu(
    lam: float,
    design: DesignField,
    sensitivities: FilteredSensitivities,
    params: OCParams,
    mu_start: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Return mu for every element at global multiplier lam."""
    return _bisect_mu(
        design.z,
        sensitivities.z_numerator,
        sensitivities.z_mass,
        lam,
        sensitivities.epsilon,
        params,
        mu_start,
    )


def candidate_mass(problem: Problem, z: np.ndarray, m: np.ndarray) -> float:
    """Return the filtered mass of candidate controls."""
    physical = DesignField(
        z=z,
        m=m,
        theta=np.zeros_like(z),
        zhat=apply(problem.filter, z),
        mhat=apply(problem.filter, m),
    )
    return total_mass(problem.mesh, physical, problem.classes, problem.areas)


def evaluate_multipliers(
    problem: Problem,
    design: DesignField,
    sensitivities: FilteredSensitivities,
    params: OCParams,
    lam: float,
    mu_start: Optional[np.ndarray] = None,
) -> MultiplierSolution:
    """Resolve every mu at this lam and return the candidate (z', m') with its mass."""
    mu = resolve_mu(lam, design, sensitivities, params, mu_start)
    z_new, m_new = update_zm(design, sensitivities, lam, mu, params, problem.classes)
    return MultiplierSolution(
        lam=lam, mu=mu, z=z_new, m=m_new, mass=candidate_mass(problem, z_new, m_new)
    )


def outer_bisection_lambda(
    problem: Problem,
    design: DesignField,
    sensitivities: FilteredSensitivities,
    params: OCParams,
    previous_lam: float = 0.0,
    previous_mu: Optional[np.ndarray] = None,
) -> MultiplierSolution:
    """Return Lambda (and mu, z', m') meeting the mass budget to the relative tolerance."""
    budget = problem.mass_budget

    def evaluate(lam):
        return evaluate_multipliers(problem, design, sensitivities, params, lam, previous_mu)

    solution = evaluate(0.0)
    if solution.mass <= budget * (1.0 + params.tolerance):
        return solution

    scale = float(np.sum(np.maximum(sensitivities.z_numerator, 0.0))) / max(
        float(np.sum(sensitivities.z_mass)), np.finfo(float).tiny
    )
    hi = max(previous_lam, scale, sensitivities.epsilon)
    lo = 0.0
    for _ in range(params.max_doublings):
        upper = evaluate(hi)
        if upper.mass <= budget * (1.0 + params.tolerance):
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise errors.NumericalFailureException(
            "Lambda", f"No bracket after {params.max_doublings} doublings."
        )

    best = upper
    for _ in range(params.max_bisections):
        if abs(best.mass - budget) <= params.tolerance * budget:
            break
        mid = evaluate(0.5 * (lo + hi))
        if mid.mass > budget:
            lo = mid.lam
        else:
            hi = mid.lam
            best = mid
        if abs(mid.mass - budget) <= params.tolerance * budget:
            best = mid
            break
    return best


def update_theta(
    design: DesignField,
    gradient: np.ndarray,
    params: OCParams,
    evaluate_compliance: Callable[[np.ndarray], float],
    classes: Sequence[MaterialClass],
    current_compliance: float,
) -> Tuple[np.ndarray, float]:
    """
    Steepest descent step on the control angles with Armijo backtracking.

    Returns the new angles and their compliance; the angles are unchanged when no step is
    accepted.
    """
    mask = np.array([c.optimizes_orientation for c in classes], dtype=bool)[:, None]
    gradient = np.where(mask, gradient, 0.0)
    largest = float(np.max(np.abs(gradient))) if gradient.size else 0.0
    if largest == 0.0 or not np.isfinite(largest):
        return design.theta, current_compliance

    periods = np.array([c.angular_period or 2 * np.pi for c in classes])[:, None]
    step = -gradient * (params.theta_max_move / largest)
    for attempt in range(params.theta_max_backtracks):
        trial = np.where(mask, wrap_period(design.theta + step, periods), design.theta)
        trial_compliance = evaluate_compliance(trial)
        decrease = params.theta_armijo * float(np.sum(gradient * step))
        if trial_compliance <= current_compliance + decrease:
            logger.debug(f"Orientation step accepted after {attempt} backtracks")
            return trial, trial_compliance
        step = step * params.theta_backtrack
    return design.theta, current_compliance


def orientation_change(
    previous: np.ndarray, current: np.ndarray, classes: Sequence[MaterialClass]
) -> float:
    """Return the largest circular angle move over orientable classes, as a fraction of T."""
    mask = np.array([c.optimizes_orientation for c in classes], dtype=bool)
    if not mask.any():
        return 0.0
    periods = np.array([c.angular_period or 2 * np.pi for c in classes])[mask][:, None]
    delta = np.asarray(current)[mask] - np.asarray(previous)[mask]
    distance = np.abs(wrap_period(delta + periods / 2, periods) - periods / 2)
    return float(np.max(distance / periods))


def initial_design(problem: Problem, params: OCParams) -> DesignField:
    """Uniform start: z = min(1/N, value making the mass constraint active), m at midpoints."""
    n = len(problem.classes)
    ne = problem.mesh.element_count
    m_mid = np.array([c.m_mid for c in problem.classes])
    rho_mid = sum(float(c.density.values(np.array(c.m_mid))) for c in problem.classes)
    z0 = min(1.0 / n, problem.mass_budget / (problem.domain_area * rho_mid))
    z0 = min(max(z0, params.z_min), 1.0)

    theta = np.zeros((n, ne))
    if params.random_theta:
        rng = np.random.default_rng(params.seed)
        for i, cls in enumerate(problem.classes):
            if cls.optimizes_orientation:
                theta[i] = rng.uniform(0.0, cls.angular_period, ne)
    design = DesignField(
        z=np.full((n, ne), z0), m=np.repeat(m_mid[:, None], ne, axis=1), theta=theta
    )
    return filter_design(problem.filter, design, problem.classes)


def equilibrium(problem: Problem, design: DesignField, p: float, params: OCParams, geometry):
    K = assemble_stiffness(problem.mesh, design, problem.classes, p, geometry)
    solver = EquilibriumSolver(
        K, free_dofs(problem.mesh), params.solver, params.solver_tolerance
    )
    return solver.solve(load_vector(problem.mesh))


def kkt_residual(
    design: DesignField,
    lam: float,
    mu,
    sensitivities: FilteredSensitivities,
    params: OCParams,
    problem: Problem,
) -> float:
    """Return the largest branch-wise violation of the optimality system at ``design``."""
    eps = sensitivities.epsilon
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (design.element_count,))

    b = (np.maximum(sensitivities.z_numerator, 0.0) + eps) / (
        lam * sensitivities.z_mass + mu[None, :] + eps
    )
    at_zmin = design.z <= params.z_min * (1.0 + 1e-9)
    z_gap = np.where(at_zmin, np.maximum(b - 1.0, 0.0), np.abs(b - 1.0))

    d = (np.maximum(sensitivities.m_numerator, 0.0) + eps) / (lam * sensitivities.m_mass + eps)
    width = problem.m_upper - problem.m_lower
    at_lower = design.m <= problem.m_lower + 1e-9 * width
    at_upper = design.m >= problem.m_upper - 1e-9 * width
    m_gap = np.where(
        at_lower,
        np.maximum(d - 1.0, 0.0),
        np.where(at_upper, np.maximum(1.0 - d, 0.0), np.abs(d - 1.0)),
    )

    scale = float(np.max(np.abs(sensitivities.z_numerator))) + eps
    theta_gap = np.abs(sensitivities.theta_gradient) / scale

    overlap = design.z.sum(axis=0)
    mu_gap = np.where(mu > 0, np.abs(overlap - 1.0), np.maximum(overlap - 1.0, 0.0))

    mass = total_mass(problem.mesh, design, problem.classes, problem.areas)
    budget = problem.mass_budget
    mass_gap = abs(mass - budget) / budget if lam > 0 else max(mass - budget, 0.0) / budget

    return float(
        max(z_gap.max(), m_gap.max(), theta_gap.max(), mu_gap.max(initial=0.0), mass_gap)
    )


def postprocess_round(
    problem: Problem, design: DesignField, params: OCParams
) -> Tuple[DesignField, float]:
    """
    Round z to {0, 1} with at most one active material per element and recompute compliance.

    Values above 1/2 round up (ties go to 0); if several do, the largest wins (lowest index on
    equal values). The compliance uses the rounded z as physical density (void elements at
    z_min) with the converged physical m and theta.
    """
    winner = np.argmax(design.z, axis=0)
    winning = design.z[winner, np.arange(design.element_count)]
    binary = np.zeros_like(design.z)
    solid = winning > 0.5
    binary[winner[solid], np.nonzero(solid)[0]] = 1.0

    rounded = DesignField(
        z=binary,
        m=design.m,
        theta=design.theta,
        zhat=np.maximum(binary, params.z_min),
        mhat=design.mhat,
        thetahat=design.thetahat,
    )
    state = equilibrium(problem, rounded, params.p_final, params, None)
    return rounded, state.compliance


def run(
    problem: Problem,
    params: OCParams = OCParams(),
    callback: Optional[Callable[[int, DesignField, float], None]] = None,
) -> OptimizationResult:
    """Run the nested-bisection Optimality Criteria loop until convergence or max iterations."""
    problem.validate(params)
    geometry = element_geometry(problem.mesh)
    design = initial_design(problem, params)

    lam = 0.0
    mu = np.zeros(problem.mesh.element_count)
    compliance_history: List[float] = []
    mass_history: List[float] = []
    multiplier_history: List[float] = []
    kkt_history: List[float] = []
    orientation_history: List[float] = []
    termination = MAX_ITERATIONS
    iteration = 0

    for iteration in range(params.max_iterations):
        p = continuation_p(iteration, params)
        state = equilibrium(problem, design, p, params, geometry)
        raw = element_energy_sensitivities(
            problem.mesh, design, problem.classes, p, state.U, geometry
        )
        sens = filtered_sensitivities(problem, design, raw, state.compliance, params)

        solution = outer_bisection_lambda(problem, design, sens, params, lam, mu)
        lam, mu = solution.lam, solution.mu
        residual = kkt_residual(design, lam, mu, sens, params, problem)

        def evaluate(theta, design=design, p=p):
            trial = filter_design(
                problem.filter, attr.evolve(design.copy(), theta=theta), problem.classes
            )
            return equilibrium(problem, trial, p, params, geometry).compliance

        theta, _ = update_theta(
            design, sens.theta_gradient, params, evaluate, problem.classes, state.compliance
        )

        width = problem.m_upper - problem.m_lower
        max_change = max(
            float(np.max(np.abs(solution.z - design.z))),
            float(np.max(np.abs(solution.m - design.m) / width)),
        )
        max_dtheta = orientation_change(design.theta, theta, problem.classes)
        mass = total_mass(problem.mesh, design, problem.classes, problem.areas)
        compliance_history.append(state.compliance)
        mass_history.append(mass)
        multiplier_history.append(lam)
        kkt_history.append(residual)
        orientation_history.append(max_dtheta)
        logger.info(
            f"iter {iteration}: p={p:.3f} compliance={state.compliance:.6g} mass={mass:.6g} "
            f"Lambda={lam:.4g} max_dz={max_change:.4g} max_dtheta={max_dtheta:.3g} "
            f"kkt={residual:.3g}",
            extra={
                "iteration": {
                    "iter": iteration,
                    "p": p,
                    "compliance": state.compliance,
                    "mass": mass,
                    "Lambda": lam,
                    "max_dz": max_change,
                    "kkt_residual": residual,
                }
            },
        )
        if callback is not None:
            callback(iteration, design, state.compliance)

        design = filter_design(
            problem.filter,
            DesignField(z=solution.z, m=solution.m, theta=theta),
            problem.classes,
        )

        # stop on z and m moves; orientation moves are logged but do not gate convergence
        if iteration + 1 >= params.continuation_end and max_change < params.convergence:
            termination = CONVERGED
            break

    final_p = continuation_p(iteration + 1, params)
    final_state = equilibrium(problem, design, final_p, params, geometry)
    binary, binary_compliance = postprocess_round(problem, design, params)
    result = OptimizationResult(
        design=design,
        compliance_history=compliance_history,
        mass_history=mass_history,
        multiplier_history=multiplier_history,
        kkt_history=kkt_history,
        iterations=iteration + 1,
        termination=termination,
        compliance=final_state.compliance,
        mass=total_mass(problem.mesh, design, problem.classes, problem.areas),
        lam=lam,
        mu=mu,
        binary_design=binary,
        binary_compliance=binary_compliance,
        orientation_history=orientation_history,
    )
    logger.info(result.summary())
    return result
