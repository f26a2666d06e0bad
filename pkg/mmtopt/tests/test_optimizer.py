import textwrap

import attr
import numpy as np
import pytest

from mmtopt.config import build_problem, parse_config
from mmtopt.errors import ConfigurationException, InfeasibleBudgetException
from mmtopt.fem import DesignField, element_energy_sensitivities, total_mass
from mmtopt.filtering import ChainRuleTerms, filter_design, identity_filter
from mmtopt.materials import copolymer_classes
from mmtopt.mesh import build_rect_mesh
from mmtopt.optimizer import (
    CONVERGED,
    MAX_ITERATIONS,
    FilteredSensitivities,
    OCParams,
    Problem,
    candidate_mass,
    continuation_p,
    equilibrium,
    evaluate_multipliers,
    filtered_sensitivities,
    initial_design,
    inner_bisection_mu,
    kkt_residual,
    orientation_change,
    outer_bisection_lambda,
    postprocess_round,
    resolve_mu,
    run,
    update_theta,
    update_zm,
)

MBB_CONFIG = textwrap.dedent(
    """
    [problem]
    preset = "mbb"
    resolution = [60, 12]

    [materials]
    kind = "rotated"
    angle_set = "quarters"

    [optimizer]
    convergence = 1e-3
    max_iterations = 600
    """
)


def sensitivities(z_numerator, z_mass, m_numerator, m_mass, epsilon=1e-9):
    return FilteredSensitivities(
        terms=ChainRuleTerms(
            z_numerator=np.asarray(z_numerator, dtype=float),
            z_mass=np.asarray(z_mass, dtype=float),
            m_numerator=np.asarray(m_numerator, dtype=float),
            m_mass=np.asarray(m_mass, dtype=float),
        ),
        theta_gradient=np.zeros(np.shape(z_numerator)),
        epsilon=epsilon,
    )


def random_problem(database, rng):
    """50 elements, three copolymer classes, random positive sensitivities."""
    mesh = build_rect_mesh(5.0, 5.0, 5, 5)
    classes = copolymer_classes(database)
    problem = Problem(
        mesh=mesh, classes=classes, mass_budget=40.0, filter=identity_filter(mesh.element_count)
    )
    shape = (3, mesh.element_count)
    lower, upper = problem.m_lower, problem.m_upper
    design = DesignField(
        z=rng.uniform(0.05, 0.45, shape),
        m=lower + (upper - lower) * rng.uniform(0.1, 0.9, shape),
        theta=np.zeros(shape),
    )
    rho = np.stack([c.density.values(design.m[i]) for i, c in enumerate(classes)])
    sens = sensitivities(
        z_numerator=rng.uniform(0.0, 5.0, shape),
        z_mass=problem.areas * rho,
        m_numerator=rng.uniform(0.0, 2.0, shape),
        m_mass=problem.areas * 4.5 * design.z,
    )
    return problem, design, sens


def control_design(problem, rng):
    ne = problem.mesh.element_count
    return DesignField(
        z=rng.uniform(0.2, 0.45, (2, ne)),
        m=np.stack([rng.uniform(-0.1, 0.1, ne), rng.uniform(0.3, 0.5, ne)]),
        theta=rng.uniform(1.0, 1.4, (2, ne)),
    )


class TestContinuation:
    def test_default_schedule(self):
        assert continuation_p(0) == 1.0
        assert continuation_p(29) == 1.0
        assert continuation_p(30) == 1.0
        assert continuation_p(45) == pytest.approx(2.0)
        assert continuation_p(60) == 3.0
        assert continuation_p(250) == 3.0

    def test_no_ramp(self):
        params = OCParams(p_hold=5, p_ramp=0)
        assert continuation_p(4, params) == 1.0
        assert continuation_p(5, params) == 3.0


class TestProblem:
    def test_budget_must_exceed_minimum(self, gradient_problem):
        problem = attr.evolve(gradient_problem, mass_budget=1e-3)
        with pytest.raises(InfeasibleBudgetException):
            problem.validate(OCParams())

    def test_z_min_below_inverse_class_count(self, gradient_problem):
        with pytest.raises(ConfigurationException, match="z_min"):
            gradient_problem.validate(OCParams(z_min=0.5))

    def test_valid(self, gradient_problem):
        gradient_problem.validate(OCParams())
        assert gradient_problem.domain_area == pytest.approx(5.0)
        assert gradient_problem.maximum_density() == pytest.approx(8.2)


class TestInitialDesign:
    def test_uniform_start_meets_budget(self, gradient_problem):
        design = initial_design(gradient_problem, OCParams())
        assert np.allclose(design.z, 10.0 / (5.0 * 12.8))
        assert np.allclose(design.m[0], 0.0)
        assert np.allclose(design.m[1], 0.4)
        mass = total_mass(gradient_problem.mesh, design, gradient_problem.classes)
        assert mass == pytest.approx(10.0)

    def test_random_orientation(self, gradient_problem):
        params = OCParams(random_theta=True, seed=4)
        first = initial_design(gradient_problem, params)
        again = initial_design(gradient_problem, params)
        assert np.array_equal(first.theta, again.theta)
        assert np.all((first.theta[0] >= 0) & (first.theta[0] < np.pi))
        assert np.all(first.theta[1] == 0)


class TestGradients:
    def test_control_finite_differences(self, gradient_problem, rng):
        problem = gradient_problem
        params = OCParams()
        p = 3.0
        design = control_design(problem, rng)

        def physical(controls):
            return filter_design(problem.filter, controls, problem.classes)

        def compliance(controls):
            return equilibrium(problem, physical(controls), p, params, None).compliance

        def mass(controls):
            return total_mass(problem.mesh, physical(controls), problem.classes)

        state = equilibrium(problem, physical(design), p, params, None)
        raw = element_energy_sensitivities(
            problem.mesh, physical(design), problem.classes, p, state.U
        )
        sens = filtered_sensitivities(problem, physical(design), raw, state.compliance, params)
        expected = {
            "z": (-sens.z_numerator, sens.z_mass),
            "m": (-sens.m_numerator, sens.m_mass),
            "theta": (sens.theta_gradient, np.zeros_like(design.theta)),
        }

        h = 1e-6
        for i, element in ((0, 2), (0, 9), (1, 5)):
            for name, (d_compliance, d_mass) in expected.items():
                plus, minus = design.copy(), design.copy()
                getattr(plus, name)[i, element] += h
                getattr(minus, name)[i, element] -= h
                fd = (compliance(plus) - compliance(minus)) / (2 * h)
                assert fd == pytest.approx(d_compliance[i, element], rel=1e-4, abs=1e-8)
                fd_mass = (mass(plus) - mass(minus)) / (2 * h)
                assert fd_mass == pytest.approx(d_mass[i, element], rel=1e-6, abs=1e-9)

    def test_epsilon_scales_with_energy(self, gradient_problem, rng):
        design = filter_design(
            gradient_problem.filter, control_design(gradient_problem, rng), gradient_problem.classes
        )
        state = equilibrium(gradient_problem, design, 3.0, OCParams(), None)
        raw = element_energy_sensitivities(
            gradient_problem.mesh, design, gradient_problem.classes, 3.0, state.U
        )
        sens = filtered_sensitivities(gradient_problem, design, raw, state.compliance, OCParams())
        assert sens.epsilon == pytest.approx(1e-9 * state.compliance / 10)


class TestMultipliers:
    def test_fixed_point(self, database):
        classes = copolymer_classes(database)[1:]
        design = DesignField(z=[[0.3], [0.3]], m=[[0.05], [0.35]], theta=np.zeros((2, 1)))
        sens = sensitivities([[2.0], [2.0]], [[1.0], [1.0]], [[3.0], [3.0]], [[1.5], [1.5]])
        z_new, m_new = update_zm(design, sens, 2.0, 0.0, OCParams(), classes)
        assert np.allclose(z_new, design.z)
        assert np.allclose(m_new, design.m)

    def test_candidate_bounds(self, database, rng):
        problem, design, sens = random_problem(database, rng)
        params = OCParams()
        for lam in (0.0, 0.1, 10.0):
            z_new, m_new = update_zm(design, sens, lam, 0.0, params, problem.classes)
            assert np.all(z_new >= np.maximum(design.z - params.move_z, params.z_min) - 1e-15)
            assert np.all(z_new <= design.z + params.move_z + 1e-15)
            assert np.all(np.abs(m_new - design.m) <= params.move_m + 1e-15)
            assert np.all((m_new >= problem.m_lower) & (m_new <= problem.m_upper))

    def test_overlap_non_increasing_in_mu(self, database, rng):
        problem, design, sens = random_problem(database, rng)
        previous = None
        for mu in np.linspace(0.0, 10.0, 50):
            z_new, _ = update_zm(design, sens, 0.5, mu, OCParams(), problem.classes)
            overlap = z_new.sum(axis=0)
            if previous is not None:
                assert np.all(overlap <= previous + 1e-12)
            previous = overlap

    def test_mass_non_increasing_in_lambda(self, database, rng):
        problem, design, sens = random_problem(database, rng)
        params = OCParams(tolerance=1e-12)
        masses = [
            evaluate_multipliers(problem, design, sens, params, lam).mass
            for lam in np.linspace(0.0, 2.0, 50)
        ]
        assert np.all(np.diff(masses) <= 1e-10 * problem.mass_budget)
        assert masses[-1] < masses[0]

    def test_mu_complementarity(self, database, rng):
        problem, design, sens = random_problem(database, rng)
        params = OCParams()
        mu = resolve_mu(0.05, design, sens, params)
        z_new, _ = update_zm(design, sens, 0.05, mu, params, problem.classes)
        overlap = z_new.sum(axis=0)
        assert np.any(mu > 0)
        assert np.all(overlap[mu == 0] <= 1.0 + params.tolerance)
        assert np.all(np.abs(overlap[mu > 0] - 1.0) <= params.tolerance)

    def test_inner_bisection_matches_scalar_oracle(self, database):
        classes = copolymer_classes(database)[1:]
        params = OCParams(move_z=0.5)
        design = DesignField(z=[[0.4], [0.4]], m=[[0.0], [0.4]], theta=np.zeros((2, 1)))
        numerator = 3.0625 * (1.0 + 1e-9) - 1e-9
        ones = [[1.0], [1.0]]
        sens = sensitivities([[numerator], [numerator]], ones, ones, ones)

        def overlap(mu):
            return update_zm(design, sens, 1.0, mu, params, classes)[0].sum()

        assert overlap(0.0) == pytest.approx(1.4)
        lo, hi = 0.0, 100.0
        while hi - lo > 1e-14 * hi:
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if overlap(mid) > 1.0 else (lo, mid)

        mu = inner_bisection_mu(0, 1.0, design, sens, params)
        assert mu > 0
        assert overlap(mu) == pytest.approx(1.0, abs=params.tolerance)
        assert mu == pytest.approx(hi, rel=1e-3)
        assert resolve_mu(1.0, design, sens, params)[0] == mu

    def test_lambda_meets_budget(self, database, rng):
        problem, design, sens = random_problem(database, rng)
        params = OCParams()
        unconstrained = evaluate_multipliers(problem, design, sens, params, 0.0)
        problem = attr.evolve(problem, mass_budget=0.8 * unconstrained.mass)
        solution = outer_bisection_lambda(problem, design, sens, params)
        assert solution.lam > 0
        assert solution.mass == pytest.approx(problem.mass_budget, rel=params.tolerance)
        assert candidate_mass(problem, solution.z, solution.m) == pytest.approx(solution.mass)

    def test_inactive_budget(self, database, rng):
        problem, design, sens = random_problem(database, rng)
        problem = attr.evolve(problem, mass_budget=1e6)
        solution = outer_bisection_lambda(problem, design, sens, OCParams())
        assert solution.lam == 0.0


class TestOrientationUpdate:
    def test_armijo_step(self, database):
        classes = copolymer_classes(database)[1:]
        design = DesignField(z=np.full((2, 3), 0.3), m=np.zeros((2, 3)), theta=np.zeros((2, 3)))
        target = np.array([0.2, 0.5, 3.0])

        def evaluate(theta):
            return float(np.sum((theta[0] - target) ** 2))

        gradient = np.stack([2 * (design.theta[0] - target), np.ones(3)])
        params = OCParams()
        current = evaluate(design.theta)
        theta, value = update_theta(design, gradient, params, evaluate, classes, current)
        assert value < current
        assert value == evaluate(theta)
        assert np.all(np.abs(theta[0] - design.theta[0]) <= params.theta_max_move + 1e-12)
        assert np.all((theta[0] >= 0) & (theta[0] < np.pi))
        assert np.array_equal(theta[1], design.theta[1])

    def test_no_descent_keeps_angles(self, database):
        classes = copolymer_classes(database)[1:]
        design = DesignField(
            z=np.full((2, 2), 0.3), m=np.zeros((2, 2)), theta=np.full((2, 2), 0.4)
        )
        theta, value = update_theta(
            design, np.ones((2, 2)), OCParams(), lambda theta: 10.0, classes, 1.0
        )
        assert np.array_equal(theta, design.theta)
        assert value == 1.0

    def test_zero_gradient(self, database):
        classes = copolymer_classes(database)[1:]
        design = DesignField(
            z=np.full((2, 2), 0.3), m=np.zeros((2, 2)), theta=np.full((2, 2), 0.4)
        )
        theta, _ = update_theta(design, np.zeros((2, 2)), OCParams(), None, classes, 1.0)
        assert theta is design.theta


class TestKKT:
    def test_stationary_design(self, gradient_problem):
        design = DesignField(
            z=np.full((2, 10), 0.3),
            m=np.stack([np.zeros(10), np.full(10, 0.4)]),
            theta=np.zeros((2, 10)),
        )
        problem = attr.evolve(
            gradient_problem,
            mass_budget=total_mass(gradient_problem.mesh, design, gradient_problem.classes),
        )
        ones = np.ones((2, 10))
        stationary = sensitivities(2 * ones, ones, 2 * ones, ones, epsilon=1e-12)
        assert kkt_residual(design, 2.0, 0.0, stationary, OCParams(), problem) < 1e-12

        perturbed = sensitivities(2.2 * ones, ones, 2 * ones, ones, epsilon=1e-12)
        residual = kkt_residual(design, 2.0, 0.0, perturbed, OCParams(), problem)
        assert residual == pytest.approx(0.1, rel=1e-6)

    def test_lower_bound_branch(self, gradient_problem):
        params = OCParams()
        design = DesignField(
            z=np.full((2, 10), params.z_min),
            m=np.stack([np.zeros(10), np.full(10, 0.4)]),
            theta=np.zeros((2, 10)),
        )
        problem = attr.evolve(
            gradient_problem,
            mass_budget=total_mass(gradient_problem.mesh, design, gradient_problem.classes),
        )
        ones = np.ones((2, 10))
        sens = sensitivities(0.5 * ones, ones, 2 * ones, ones, epsilon=1e-12)
        assert kkt_residual(design, 2.0, 0.0, sens, params, problem) < 1e-12


class TestRounding:
    def test_winner_takes_element(self, gradient_problem):
        z = np.full((2, 10), 0.2)
        z[0, :3] = 0.7
        z[1, 3:6] = 0.8
        z[:, 6] = 0.5
        design = filter_design(
            gradient_problem.filter,
            DesignField(
                z=z, m=np.stack([np.zeros(10), np.full(10, 0.4)]), theta=np.zeros((2, 10))
            ),
            gradient_problem.classes,
        )
        params = OCParams()
        binary, compliance = postprocess_round(gradient_problem, design, params)
        assert binary.z[:, :3].tolist() == [[1.0] * 3, [0.0] * 3]
        assert binary.z[:, 3:6].tolist() == [[0.0] * 3, [1.0] * 3]
        assert np.all(binary.z[:, 6:] == 0)
        assert np.all(binary.zhat >= params.z_min)
        assert np.isfinite(compliance) and compliance > 0


class TestRun:
    def test_short_run_stays_feasible(self, gradient_problem):
        params = OCParams(max_iterations=5, p_hold=5, p_ramp=5)
        seen = []
        result = run(gradient_problem, params, lambda i, design, c: seen.append(design))
        assert result.termination == MAX_ITERATIONS
        assert result.iterations == 5
        assert len(result.compliance_history) == len(result.kkt_history) == 5
        assert len(seen) == 5
        for design in seen + [result.design]:
            assert design.constraint_violation(gradient_problem.classes, params.z_min) <= 1e-4
        assert result.mass <= gradient_problem.mass_budget * (1 + 1e-4)
        assert set(np.unique(result.binary_design.z)) <= {0.0, 1.0}
        assert np.all(result.binary_design.z.sum(axis=0) <= 1)

    def test_compliance_decreases_at_fixed_penalization(self, gradient_problem):
        params = OCParams(max_iterations=20, p_initial=3.0, p_hold=0, p_ramp=0)
        result = run(gradient_problem, params)
        assert result.compliance_history[-1] < result.compliance_history[0]
        assert "iterations" in result.summary()

    def test_orientation_moves_reported(self, gradient_problem):
        params = OCParams(max_iterations=4, p_hold=4, p_ramp=0)
        result = run(gradient_problem, params)
        assert len(result.orientation_history) == result.iterations == 4
        assert all(0.0 <= move <= 0.125 + 1e-12 for move in result.orientation_history)


class TestOrientationChange:
    def test_circular_distance(self, gradient_problem):
        previous = np.zeros((2, 10))
        previous[0] = 0.05
        current = previous.copy()
        current[0, 3] = np.pi - 0.05
        change = orientation_change(previous, current, gradient_problem.classes)
        assert change == pytest.approx(0.1 / np.pi)

    def test_isotropic_classes_ignored(self, gradient_problem):
        previous = np.zeros((2, 10))
        current = previous.copy()
        current[1] = 1.0
        assert orientation_change(previous, current, gradient_problem.classes) == 0.0


@pytest.mark.slow
class TestMBB:
    @pytest.fixture(scope="class")
    def solved(self):
        config = parse_config(MBB_CONFIG)
        problem = build_problem(config)
        return problem, config.optimizer, run(problem, config.optimizer)

    def test_fixed_point(self, solved):
        problem, params, result = solved
        assert result.termination == CONVERGED
        p = params.p_final
        design = result.design
        state = equilibrium(problem, design, p, params, None)
        raw = element_energy_sensitivities(problem.mesh, design, problem.classes, p, state.U)
        sens = filtered_sensitivities(problem, design, raw, state.compliance, params)
        solution = outer_bisection_lambda(problem, design, sens, params, result.lam, result.mu)
        assert np.max(np.abs(solution.z - design.z)) <= 1e-3
        residual = kkt_residual(design, solution.lam, solution.mu, sens, params, problem)
        assert residual <= 1e-2

    def test_feasible_and_binary(self, solved):
        problem, params, result = solved
        assert result.design.constraint_violation(problem.classes, params.z_min) <= 1e-4
        assert abs(result.mass - problem.mass_budget) <= 1e-4 * problem.mass_budget
        largest = result.design.z.max(axis=0)
        active = largest > 0.5 * (1.0 / len(problem.classes))
        near_binary = np.abs(largest - np.round(largest)) < 0.1
        assert near_binary[active].mean() >= 0.9

    def test_beats_uniform_design(self, solved):
        problem, params, result = solved
        uniform = initial_design(problem, params)
        baseline = equilibrium(problem, uniform, 1.0, params, None).compliance
        assert result.binary_compliance <= 0.7 * baseline
