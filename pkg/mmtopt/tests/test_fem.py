import numpy as np
import pytest
from scipy.sparse.linalg import norm as sparse_norm

from mmtopt.errors import InvalidArgumentException, MeshException, SolverException
from mmtopt.fem import (
    DesignField,
    EquilibriumSolver,
    assemble_stiffness,
    beam_compliance,
    compliance,
    element_energy_sensitivities,
    element_geometry,
    element_stiffness_matrices,
    free_dofs,
    load_vector,
    solve_equilibrium,
    total_mass,
)
from mmtopt.materials import (
    STRIPES_REFERENCE,
    ConstantDensity,
    ConstantStiffness,
    MaterialClass,
    copolymer_classes,
    isotropic_tensor,
)
from mmtopt.mesh import Load, Support, apply_boundary_conditions, build_rect_mesh


def bar_mesh(nx=40, ny=4, force=1.0, length=10.0, height=1.0):
    """Bar held in x on its left edge (one node in y) with an end traction."""
    mesh = build_rect_mesh(length, height, nx, ny)
    return apply_boundary_conditions(
        mesh,
        [
            Support(where="x == 0", components=["x"]),
            Support(nearest=(0.0, 0.0), components=["y"]),
        ],
        [Load(where=f"x == {length}", traction=(force / height, 0.0))],
    )


def solid_design(element_count, classes=1):
    return DesignField(
        z=np.ones((classes, element_count)),
        m=np.zeros((classes, element_count)),
        theta=np.zeros((classes, element_count)),
    )


def single_class(tensor, density=1.0):
    return [
        MaterialClass(
            label="solid", stiffness=ConstantStiffness(tensor), density=ConstantDensity(density)
        )
    ]


def solid_stiffness(mesh, tensor=STRIPES_REFERENCE, p=3.0):
    return assemble_stiffness(mesh, solid_design(mesh.element_count), single_class(tensor), p)


def bar_compliance(mesh, tensor, density=1.0, p=3.0):
    classes = single_class(tensor, density)
    K = assemble_stiffness(mesh, solid_design(mesh.element_count), classes, p)
    return solve_equilibrium(K, load_vector(mesh), mesh).compliance


class TestDesignField:
    def test_hatted_default_to_controls(self):
        design = DesignField(z=[0.5, 0.2], m=[0.0, 0.1], theta=[0.0, 0.0])
        assert design.zhat.shape == (1, 2)
        assert np.array_equal(design.zhat, design.z)
        assert design.zhat is not design.z

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentException):
            DesignField(z=np.ones((2, 3)), m=np.ones((2, 2)), theta=np.ones((2, 3)))

    def test_constraint_violation(self, database):
        classes = copolymer_classes(database)[1:]
        design = DesignField(
            z=[[0.5, 0.6], [0.5, 0.5]], m=[[0.0, 0.0], [0.4, 0.7]], theta=np.zeros((2, 2))
        )
        assert design.constraint_violation(classes, 1e-3) == pytest.approx(0.1)


class TestAssembly:
    def test_symmetric(self, beam_mesh, database):
        classes = copolymer_classes(database)[1:]
        rng = np.random.default_rng(3)
        ne = beam_mesh.element_count
        design = DesignField(
            z=rng.uniform(0.1, 0.5, (2, ne)),
            m=np.stack([rng.uniform(-0.1, 0.1, ne), rng.uniform(0.3, 0.5, ne)]),
            theta=rng.uniform(0, np.pi, (2, ne)),
        )
        K = assemble_stiffness(beam_mesh, design, classes, 3.0)
        assert sparse_norm(K - K.T) <= 1e-12 * sparse_norm(K)

    def test_rigid_modes_in_kernel(self):
        mesh = build_rect_mesh(2.0, 1.0, 4, 2)
        K = solid_stiffness(mesh, p=1.0)
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        rotation = np.column_stack([-y, x]).ravel()
        translation = np.tile([1.0, 0.0], mesh.node_count)
        assert np.abs(K @ rotation).max() < 1e-9
        assert np.abs(K @ translation).max() < 1e-9

    def test_penalization_below_one(self, beam_mesh):
        with pytest.raises(InvalidArgumentException):
            assemble_stiffness(
                beam_mesh,
                solid_design(beam_mesh.element_count),
                single_class(STRIPES_REFERENCE),
                0.5,
            )

    def test_stiffness_matrices_scale_with_penalization(self, beam_mesh):
        design = solid_design(beam_mesh.element_count)
        design.zhat = np.full_like(design.z, 0.5)
        classes = single_class(STRIPES_REFERENCE)
        matrices = element_stiffness_matrices(design, classes, 3.0)
        assert np.allclose(matrices, 0.125 * STRIPES_REFERENCE.matrix)

    def test_geometry(self, beam_mesh):
        geometry = element_geometry(beam_mesh)
        assert geometry.B.shape == (10, 3, 6)
        assert np.allclose(geometry.areas, 0.5)
        # uniform strain u = (x, 0) gives e_xx = 1
        u = np.column_stack([beam_mesh.nodes[:, 0], np.zeros(beam_mesh.node_count)]).ravel()
        strain = np.einsum("eki,ei->ek", geometry.B, u[geometry.dofs])
        assert np.allclose(strain, [1.0, 0.0, 0.0])


class TestEquilibrium:
    def test_no_dirichlet(self):
        mesh = build_rect_mesh(1.0, 1.0, 1, 1)
        with pytest.raises(MeshException):
            free_dofs(mesh)

    def test_unknown_solver(self, beam_mesh):
        K = solid_stiffness(beam_mesh)
        with pytest.raises(InvalidArgumentException):
            EquilibriumSolver(K, free_dofs(beam_mesh), method="lu")

    def test_residual_and_compliance(self, beam_mesh):
        K = solid_stiffness(beam_mesh)
        state = solve_equilibrium(K, load_vector(beam_mesh), beam_mesh)
        assert state.residual <= 1e-10
        assert state.compliance > 0
        assert state.compliance == pytest.approx(compliance(state))
        assert state.compliance == pytest.approx(state.U @ K @ state.U, rel=1e-9)
        assert np.all(state.U[beam_mesh.dirichlet_dofs] == 0)

    def test_cg_matches_direct(self, beam_mesh):
        K = solid_stiffness(beam_mesh)
        f = load_vector(beam_mesh)
        direct = solve_equilibrium(K, f, beam_mesh)
        iterative = solve_equilibrium(K, f, beam_mesh, method="cg", tolerance=1e-12)
        assert iterative.solver["method"] == "cg"
        assert iterative.compliance == pytest.approx(direct.compliance, rel=1e-8)

    def test_zero_load(self, beam_mesh):
        K = solid_stiffness(beam_mesh)
        state = solve_equilibrium(K, np.zeros(beam_mesh.dof_count), beam_mesh)
        assert state.compliance == 0.0

    def test_solver_failure(self, beam_mesh):
        K = solid_stiffness(beam_mesh)
        solver = EquilibriumSolver(K, free_dofs(beam_mesh), method="cg", max_iterations=1)
        with pytest.raises(SolverException):
            solver.solve(load_vector(beam_mesh))

    def test_quadratic_in_load(self, beam_mesh):
        K = solid_stiffness(beam_mesh)
        f = load_vector(beam_mesh)
        once = solve_equilibrium(K, f, beam_mesh).compliance
        assert solve_equilibrium(K, 2 * f, beam_mesh).compliance == pytest.approx(4 * once)


class TestBeamCompliance:
    @pytest.mark.parametrize(
        "tensor",
        [isotropic_tensor(1000.0, 0.3), STRIPES_REFERENCE, STRIPES_REFERENCE.rotate(np.pi / 2)],
    )
    def test_matches_analytic(self, tensor):
        mesh = bar_mesh()
        expected = beam_compliance(1.0, 10.0, 1.0, tensor)
        assert bar_compliance(mesh, tensor) == pytest.approx(expected, rel=1e-2)

    @pytest.mark.slow
    def test_matches_analytic_fine(self):
        mesh = bar_mesh(200, 20)
        expected = beam_compliance(1.0, 10.0, 1.0, STRIPES_REFERENCE)
        assert bar_compliance(mesh, STRIPES_REFERENCE) == pytest.approx(expected, rel=1e-2)

    @pytest.mark.parametrize("tensor", [isotropic_tensor(1000.0, 0.3), STRIPES_REFERENCE])
    def test_doubling_stiffness_halves_compliance(self, tensor):
        mesh = bar_mesh(20, 2)
        assert bar_compliance(mesh, 2 * tensor) == pytest.approx(
            0.5 * bar_compliance(mesh, tensor), rel=1e-10
        )

    def test_mass_scaling(self):
        """C M = F^2 L^2 rho / E_eff for a bar filling its mass budget."""
        mesh = bar_mesh(20, 2)
        force, length = 1.0, 10.0
        for e, rho in ((1000.0, 1.0), (500.0, 2.0), (100.0, 0.3)):
            tensor = isotropic_tensor(e, 0.3)
            e_eff = tensor.xxxx - tensor.xxyy**2 / tensor.yyyy
            mass = total_mass(mesh, solid_design(mesh.element_count), single_class(tensor, rho))
            scaled = bar_compliance(mesh, tensor) * mass
            assert scaled == pytest.approx(force**2 * length**2 * rho / e_eff, rel=1e-2)


class TestSensitivities:
    def test_mass(self, beam_mesh):
        design = solid_design(beam_mesh.element_count)
        design.zhat = np.full_like(design.z, 0.5)
        assert total_mass(beam_mesh, design, single_class(STRIPES_REFERENCE, 2.0)) == pytest.approx(
            5.0
        )

    def test_physical_finite_differences(self, beam_mesh, database):
        classes = copolymer_classes(database)[1:]
        rng = np.random.default_rng(11)
        ne = beam_mesh.element_count
        base = DesignField(
            z=rng.uniform(0.2, 0.45, (2, ne)),
            m=np.stack([rng.uniform(-0.1, 0.1, ne), rng.uniform(0.3, 0.5, ne)]),
            theta=rng.uniform(0.2, 1.2, (2, ne)),
        )
        p = 3.0

        def value(design):
            K = assemble_stiffness(beam_mesh, design, classes, p)
            return solve_equilibrium(K, load_vector(beam_mesh), beam_mesh).compliance

        K = assemble_stiffness(beam_mesh, base, classes, p)
        U = solve_equilibrium(K, load_vector(beam_mesh), beam_mesh).U
        s = element_energy_sensitivities(beam_mesh, base, classes, p, U)
        h = 1e-6
        for i, element in ((0, 3), (1, 7)):
            for name, expected in (("zhat", -s.s_z), ("mhat", -s.s_m), ("thetahat", -s.s_theta)):
                plus, minus = base.copy(), base.copy()
                getattr(plus, name)[i, element] += h
                getattr(minus, name)[i, element] -= h
                fd = (value(plus) - value(minus)) / (2 * h)
                assert fd == pytest.approx(expected[i, element], rel=1e-5, abs=1e-9)

    def test_isotropic_class_has_no_angle_sensitivity(self, beam_mesh, database):
        classes = copolymer_classes(database)[1:]
        design = DesignField(
            z=np.full((2, 10), 0.3),
            m=np.stack([np.zeros(10), np.full(10, 0.4)]),
            theta=np.full((2, 10), 0.5),
        )
        K = assemble_stiffness(beam_mesh, design, classes, 3.0)
        U = solve_equilibrium(K, load_vector(beam_mesh), beam_mesh).U
        s = element_energy_sensitivities(beam_mesh, design, classes, 3.0, U)
        assert np.all(s.s_theta[1] == 0)
        assert np.any(s.s_theta[0] != 0)
        assert np.all(s.s_z > 0)
