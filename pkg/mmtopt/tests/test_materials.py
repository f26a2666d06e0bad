import numpy as np
import pytest

from mmtopt.errors import InvalidArgumentException, OutOfRangeException
from mmtopt.materials import (
    ANGLE_SETS,
    STRIPES_REFERENCE,
    AffineDensity,
    ConstantStiffness,
    HomogenizedDatabase,
    MaterialClass,
    Tensor4,
    copolymer_classes,
    density_affine,
    directional_modulus,
    directional_stiffness,
    interp_database,
    interp_database_derivative,
    isotropic_tensor,
    lame_parameters,
    normalized_stiffness,
    reuss_bound,
    rotate_tensor,
    rotate_tensor_derivative,
    rotated_copies,
    voigt_bound,
)

from .conftest import spots_tensor, stripes_tensor


class TestTensor4:
    def test_plane_strain_isotropic(self):
        C = isotropic_tensor(1000.0, 0.3)
        lam, mu = lame_parameters(1000.0, 0.3)
        assert C.xxxx == pytest.approx(lam + 2 * mu)
        assert C.xxyy == pytest.approx(lam)
        assert C.xyxy == pytest.approx(mu)
        assert C.xxyy / C.xxxx == pytest.approx(0.3 / 0.7)

    def test_invalid_poisson(self):
        with pytest.raises(InvalidArgumentException):
            lame_parameters(1.0, 0.5)

    def test_not_symmetric(self):
        with pytest.raises(InvalidArgumentException):
            Tensor4([[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    def test_entries(self):
        C = Tensor4.from_entries(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
        assert C.entries() == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
        assert C.component("xyxy") == 4.0

    def test_contract(self):
        C = STRIPES_REFERENCE
        assert C.contract([[1.0, 0.0], [0.0, 0.0]]) == pytest.approx(C.xxxx)
        assert C.contract([[0.0, 0.5], [0.5, 0.0]]) == pytest.approx(C.xyxy)

    def test_positive_definite(self):
        assert STRIPES_REFERENCE.is_positive_definite()
        assert not Tensor4.from_entries(1.0, 1.0, 2.0, 1.0).is_positive_definite()


class TestRotation:
    def test_identity_and_period(self):
        C = stripes_tensor(0.1)
        assert np.allclose(rotate_tensor(C, 0.0).matrix, C.matrix)
        assert np.allclose(rotate_tensor(C, np.pi).matrix, C.matrix)

    def test_quarter_turn_swaps_axes(self):
        C = stripes_tensor(0.0)
        R = rotate_tensor(C, np.pi / 2)
        assert R.xxxx == pytest.approx(C.yyyy)
        assert R.yyyy == pytest.approx(C.xxxx)
        assert R.component("xxxy") == pytest.approx(0.0, abs=1e-10)

    def test_isotropic_invariant(self):
        C = isotropic_tensor(100.0, 0.25)
        assert np.allclose(rotate_tensor(C, 0.7).matrix, C.matrix)

    def test_composition(self):
        C = stripes_tensor(-0.1)
        twice = rotate_tensor(rotate_tensor(C, 0.3), 0.5)
        assert np.allclose(twice.matrix, rotate_tensor(C, 0.8).matrix)

    def test_eigenvalues_invariant(self):
        C = stripes_tensor(0.2)
        assert np.allclose(C.eigenvalues(), rotate_tensor(C, 1.1).eigenvalues())

    def test_derivative(self):
        C = stripes_tensor(0.05)
        h = 1e-6
        fd = (rotate_tensor(C, 0.4 + h).matrix - rotate_tensor(C, 0.4 - h).matrix) / (2 * h)
        assert np.allclose(rotate_tensor_derivative(C, 0.4).matrix, fd, atol=1e-5)

    def test_directional_stiffness_follows_rotation(self):
        C = stripes_tensor(0.0)
        alpha = np.linspace(0, np.pi, 7)
        rotated = directional_stiffness(rotate_tensor(C, 0.3), alpha + 0.3)
        assert np.allclose(rotated, directional_stiffness(C, alpha))


class TestMechanicalBounds:
    def test_isotropic_moduli(self):
        C = isotropic_tensor(1000.0, 0.3)
        alpha = np.linspace(0, np.pi, 5)
        assert np.allclose(directional_modulus(C, alpha), 1000.0 / (1 - 0.3**2))
        assert np.allclose(directional_stiffness(C, alpha), C.xxxx)

    def test_orthotropic_modulus(self):
        C = stripes_tensor(0.0)
        assert directional_modulus(C, 0.0) == pytest.approx(C.xxxx - C.xxyy**2 / C.yyyy)

    def test_normalized_stiffness(self):
        ratio, alpha = normalized_stiffness(STRIPES_REFERENCE, 2.0)
        assert alpha == pytest.approx(0.0)
        assert ratio == pytest.approx(directional_modulus(STRIPES_REFERENCE, 0.0) / 2.0)

    def test_voigt_above_reuss(self):
        tensors = [isotropic_tensor(1000.0, 0.3), isotropic_tensor(100.0, 0.3)]
        voigt = voigt_bound(tensors, [0.5, 0.5]).matrix
        difference = voigt - reuss_bound(tensors, [0.5, 0.5]).matrix
        assert np.all(np.linalg.eigvalsh(difference) > 0)

    def test_density_affine(self):
        assert density_affine(10.0, 1.0, 1.0) == 10.0
        assert density_affine(10.0, 1.0, -1.0) == 1.0
        assert density_affine(10.0, 1.0, 0.0) == 5.5
        with pytest.raises(InvalidArgumentException):
            density_affine(10.0, 1.0, 1.5)


class TestDatabase:
    def test_interpolates_samples(self, database):
        for m in (-0.2, 0.0, 0.2):
            assert np.allclose(interp_database(database, m, 1).matrix, stripes_tensor(m).matrix)
        assert np.allclose(interp_database(database, 0.13).matrix, stripes_tensor(0.13).matrix)
        assert np.allclose(interp_database(database, 0.5).matrix, spots_tensor(0.5).matrix)

    def test_derivative(self, database):
        h = 1e-6
        upper = interp_database(database, 0.45 + h).matrix
        fd = (upper - interp_database(database, 0.45 - h).matrix) / (2 * h)
        assert np.allclose(interp_database_derivative(database, 0.45).matrix, fd, atol=1e-4)

    def test_locate(self, database):
        assert database.locate(-0.5) == (0, -0.5)
        index, clamped = database.locate(0.6 + 1e-12)
        assert index == 2
        assert clamped == 0.6
        with pytest.raises(OutOfRangeException, match="valid intervals"):
            database.locate(0.7)

    def test_save_and_load(self, database, tmp_path):
        database.save(tmp_path / "db.toml")
        loaded = HomogenizedDatabase.load(tmp_path / "db.toml")
        assert loaded.bounds() == database.bounds()
        assert loaded.rho_a == 10.0
        for a, b in zip(loaded.intervals, database.intervals):
            assert a.pattern == b.pattern
            assert all(np.array_equal(s.matrix, t.matrix) for s, t in zip(a.tensors, b.tensors))


class TestMaterialClass:
    def test_copolymer_classes(self, database):
        classes = copolymer_classes(database)
        assert [c.label for c in classes] == ["a_spots", "stripes", "b_spots"]
        assert [c.optimizes_orientation for c in classes] == [False, True, False]
        assert classes[1].m_lower == -0.2
        assert classes[1].m_mid == 0.0
        for cls in classes:
            cls.validate()

    def test_rotated_copies(self):
        angles = ANGLE_SETS["quarters"]
        classes = rotated_copies(STRIPES_REFERENCE, angles)
        assert len(classes) == 4
        for cls, angle in zip(classes, angles):
            assert cls.base_angle == angle
            assert not cls.optimizes_orientation
            expected = rotate_tensor(STRIPES_REFERENCE, angle).matrix
            assert np.allclose(cls.stiffness_at(0.5).matrix, expected)

    def test_decreasing_density(self):
        cls = MaterialClass(
            label="bad",
            stiffness=ConstantStiffness(STRIPES_REFERENCE),
            density=AffineDensity(1.0, 10.0),
            m_lower=-0.2,
            m_upper=0.2,
        )
        with pytest.raises(InvalidArgumentException, match="non-decreasing"):
            cls.validate()

    def test_indefinite_stiffness(self):
        cls = MaterialClass(
            label="bad", stiffness=ConstantStiffness(Tensor4.from_entries(1.0, 1.0, 2.0, 1.0))
        )
        with pytest.raises(InvalidArgumentException, match="positive definite"):
            cls.validate()

    def test_empty_interval(self):
        with pytest.raises(InvalidArgumentException):
            MaterialClass(
                label="bad", stiffness=ConstantStiffness(STRIPES_REFERENCE), m_lower=1, m_upper=1
            )
