"""
Parses problem configuration files into concrete objects.

A configuration is TOML with the sections ``[problem]``, ``[materials]``, ``[[supports]]``,
``[[loads]]``, ``[optimizer]`` and ``[homogenization]``. ``parse_config`` checks keys and values;
``build_problem`` resolves the preset or mesh file, the material classes, the filter and the
mass budget into an ``optimizer.Problem``.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type

import attr
import cattr
import numpy as np
import toml

from . import errors
from .filtering import build_filter
from .homogenize import CHOParams, ElasticityParams, load_or_build_database
from .materials import (
    ANGLE_SETS,
    STRIPES_REFERENCE,
    ConstantDensity,
    ConstantStiffness,
    HomogenizedDatabase,
    MaterialClass,
    Tensor4,
    copolymer_classes,
    isotropic_tensor,
    rotated_copies,
)
from .mesh import Load, Mesh, Support, apply_boundary_conditions, read_mesh
from .optimizer import OCParams, Problem
from .presets import PRESETS

logger = logging.getLogger(__name__)

MATERIAL_KINDS = ("explicit", "rotated", "copolymer")
DEFAULT_ANGLE_SET = "quarters"


@attr.s(auto_attribs=True, kw_only=True)
class ProblemSection:
    """Domain, resolution, filter radius and mass budget."""

    preset: Optional[str] = None
    mesh_file: Optional[str] = None
    resolution: Optional[List[int]] = None
    pattern: str = "diagonal"
    r_min: Optional[float] = None
    volume_fraction: Optional[float] = None
    mass: Optional[float] = None
    seed: int = 0
    output: str = "output"


@attr.s(auto_attribs=True, kw_only=True)
class ExplicitMaterial:
    """A material class with a constant tensor, given by (E, nu) or six entries."""

    label: str
    e: Optional[float] = None
    nu: Optional[float] = None
    entries: Optional[List[float]] = None
    density: float = 1.0
    angular_period_deg: Optional[float] = None
    orientation_free: bool = False

    def tensor(self) -> Tensor4:
        if (self.entries is None) == (self.e is None or self.nu is None):
            raise errors.ConfigurationException(
                f"materials.explicit.{self.label}", "Give either 'entries' or both 'e' and 'nu'."
            )
        if self.entries is not None:
            return Tensor4.from_entries(*self.entries)
        return isotropic_tensor(self.e, self.nu)


@attr.s(auto_attribs=True, kw_only=True)
class MaterialsSection:
    """
    Candidate material set.

    ``rotated`` builds fixed-orientation copies of ``reference`` (six entries, default the
    stripe tensor) for ``angles_deg`` or a named ``angle_set``; ``copolymer`` reads or builds a
    homogenized database; ``explicit`` lists classes directly.
    """

    kind: str = "rotated"
    reference: Optional[List[float]] = None
    density: float = 1.0
    angles_deg: Optional[List[float]] = None
    angle_set: Optional[str] = None
    database: Optional[str] = None
    orientation_free: bool = True
    explicit: List[ExplicitMaterial] = attr.Factory(list)


@attr.s(auto_attribs=True, kw_only=True)
class HomogenizationSection:
    """Pattern simulation and phase parameters for building a database."""

    gamma: float = 20.0
    nx: int = 128
    ny: int = 128
    dt: float = 0.05
    max_time: float = 500.0
    periods: int = 6
    noise: float = 0.05
    template_amplitude: float = 0.25
    seed: int = 0
    e_a: float = 1000.0
    e_b: float = 100.0
    nu: float = 0.3
    rho_a: Optional[float] = None
    rho_b: Optional[float] = None
    solver: str = "direct"

    def cho_params(self) -> CHOParams:
        return CHOParams(
            gamma=self.gamma,
            nx=self.nx,
            ny=self.ny,
            dt=self.dt,
            max_time=self.max_time,
            periods=self.periods,
            noise=self.noise,
            template_amplitude=self.template_amplitude,
            seed=self.seed,
        )

    def elasticity_params(self) -> ElasticityParams:
        return ElasticityParams(
            e_a=self.e_a,
            e_b=self.e_b,
            nu_a=self.nu,
            nu_b=self.nu,
            rho_a=self.rho_a,
            rho_b=self.rho_b,
            solver=self.solver,
        )


@attr.s(auto_attribs=True, kw_only=True)
class ProblemConfig:
    """Fully parsed configuration with defaults applied."""

    problem: ProblemSection = attr.Factory(ProblemSection)
    materials: MaterialsSection = attr.Factory(MaterialsSection)
    supports: List[Support] = attr.Factory(list)
    loads: List[Load] = attr.Factory(list)
    optimizer: OCParams = attr.Factory(OCParams)
    homogenization: HomogenizationSection = attr.Factory(HomogenizationSection)
    source: Optional[Path] = None


SECTIONS: Dict[str, Type] = {
    "problem": ProblemSection,
    "materials": MaterialsSection,
    "supports": Support,
    "loads": Load,
    "optimizer": OCParams,
    "homogenization": HomogenizationSection,
}


def _field_names(cls: Type) -> List[str]:
    return [field.name for field in attr.fields(cls)]


def _check_keys(data: Mapping[str, Any], cls: Type, path: str):
    """Reject keys that are not attributes of ``cls``."""
    allowed = _field_names(cls)
    for key in data:
        if key not in allowed:
            raise errors.ConfigurationException(f"{path}.{key}", "Unknown key.")


def _converter() -> cattr.Converter:
    converter = cattr.Converter()
    converter.register_structure_hook(Path, lambda value, _: Path(value))
    return converter


def parse_config(text: str, source: Optional[Path] = None) -> ProblemConfig:
    """Parse TOML text into a checked ``ProblemConfig``."""
    try:
        data = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise errors.ConfigurationException("toml", f"Malformed configuration: {e}")

    for key, value in data.items():
        if key not in SECTIONS:
            raise errors.ConfigurationException(key, "Unknown section.")
        cls = SECTIONS[key]
        entries = value if isinstance(value, list) else [value]
        for index, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise errors.ConfigurationException(key, "Expected a table.")
            path = f"{key}[{index}]" if isinstance(value, list) else key
            _check_keys(entry, cls, path)
            if key == "materials":
                for k, material in enumerate(entry.get("explicit", [])):
                    _check_keys(material, ExplicitMaterial, f"materials.explicit[{k}]")

    converter = _converter()
    sections = {}
    for key, cls in SECTIONS.items():
        if key not in data:
            continue
        try:
            if key in ("supports", "loads"):
                if not isinstance(data[key], list):
                    raise errors.ConfigurationException(key, "Expected an array of tables.")
                sections[key] = [converter.structure(entry, cls) for entry in data[key]]
            else:
                sections[key] = converter.structure(data[key], cls)
        except errors.ConfigurationException:
            raise
        except Exception as e:
            raise errors.ConfigurationException(key, f"Invalid value: {e}") from e

    config = ProblemConfig(**sections, source=source)
    _check_values(config)
    return config


def load_config(path: Path) -> ProblemConfig:
    """Read and parse a configuration file."""
    path = Path(path)
    return parse_config(path.read_text(), source=path)


def _check_values(config: ProblemConfig):
    problem = config.problem
    if (problem.preset is None) == (problem.mesh_file is None):
        raise errors.ConfigurationException(
            "problem.preset", "Exactly one of 'preset' or 'mesh_file' is required."
        )
    if problem.preset is not None and problem.preset not in PRESETS:
        raise errors.ConfigurationException(
            "problem.preset", f"Unknown preset; expected one of {', '.join(PRESETS)}."
        )
    if problem.mesh_file is not None:
        if problem.r_min is None:
            raise errors.ConfigurationException("problem.r_min", "Required with 'mesh_file'.")
        if not config.supports or not config.loads:
            raise errors.ConfigurationException(
                "supports", "A mesh file needs [[supports]] and [[loads]]."
            )
    if problem.resolution is not None and (
        len(problem.resolution) != 2 or min(problem.resolution) < 1
    ):
        raise errors.ConfigurationException("problem.resolution", "Expected [nx, ny] >= 1.")
    if problem.r_min is not None and problem.r_min <= 0:
        raise errors.ConfigurationException("problem.r_min", "Filter radius must be positive.")
    if problem.volume_fraction is not None and problem.mass is not None:
        raise errors.ConfigurationException(
            "problem.mass", "Give either 'mass' or 'volume_fraction', not both."
        )
    if problem.mass is not None and problem.mass <= 0:
        raise errors.InfeasibleBudgetException(problem.mass, 0.0)
    if problem.volume_fraction is not None and not 0 < problem.volume_fraction <= 1:
        if problem.volume_fraction <= 0:
            raise errors.InfeasibleBudgetException(problem.volume_fraction, 0.0)
        raise errors.ConfigurationException(
            "problem.volume_fraction", "Volume fraction must lie in (0, 1]."
        )

    materials = config.materials
    if materials.kind not in MATERIAL_KINDS:
        raise errors.ConfigurationException(
            "materials.kind", f"Expected one of {', '.join(MATERIAL_KINDS)}."
        )
    if materials.kind == "rotated":
        if materials.angles_deg is not None and materials.angle_set is not None:
            raise errors.ConfigurationException(
                "materials.angles_deg", "Give either 'angles_deg' or 'angle_set', not both."
            )
        if materials.angles_deg is not None and not materials.angles_deg:
            raise errors.ConfigurationException("materials.angles_deg", "No candidate angles.")
        if materials.angle_set is not None and materials.angle_set not in ANGLE_SETS:
            raise errors.ConfigurationException(
                "materials.angle_set", f"Expected one of {', '.join(ANGLE_SETS)}."
            )
        if materials.reference is not None and len(materials.reference) != 6:
            raise errors.ConfigurationException("materials.reference", "Expected six entries.")
    if materials.kind == "explicit" and not materials.explicit:
        raise errors.ConfigurationException(
            "materials.explicit", "At least one [[materials.explicit]] entry is required."
        )


def candidate_angles(materials: MaterialsSection) -> Tuple[float, ...]:
    """Return the candidate angles in radians, the quarter turns unless configured."""
    if materials.angles_deg is not None:
        return tuple(float(np.deg2rad(angle)) for angle in materials.angles_deg)
    return ANGLE_SETS[materials.angle_set or DEFAULT_ANGLE_SET]


def build_mesh(config: ProblemConfig) -> Mesh:
    """Mesh the preset domain or read the mesh file, then apply supports and loads."""
    problem = config.problem
    supports = config.supports or None
    loads = config.loads or None
    if problem.preset is not None:
        return PRESETS[problem.preset].build_mesh(
            problem.resolution, problem.pattern, supports, loads
        )
    mesh_file = Path(problem.mesh_file)
    if not mesh_file.is_absolute() and config.source is not None:
        mesh_file = config.source.parent / mesh_file
    return apply_boundary_conditions(read_mesh(mesh_file), config.supports, config.loads)


def load_database(
    config: ProblemConfig, threads: int = 1, cache_dir: Optional[str] = None
) -> HomogenizedDatabase:
    """Read the configured database or build it (through the cache) from [homogenization]."""
    database = config.materials.database
    if database is not None:
        path = Path(database)
        if not path.is_absolute() and config.source is not None:
            path = config.source.parent / path
        if not path.exists():
            raise errors.ConfigurationException("materials.database", f"{path} does not exist.")
        return HomogenizedDatabase.load(path)
    section = config.homogenization
    return load_or_build_database(
        section.cho_params(), section.elasticity_params(), threads, cache_dir
    )


def build_classes(
    config: ProblemConfig, threads: int = 1, cache_dir: Optional[str] = None
) -> List[MaterialClass]:
    """Return the candidate material classes."""
    materials = config.materials
    if materials.kind == "rotated":
        reference = (
            Tensor4.from_entries(*materials.reference)
            if materials.reference is not None
            else STRIPES_REFERENCE
        )
        return rotated_copies(reference, candidate_angles(materials), materials.density)
    if materials.kind == "copolymer":
        return copolymer_classes(
            load_database(config, threads, cache_dir), materials.orientation_free
        )
    return [
        MaterialClass(
            label=entry.label,
            stiffness=ConstantStiffness(entry.tensor()),
            density=ConstantDensity(entry.density),
            angular_period=(
                np.deg2rad(entry.angular_period_deg)
                if entry.angular_period_deg is not None
                else None
            ),
            orientation_free=entry.orientation_free,
        )
        for entry in materials.explicit
    ]


def mass_budget(config: ProblemConfig, problem_area: float, maximum_density: float) -> float:
    """Return the absolute budget; a volume fraction f means f |Omega| max_i rho_i(m_upper_i)."""
    if config.problem.mass is not None:
        return config.problem.mass
    fraction = config.problem.volume_fraction
    if fraction is None:
        fraction = (
            PRESETS[config.problem.preset].volume_fraction if config.problem.preset else 0.4
        )
    return fraction * problem_area * maximum_density


def build_problem(
    config: ProblemConfig, threads: int = 1, cache_dir: Optional[str] = None
) -> Problem:
    """Resolve a configuration into a validated optimization problem."""
    mesh = build_mesh(config)
    classes = build_classes(config, threads, cache_dir)
    r_min = config.problem.r_min
    if r_min is None:
        r_min = PRESETS[config.problem.preset].r_min
    problem = Problem(
        mesh=mesh, classes=classes, mass_budget=0.0, filter=build_filter(mesh, r_min)
    )
    problem = attr.evolve(
        problem,
        mass_budget=mass_budget(config, problem.domain_area, problem.maximum_density()),
    )
    problem.validate(config.optimizer)
    logger.info(
        f"Problem with {mesh.element_count} elements, {len(classes)} classes, "
        f"budget {problem.mass_budget:.6g}"
    )
    return problem


def validate(config: ProblemConfig, threads: int = 1, cache_dir: Optional[str] = None) -> Problem:
    """Validate a config by building its problem without solving."""
    return build_problem(config, threads, cache_dir)
