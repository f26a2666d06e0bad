"""Parse and handle the case-study presets."""

from pathlib import Path
from typing import Any, Dict, List, MutableMapping, Optional, Sequence

import attr
import cattr
import toml

from . import errors
from .mesh import Load, Mesh, Support, apply_boundary_conditions, build_lshape_mesh, build_rect_mesh

presets_config = toml.load(Path(__file__).parent.parent / "presets_config.toml")

SHAPES = ("rectangle", "lshape")


@attr.s(auto_attribs=True, kw_only=True)
class Preset:
    """
    Case-study domain with its default boundary conditions.

    :param shape: ``rectangle`` or ``lshape`` (square of side ``width`` minus its upper-right
        quadrant)
    :param resolution: default cell counts (nx, ny)
    :param volume_fraction: default budget as a fraction of |Omega| max_i rho_i(m_upper_i)
    """

    def _check_value_not_null(self, attribute, value):
        if not value and str(value).lower() == "none":
            raise errors.ConfigurationException(
                f"preset.{attribute.name}", f"A value is required, got {value}."
            )

    name: str = attr.ib(validator=_check_value_not_null)
    width: float
    height: float
    resolution: List[int]
    r_min: float
    shape: str = "rectangle"
    volume_fraction: float = 0.4
    supports: List[Support] = attr.Factory(list)
    loads: List[Load] = attr.Factory(list)

    def build_mesh(
        self,
        resolution: Optional[Sequence[int]] = None,
        pattern: str = "diagonal",
        supports: Optional[Sequence[Support]] = None,
        loads: Optional[Sequence[Load]] = None,
    ) -> Mesh:
        """Mesh the domain and apply the given or the default supports and loads."""
        nx, ny = resolution or self.resolution
        if self.shape == "lshape":
            if nx != ny:
                raise errors.ConfigurationException(
                    "problem.resolution", "The L-shape needs equal cell counts."
                )
            mesh = build_lshape_mesh(self.width, nx, pattern)
        else:
            mesh = build_rect_mesh(self.width, self.height, nx, ny, pattern)
        return apply_boundary_conditions(
            mesh,
            self.supports if supports is None else supports,
            self.loads if loads is None else loads,
        )


def _generate_presets(config: MutableMapping[str, Any]) -> Dict[str, Preset]:
    """Take preset configuration and generate the preset object map."""
    converter = cattr.Converter()
    presets = {}
    for name, preset_config in config["preset"].items():
        preset = converter.structure({**preset_config, "name": name}, Preset)
        if preset.shape not in SHAPES:
            raise errors.ConfigurationException(
                f"preset.{name}.shape", f"Expected one of {', '.join(SHAPES)}."
            )
        presets[name] = preset
    return presets


PRESETS = _generate_presets(presets_config)
