"""Triangulations of the design domains and element geometry queries."""

import logging
import re
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from . import errors

logger = logging.getLogger(__name__)

PATTERNS = ("diagonal", "alternating", "crossed")
COMPONENTS = {"x": 0, "y": 1}

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_CLAUSE = re.compile(rf"^\s*([xy])\s*(==|<=|>=|<|>)\s*({_NUMBER})\s*$")


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Mesh:
    """
    Conforming triangulation of a 2D domain.

    Degrees of freedom are numbered node-major: dof ``2 * node + c`` with ``c = 0`` for x
    and ``c = 1`` for y.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    dirichlet_dofs: np.ndarray = attr.ib(factory=lambda: np.zeros(0, dtype=np.int64))
    nodal_forces: Optional[np.ndarray] = None

    @property
    def node_count(self) -> int:
        """Return the number of nodes."""
        return int(self.nodes.shape[0])

    @property
    def element_count(self) -> int:
        """Return the number of triangles."""
        return int(self.triangles.shape[0])

    @property
    def dof_count(self) -> int:
        """Return the number of displacement degrees of freedom."""
        return 2 * self.node_count

    @property
    def forces(self) -> np.ndarray:
        """Return the nodal force array of shape (node_count, 2)."""
        if self.nodal_forces is None:
            return np.zeros((self.node_count, 2))
        return self.nodal_forces

    @property
    def dirichlet_nodes(self):
        """Return the constrained node sets per component."""
        return {
            name: set((self.dirichlet_dofs[self.dirichlet_dofs % 2 == c] // 2).tolist())
            for name, c in COMPONENTS.items()
        }

    def validate(self, require_supports: bool = True):
        """Check orientation, index ranges, conformity and supports."""
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise errors.MeshException("nodes", "Nodes must be an (n, 2) array.")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise errors.MeshException("triangles", "Triangles must be an (n, 3) array.")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= self.node_count
        ):
            raise errors.MeshException("triangles", "Node index out of range.")

        areas = _signed_areas(self.nodes, self.triangles)
        if np.any(areas <= 0):
            bad = int(np.argmin(areas))
            raise errors.MeshException(
                f"triangle {bad}", f"Non-positive signed area {areas[bad]:.3e}."
            )

        directed = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        _, directed_counts = np.unique(directed, axis=0, return_counts=True)
        _, undirected_counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
        if np.any(directed_counts > 1) or np.any(undirected_counts > 2):
            raise errors.MeshException("triangles", "Mesh is not conforming.")

        if np.any(self.dirichlet_dofs < 0) or np.any(self.dirichlet_dofs >= self.dof_count):
            raise errors.MeshException("dirichlet_dofs", "Degree of freedom out of range.")
        if require_supports and self.dirichlet_dofs.size == 0:
            raise errors.MeshException("dirichlet_dofs", "Dirichlet boundary is empty.")


@attr.s(auto_attribs=True, frozen=True)
class Support:
    """Displacement constraint on the nodes selected by a predicate or a point."""

    where: Optional[str] = None
    nearest: Optional[Tuple[float, float]] = None
    components: List[str] = attr.Factory(lambda: ["x", "y"])


@attr.s(auto_attribs=True, frozen=True)
class Load:
    """Point force at the node nearest to a location, or traction on a boundary segment."""

    nearest: Optional[Tuple[float, float]] = None
    force: Optional[Tuple[float, float]] = None
    where: Optional[str] = None
    traction: Optional[Tuple[float, float]] = None


def _signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    return 0.5 * (
        (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    )


def element_areas(mesh: Mesh) -> np.ndarray:
    """Return per-element areas."""
    return _signed_areas(mesh.nodes, mesh.triangles)


def element_centroids(mesh: Mesh) -> np.ndarray:
    """Return per-element centroids of shape (element_count, 2)."""
    return mesh.nodes[mesh.triangles].mean(axis=1)


def domain_area(mesh: Mesh) -> float:
    """Return the total area of the mesh."""
    return float(np.sum(element_areas(mesh)))


def boundary_edges(mesh: Mesh) -> np.ndarray:
    """Return the edges used by a single triangle, oriented as in that triangle."""
    directed = np.concatenate(
        [mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]]
    )
    _, inverse, counts = np.unique(
        np.sort(directed, axis=1), axis=0, return_inverse=True, return_counts=True
    )
    return directed[counts[inverse.reshape(-1)] == 1]


def _structured_mesh(
    width: float,
    height: float,
    nx: int,
    ny: int,
    pattern: str,
    cell_mask: Optional[np.ndarray] = None,
) -> Mesh:
    if pattern not in PATTERNS:
        raise errors.InvalidArgumentException(
            "pattern", f"Unknown pattern '{pattern}', expected one of {', '.join(PATTERNS)}."
        )

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    if cell_mask is None:
        cell_mask = np.ones((nx, ny), dtype=bool)
    ci = ii[cell_mask]
    cj = jj[cell_mask]

    gi, gj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
    lattice = np.column_stack(
        [gi.ravel() * (width / nx), gj.ravel() * (height / ny)]
    )

    def node(i, j):
        return j * (nx + 1) + i

    a = node(ci, cj)
    b = node(ci + 1, cj)
    c = node(ci + 1, cj + 1)
    d = node(ci, cj + 1)

    if pattern == "diagonal":
        tris = np.stack([np.column_stack([a, b, c]), np.column_stack([a, c, d])], axis=1)
        nodes = lattice
    elif pattern == "alternating":
        odd = ((ci + cj) % 2 == 1)[:, None]
        first = np.where(odd, np.column_stack([a, b, d]), np.column_stack([a, b, c]))
        second = np.where(odd, np.column_stack([b, c, d]), np.column_stack([a, c, d]))
        tris = np.stack([first, second], axis=1)
        nodes = lattice
    else:
        e = lattice.shape[0] + np.arange(ci.size)
        centres = np.column_stack([(ci + 0.5) * (width / nx), (cj + 0.5) * (height / ny)])
        tris = np.stack(
            [
                np.column_stack([a, b, e]),
                np.column_stack([b, c, e]),
                np.column_stack([c, d, e]),
                np.column_stack([d, a, e]),
            ],
            axis=1,
        )
        nodes = np.concatenate([lattice, centres])

    tris = tris.reshape(-1, 3)
    used, compact = np.unique(tris, return_inverse=True)
    mesh = Mesh(nodes=nodes[used], triangles=compact.reshape(-1, 3).astype(np.int64))
    mesh.validate(require_supports=False)
    logger.debug(
        f"Built {pattern} mesh with {mesh.node_count} nodes and {mesh.element_count} elements"
    )
    return mesh


def build_rect_mesh(
    width: float, height: float, nx: int, ny: int, pattern: str = "diagonal"
) -> Mesh:
    """
    Return a structured triangulation of ``[0, width] x [0, height]``.

    ``diagonal`` and ``alternating`` split each cell into two triangles, ``crossed`` into
    four around a cell-centre node.
    """
    if width <= 0 or height <= 0:
        raise errors.InvalidArgumentException("width/height", "Dimensions must be positive.")
    if nx < 1 or ny < 1:
        raise errors.InvalidArgumentException("nx/ny", "At least one cell per direction.")
    return _structured_mesh(width, height, nx, ny, pattern)


def build_lshape_mesh(size: float, n: int, pattern: str = "diagonal") -> Mesh:
    """Return the square of side ``size`` minus its upper-right quadrant, n cells per side."""
    if size <= 0:
        raise errors.InvalidArgumentException("size", "Size must be positive.")
    if n < 2 or n % 2:
        raise errors.InvalidArgumentException("n", f"Cell count must be even, got {n}.")
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = ~((ii >= n // 2) & (jj >= n // 2))
    return _structured_mesh(size, size, n, n, pattern, cell_mask=mask)


def parse_predicate(text: str, scale: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """
    Parse a geometric predicate such as ``"x == 0"`` or ``"y >= 1 and x <= 2"``.

    Comparisons are tolerant to ``1e-9 * scale``.
    """
    tol = 1e-9 * max(scale, 1.0)
    checks = []
    for clause in text.split(" and "):
        match = _CLAUSE.match(clause)
        if not match:
            raise errors.ConfigurationException("where", f"Cannot parse predicate '{text}'.")
        axis, op, value = COMPONENTS[match.group(1)], match.group(2), float(match.group(3))
        checks.append((axis, op, value))

    def predicate(points: np.ndarray) -> np.ndarray:
        mask = np.ones(points.shape[0], dtype=bool)
        for axis, op, value in checks:
            coord = points[:, axis]
            if op == "==":
                mask &= np.abs(coord - value) <= tol
            elif op == "<=":
                mask &= coord <= value + tol
            elif op == ">=":
                mask &= coord >= value - tol
            elif op == "<":
                mask &= coord < value - tol
            else:
                mask &= coord > value + tol
        return mask

    return predicate


def nearest_node(mesh: Mesh, point: Sequence[float]) -> int:
    """Return the index of the node closest to ``point`` (lowest index on ties)."""
    distances = np.linalg.norm(mesh.nodes - np.asarray(point, dtype=float), axis=1)
    return int(np.argmin(distances))


def _scale(mesh: Mesh) -> float:
    return float(np.ptp(mesh.nodes, axis=0).max())


def apply_boundary_conditions(
    mesh: Mesh, supports: Sequence[Support], loads: Sequence[Load]
) -> Mesh:
    """Resolve support and load declarations to constrained dofs and nodal forces."""
    scale = _scale(mesh)
    dofs = set()
    for support in supports:
        if (support.where is None) == (support.nearest is None):
            raise errors.ConfigurationException(
                "supports", "Each support needs exactly one of 'where' or 'nearest'."
            )
        if support.where is not None:
            selected = np.nonzero(parse_predicate(support.where, scale)(mesh.nodes))[0]
        else:
            selected = np.array([nearest_node(mesh, support.nearest)])
        if selected.size == 0:
            raise errors.ConfigurationException(
                "supports", f"Predicate '{support.where}' selects no node."
            )
        for component in support.components:
            if component not in COMPONENTS:
                raise errors.ConfigurationException(
                    "supports.components", f"Unknown component '{component}'."
                )
            dofs.update((2 * selected + COMPONENTS[component]).tolist())

    forces = np.zeros((mesh.node_count, 2))
    for load in loads:
        if load.nearest is not None and load.force is not None and load.where is None:
            forces[nearest_node(mesh, load.nearest)] += np.asarray(load.force, dtype=float)
        elif load.where is not None and load.traction is not None and load.nearest is None:
            predicate = parse_predicate(load.where, scale)
            edges = boundary_edges(mesh)
            on_segment = predicate(mesh.nodes[edges[:, 0]]) & predicate(mesh.nodes[edges[:, 1]])
            if not np.any(on_segment):
                raise errors.ConfigurationException(
                    "loads", f"Predicate '{load.where}' selects no boundary edge."
                )
            edges = edges[on_segment]
            lengths = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
            share = 0.5 * lengths[:, None] * np.asarray(load.traction, dtype=float)[None, :]
            np.add.at(forces, edges[:, 0], share)
            np.add.at(forces, edges[:, 1], share)
        else:
            raise errors.ConfigurationException(
                "loads", "A load is either 'nearest' + 'force' or 'where' + 'traction'."
            )

    return attr.evolve(
        mesh, dirichlet_dofs=np.array(sorted(dofs), dtype=np.int64), nodal_forces=forces
    )


def read_mesh(source: Union[str, Path]) -> Mesh:
    """
    Read a mesh from the plain text format.

    The format is the node count, ``x y`` lines, the triangle count and 0-based ``i j k`` lines.
    """
    tokens = Path(source).read_text().split()
    try:
        n_nodes = int(tokens[0])
        coords = np.array(tokens[1 : 1 + 2 * n_nodes], dtype=float).reshape(n_nodes, 2)
        offset = 1 + 2 * n_nodes
        n_tris = int(tokens[offset])
        tris = np.array(tokens[offset + 1 : offset + 1 + 3 * n_tris], dtype=np.int64)
        tris = tris.reshape(n_tris, 3)
    except (IndexError, ValueError) as e:
        raise errors.MeshException(str(source), f"Malformed mesh file: {e}")
    if len(tokens) != offset + 1 + 3 * n_tris:
        raise errors.MeshException(str(source), "Trailing data in mesh file.")
    mesh = Mesh(nodes=coords, triangles=tris)
    mesh.validate(require_supports=False)
    return mesh


def write_mesh(mesh: Mesh, path: Union[str, Path]):
    """Write a mesh in the plain text format."""
    lines = [str(mesh.node_count)]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines.append(str(mesh.element_count))
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
