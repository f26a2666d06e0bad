"""Design dumps (CSV), VTK files and SVG renders of optimized designs."""

import csv
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
from jinja2 import Environment, FileSystemLoader

from . import errors
from .fem import DesignField
from .filtering import wrap_period
from .materials import MaterialClass
from .mesh import Mesh, element_areas, element_centroids, write_mesh
from .optimizer import OCParams, Problem, equilibrium

logger = logging.getLogger(__name__)

PATH = Path(os.path.dirname(__file__))
TEMPLATE_FOLDER = PATH / "templates"
VOID_LABEL = "void"
VOID_FILL = "#ffffff"
ISOTROPIC_FILL = "#9e9e9e"
PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#ff7f0e",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#17becf",
)
ARRAY_COLUMNS = ("z", "m", "theta", "zhat", "mhat", "thetahat")


@attr.s(auto_attribs=True, eq=False)
class DesignTable:
    """A design read back from a CSV dump."""

    design: DesignField
    labels: List[str]
    orientations: List[Optional[float]]
    m_combined: np.ndarray
    areas: np.ndarray
    centroids: np.ndarray


def _render(template_file: str, render_kwargs: Dict[str, Any]) -> str:
    """Render a template from the template folder."""
    file_loader = FileSystemLoader(TEMPLATE_FOLDER)
    env = Environment(loader=file_loader)
    template = env.get_template(template_file)
    return template.render(**render_kwargs)


def _writable(path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.exists() and path.is_dir():
        raise errors.InvalidArgumentException(str(path), "Expected a file path, got a directory.")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise errors.InvalidArgumentException(str(path), f"Cannot create directory: {e}")
    return path


def active_classes(design: DesignField) -> np.ndarray:
    """Return the index of the material with z = 1 per element, or -1 for void elements."""
    winner = np.argmax(design.z, axis=0)
    solid = design.z[winner, np.arange(design.element_count)] > 0.5
    return np.where(solid, winner, -1)


def element_orientations(
    design: DesignField, classes: Sequence[MaterialClass]
) -> List[Optional[float]]:
    """Return the drawn orientation per element; None for void and isotropic elements."""
    orientations: List[Optional[float]] = []
    for element, index in enumerate(active_classes(design)):
        if index < 0 or classes[index].angular_period is None:
            orientations.append(None)
        else:
            cls = classes[index]
            angle = cls.base_angle + design.thetahat[index, element]
            orientations.append(float(wrap_period(angle, np.pi)))
    return orientations


def m_combined(design: DesignField) -> np.ndarray:
    """Return Sum_i z_i m_i per element, on the control variables."""
    return np.sum(design.z * design.m, axis=0)


def export_csv(
    design: DesignField,
    problem: Problem,
    path: Union[str, Path],
    mesh_path: Optional[Union[str, Path]] = None,
):
    """
    Write one row per element.

    Columns are ``elem, area, cx, cy``, then ``z_i, m_i, theta_i, zhat_i, mhat_i, thetahat_i``
    for every class, then ``class_label, orientation, m_combined``. Floats are written with
    ``repr`` so that a reload is bit-exact. The mesh is written next to the CSV unless
    ``mesh_path`` says otherwise.
    """
    path = _writable(path)
    n = design.material_count
    areas = problem.areas
    centroids = element_centroids(problem.mesh)
    winners = active_classes(design)
    orientations = element_orientations(design, problem.classes)
    combined = m_combined(design)

    header = ["elem", "area", "cx", "cy"]
    for name in ARRAY_COLUMNS:
        header += [f"{name}_{i + 1}" for i in range(n)]
    header += ["class_label", "orientation", "m_combined"]

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for e in range(design.element_count):
            row = [str(e), repr(float(areas[e])), repr(float(centroids[e, 0]))]
            row.append(repr(float(centroids[e, 1])))
            for name in ARRAY_COLUMNS:
                row += [repr(float(v)) for v in getattr(design, name)[:, e]]
            label = problem.classes[winners[e]].label if winners[e] >= 0 else VOID_LABEL
            orientation = "" if orientations[e] is None else repr(orientations[e])
            row += [label, orientation, repr(float(combined[e]))]
            writer.writerow(row)

    mesh_path = Path(mesh_path) if mesh_path else path.with_name("mesh.txt")
    write_mesh(problem.mesh, mesh_path)
    logger.info(f"Wrote {design.element_count} elements to {path}")


def load_design_csv(path: Union[str, Path]) -> DesignTable:
    """Read a design written by ``export_csv``."""
    path = Path(path)
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise errors.InvalidArgumentException(str(path), f"Cannot read design: {e}")
    if not rows:
        raise errors.InvalidArgumentException(str(path), "Design file has no rows.")

    n = sum(1 for key in rows[0] if key.startswith("z_"))
    try:
        arrays = {
            name: np.array([[float(row[f"{name}_{i + 1}"]) for row in rows] for i in range(n)])
            for name in ARRAY_COLUMNS
        }
        areas = np.array([float(row["area"]) for row in rows])
        centroids = np.array([[float(row["cx"]), float(row["cy"])] for row in rows])
        combined = np.array([float(row["m_combined"]) for row in rows])
    except (KeyError, ValueError) as e:
        raise errors.InvalidArgumentException(str(path), f"Malformed design file: {e}")

    return DesignTable(
        design=DesignField(**arrays),
        labels=[row["class_label"] for row in rows],
        orientations=[float(row["orientation"]) if row["orientation"] else None for row in rows],
        m_combined=combined,
        areas=areas,
        centroids=centroids,
    )


def recompute_compliance(problem: Problem, design: DesignField, params: OCParams) -> float:
    """Return the compliance of a stored physical design at the final penalization."""
    return equilibrium(problem, design, params.p_final, params, None).compliance


def export_vtk(
    design: DesignField,
    mesh: Mesh,
    path: Union[str, Path],
    title: str = "mmtopt design",
):
    """Write a legacy ASCII unstructured grid with per-element design arrays as cell data."""
    path = _writable(path)
    fields: List[Tuple[str, List[str]]] = []
    for name in ("zhat", "mhat", "thetahat"):
        array = getattr(design, name)
        for i in range(design.material_count):
            fields.append((f"{name}_{i + 1}", [repr(float(v)) for v in array[i]]))
    fields.append(("class", [str(int(v)) for v in active_classes(design)]))
    fields.append(("m_combined", [repr(float(v)) for v in m_combined(design)]))

    text = _render(
        "design.vtk.j2",
        {
            "title": title,
            "points": [(repr(x), repr(y)) for x, y in mesh.nodes.tolist()],
            "cells": mesh.triangles.tolist(),
            "fields": fields,
        },
    )
    path.write_text(text)
    logger.info(f"Wrote VTK with {mesh.element_count} cells to {path}")


def render_svg(
    mesh: Mesh,
    labels: Sequence[str],
    orientations: Sequence[Optional[float]],
    path: Union[str, Path],
    title: str = "mmtopt design",
    pixels: int = 800,
):
    """
    Render the allocation of classes.

    Each class gets a palette fill; isotropic classes are grey and void elements white.
    Anisotropic elements carry a hatch line through the centroid along their orientation.
    """
    if len(labels) != mesh.element_count or len(orientations) != mesh.element_count:
        raise errors.InvalidArgumentException(
            "labels", f"Expected {mesh.element_count} element entries, got {len(labels)}."
        )
    path = _writable(path)
    xmin, ymin = mesh.nodes.min(axis=0)
    xmax, ymax = mesh.nodes.max(axis=0)
    span = max(xmax - xmin, ymax - ymin)
    margin = 0.02 * span
    font = 0.04 * span

    anisotropic_labels = sorted(
        {label for label, o in zip(labels, orientations) if o is not None}
    )
    isotropic_labels = sorted(
        {label for label, o in zip(labels, orientations) if o is None and label != VOID_LABEL}
    )
    colors = {label: PALETTE[k % len(PALETTE)] for k, label in enumerate(anisotropic_labels)}
    colors.update({label: ISOTROPIC_FILL for label in isotropic_labels})
    colors[VOID_LABEL] = VOID_FILL

    xy = mesh.nodes[mesh.triangles]
    polygons = [
        {
            "points": " ".join(f"{x:.6g},{y:.6g}" for x, y in xy[e]),
            "fill": colors[labels[e]],
        }
        for e in range(mesh.element_count)
    ]
    centroids = element_centroids(mesh)
    half = 0.5 * np.sqrt(element_areas(mesh))
    hatches = []
    for e, angle in enumerate(orientations):
        if angle is None:
            continue
        dx, dy = half[e] * np.cos(angle), half[e] * np.sin(angle)
        cx, cy = centroids[e]
        hatches.append(
            {
                "x1": f"{cx - dx:.6g}",
                "y1": f"{cy - dy:.6g}",
                "x2": f"{cx + dx:.6g}",
                "y2": f"{cy + dy:.6g}",
            }
        )

    legend_labels = anisotropic_labels + isotropic_labels
    legend = [
        {
            "x": f"{xmin:.6g}",
            "y": f"{-ymin + margin + (k + 1) * 1.2 * font:.6g}",
            "fill": colors[label],
            "label": label,
        }
        for k, label in enumerate(legend_labels)
    ]
    width = xmax - xmin + 2 * margin
    height = ymax - ymin + 2 * margin + 1.2 * font * (len(legend_labels) + 1)
    text = _render(
        "design.svg.j2",
        {
            "title": title,
            "x0": f"{xmin - margin:.6g}",
            "y0": f"{-(ymax + margin):.6g}",
            "width": f"{width:.6g}",
            "height": f"{height:.6g}",
            "pixels_x": pixels,
            "pixels_y": int(round(pixels * height / width)),
            "flip": 0,
            "stroke": f"{0.002 * span:.6g}",
            "font": f"{font:.6g}",
            "polygons": polygons,
            "hatches": hatches,
            "legend": legend,
        },
    )
    path.write_text(text)
    logger.info(f"Rendered {mesh.element_count} elements to {path}")
