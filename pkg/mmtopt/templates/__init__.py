"""VTK and SVG templates."""
