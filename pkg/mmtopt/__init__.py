"""mmtopt."""
