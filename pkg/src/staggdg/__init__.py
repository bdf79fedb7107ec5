"""High-order semi-Lagrangian IMEX discontinuous Galerkin solver on staggered triangular meshes."""

__version__ = "0.1.0"
