"""Para-differential calculus on the torus and a quasilinear NLS solver."""

__version__ = "0.1.0"
