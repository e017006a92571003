"""Monte Carlo fixed-point solver for distribution-coupled diffusions on the torus.

The package assembles velocity fields of incompressible flows from particle
systems whose drift depends on expectations over the particles' own future,
iterating the induced map to a fixed point and validating the result against
deterministic oracles (Cole-Hopf, spectral mild solutions, Taylor-Green).
"""

__version__ = "0.1.0"

from .fields import (
    DomainDescriptor,
    FieldNormReport,
    SpaceTimeField,
    grid_nodes,
    interp_grid,
    periodic_wrap,
    read_fdns1,
    subsample_field,
    write_fdns1,
)

__all__ = [
    "DomainDescriptor",
    "FieldNormReport",
    "SpaceTimeField",
    "grid_nodes",
    "interp_grid",
    "periodic_wrap",
    "read_fdns1",
    "subsample_field",
    "write_fdns1",
    "__version__",
]
