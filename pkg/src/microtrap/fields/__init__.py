from .sampling import FieldSample, GridField, SampleError, sample, sample_many
from .solver import (BasisSet, PotentialBasis, SolverError, iter_bases, solve_all, solve_basis,
                     solve_dirichlet, superpose)

__all__ = [
    "BasisSet", "FieldSample", "GridField", "PotentialBasis", "SampleError", "SolverError",
    "iter_bases", "sample", "sample_many", "solve_all", "solve_basis", "solve_dirichlet", "superpose",
]
