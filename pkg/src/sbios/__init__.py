"""Bayesian image-on-scalar regression with Gaussian-process coefficient images,
voxel selection indicators, and Gibbs or stochastic-gradient Langevin sampling
over batched, memory-mapped data."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateKernelError,
    DivergenceError,
    DomainError,
    MissingIndexError,
    SbiosError,
    SchemaError,
)

__version__ = "0.1.0"
