"""Weak Galerkin finite elements with a hybridized domain-decomposition solver."""
from .assembly import assemble, solve
from .ddsolver import (
    StopRule,
    build_subdomain_systems,
    default_beta,
    energy_diagnostics,
    initial_state,
    iterate_once,
    run,
    solve_hybrid_direct,
)
from .errors import energy_error, l2_error
from .mesh import (
    Mesh,
    SubdomainPartition,
    build_uniform_triangle_mesh,
    load_mesh,
    partition_grid,
    partition_per_element,
    refine_uniform,
)
from .problems import get_problem
from .wgcore import Discretization, ElementFamily, WeakFunction

__version__ = "0.1.0"
