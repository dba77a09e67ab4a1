"""Numerical study of the small-h expansion of entropic transport costs.

Modules: ``density_grid`` (grid densities and entropies), ``costs`` (convex
costs and Lambda_h), ``exact`` (transport simplex with duals and divergence
Hessians), ``entropic`` (log-domain Sinkhorn and gap sweeps), ``bridge``
(tilted kernels), ``dirichlet`` (simplex transport) and ``cli``.
"""

__version__ = "0.1.0"
