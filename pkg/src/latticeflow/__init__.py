"""Lattice Boltzmann flow solving plus a learned compressed-state surrogate.

Submodules (import directly; this package root stays import-light so the
CLI can pin BLAS thread counts before numpy loads):

    lbm        -- D2Q9 solver, boundary handling, physics metrics
    snapshot   -- "LBLT" binary container for lattice grids and masks
    scenes     -- random obstacle scenes and solver-generated datasets
    autodiff   -- dense tensors with reverse-mode differentiation
    nn         -- conv/residual layers, parameters, Adam
    surrogate  -- encoder, boundary gates, latent dynamics, decoder
    checkpoint -- "LNCK" parameter checkpoint files
    training   -- unrolled training loop and rollout evaluation
    cli        -- command line entry point
"""

__version__ = "0.1.0"
