"""tilted: transform-invariant latent decompositions for hybrid fields."""

__version__ = "0.1.0"
