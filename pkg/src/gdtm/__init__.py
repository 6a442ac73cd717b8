"""Dynamic topic models with Gaussian-process priors, fitted by sparse natural-gradient SVI."""

__version__ = "0.1.0"
