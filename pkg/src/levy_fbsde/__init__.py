"""Monte Carlo laboratory for Lévy-driven path-dependent FBSDEs."""

__version__ = "0.1.0"
