"""Conditional flow priors for sequence VAEs: models, baselines, metrics, CLI."""

__version__ = "0.1.0"
