"""Explicit model-predictive controllers learned through a policy-informed
diffusion-map ("control manifold") parametrization."""

__version__ = "0.1.0"
