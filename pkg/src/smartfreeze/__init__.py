"""SmartFreeze-style federated learning simulator: progressive block-wise
training with safe layer freezing, analytic cost models, and
heterogeneity-aware client selection."""

__version__ = "0.1.0"
