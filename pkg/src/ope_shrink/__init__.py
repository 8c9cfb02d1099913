"""Off-policy evaluation with importance-weight shrinkage."""
__version__ = "0.1.0"
