"""vtprune - differentiable visual token pruning with a toy VLA testbed."""

__version__ = "0.1.0"
