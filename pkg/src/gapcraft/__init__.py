"""Cross-modal transfer calculus on small, exactly checkable instances.

The package splits into solver layers (``numgrad``, ``transport``,
``distortion``, ``lipschitz``), the bound calculus (``bound``), synthetic
task generation (``synthtasks``), the two-stage training pipeline
(``pipeline``), and an operator CLI (``cli``).
"""

__version__ = "0.1.0"
