"""Ternary (1.58-bit) quantization joined with dynamic N:M sparsity, desk scale.

Kept import-light on purpose: worker processes set their BLAS thread
limits before any numpy-importing submodule loads. Import the submodules
directly (``bitnm.training``, ``bitnm.packed``, ...).
"""

__version__ = "0.1.0"
