"""redbert: a from-scratch retail-domain language model pipeline.

A small transformer encoder with reverse-mode autodiff on NumPy arrays,
WordPiece tokenization, MLM+NSP pretraining on synthetic retail text,
optional dependency-embedding injection, five downstream task heads,
a training harness, and embedding-drift analysis tooling.
"""

__version__ = "0.1.0"
