"""Peptide-protein interaction prediction, binding-site localisation and
target-conditioned peptide generation on a small numpy autograd engine."""

__version__ = "0.1.0"
