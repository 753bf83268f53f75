"""BioNIC: connectome-constrained emotion classifier."""

__version__ = "0.1.0"
