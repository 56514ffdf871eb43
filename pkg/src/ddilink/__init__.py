"""Context-aware variational graph autoencoder for drug-drug interaction
link prediction, built on a minimal reverse-mode autodiff engine."""

__version__ = "0.1.0"
