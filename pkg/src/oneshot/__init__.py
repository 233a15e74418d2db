"""One-shot plastic-resin classification with siamese and triplet networks on a numpy autodiff engine."""

__version__ = "0.1.0"
