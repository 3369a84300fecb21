"""Retrieval-augmented reaction prediction: SMILES-to-text retriever and text-augmented predictor."""

__version__ = "0.1.0"
