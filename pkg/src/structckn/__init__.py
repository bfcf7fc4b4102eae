"""Convolutional kernel networks with a structured CRF layer, and a
desk-scale crew-pairing pipeline built on the resulting predictor."""

__version__ = "0.1.0"

from . import (ad3, ckn, cli, crew, graph, inference, ocr, optim, scaling,
               setpart, simplex, trainer)

__all__ = ["ad3", "ckn", "cli", "crew", "graph", "inference", "ocr", "optim",
           "scaling", "setpart", "simplex", "trainer", "__version__"]
