"""Masked-autoencoder features and a residual ConvTrans classifier, on numpy."""

from .autodiff import Tensor, backward, gradcheck
from .convtrans import ConvTransConfig, ConvTransModel
from .mae import MAEConfig, MAEModel

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "gradcheck", "ConvTransConfig", "ConvTransModel", "MAEConfig", "MAEModel"]
