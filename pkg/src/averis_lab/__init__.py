"""Mean-bias analysis of activation matrices and mean-residual FP4 GeMM emulation."""

from .averis import backward, backward_vanilla, forward, forward_vanilla, split
from .decomposition import attribute_outliers, decompose, mean_diagnostics, r_ratio
from .linalg import ContractError, truncated_svd
from .quantizer import IDENTITY, QuantConfig, dequantize, fake_quantize, quantize
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "IDENTITY",
    "QuantConfig",
    "attribute_outliers",
    "backward",
    "backward_vanilla",
    "decompose",
    "dequantize",
    "fake_quantize",
    "forward",
    "forward_vanilla",
    "mean_diagnostics",
    "quantize",
    "r_ratio",
    "read_tensor",
    "split",
    "truncated_svd",
    "write_tensor",
]
