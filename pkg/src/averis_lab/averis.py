"""Mean-residual quantized GeMM.

Activations ``X`` (l x m) and output gradients ``D`` (l x n) are split into a
column-mean vector and a zero-mean residual. The two parts are quantized
independently, and the products are rebuilt from a dense residual GeMM plus
rank-one broadcast terms:

    Y      = 1 (mu_X W) + X_R W
    dL/dX  = 1 (mu_D W^T) + D_R W^T
    dL/dW  = X_R^T D_R + X_R^T (1 mu_D) + (1 mu_X)^T D_R + (1 mu_X)^T (1 mu_D)

The rank-one terms go through vector products and outer products, so the
l x m mean matrix is never formed. All accumulation is float64.

Each quantized operand draws stochastic-rounding noise from its own stream
``(*stream, tag)``; forward and backward use the same tags for ``X_R``,
``mu_X`` and ``W``, so the backward pass sees exactly the operands the
forward pass used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ContractError, as_matrix
from .quantizer import IDENTITY, QuantConfig, fake_quantize, fake_quantize_vector
from .rng import make_rng

# Per-operand stream tags.
_W, _XR, _MUX, _DR, _MUD, _X, _D = range(7)


@dataclass
class MeanResidualSplit:
    mean: np.ndarray
    residual: np.ndarray

    @property
    def source_shape(self) -> tuple:
        return self.residual.shape

    def reconstruct(self) -> np.ndarray:
        return self.residual + self.mean


def split(x) -> MeanResidualSplit:
    x = as_matrix(x, "x")
    mu = x.mean(axis=0)
    return MeanResidualSplit(mean=mu, residual=x - mu)


def _check_gemm(x, w):
    if x.shape[1] != w.shape[0]:
        raise ContractError(f"x is {x.shape} but w is {w.shape}")


def _check_backward(x, w, d):
    _check_gemm(x, w)
    if d.shape != (x.shape[0], w.shape[1]):
        raise ContractError(f"d is {d.shape}, expected {(x.shape[0], w.shape[1])}")


@dataclass
class QuantizedOperands:
    """Dequantized operands of one mean-residual GeMM."""

    mean: np.ndarray
    residual: np.ndarray
    weight: np.ndarray


def quantize_operands(x, w, cfg: QuantConfig = IDENTITY, stream: tuple = ()) -> QuantizedOperands:
    s = split(x)
    return QuantizedOperands(
        mean=fake_quantize_vector(s.mean, cfg, (*stream, _MUX)),
        residual=fake_quantize(s.residual, cfg, (*stream, _XR)),
        weight=fake_quantize(w, cfg, (*stream, _W)),
    )


def forward(x, w, cfg: QuantConfig = IDENTITY, stream: tuple = (), return_operands: bool = False):
    """``1 (mu_X W) + X_R W`` on quantized operands.

    With ``return_operands`` the quantized operands come back too, so a later
    :func:`backward` can reuse them instead of quantizing again.
    """
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    _check_gemm(x, w)
    ops = quantize_operands(x, w, cfg, stream)
    y = (ops.mean @ ops.weight) + ops.residual @ ops.weight
    return (y, ops) if return_operands else y


def forward_vanilla(x, w, cfg: QuantConfig = IDENTITY, stream: tuple = (), return_operands: bool = False):
    """``Q(X) Q(W)`` with no splitting; the baseline."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    _check_gemm(x, w)
    xq = fake_quantize(x, cfg, (*stream, _X))
    wq = fake_quantize(w, cfg, (*stream, _W))
    y = xq @ wq
    return (y, (xq, wq)) if return_operands else y


@dataclass
class AverisGrads:
    grad_input: np.ndarray
    grad_weight: np.ndarray
    term_breakdown: tuple  # the four weight-gradient addends, in order


def backward(
    x,
    w,
    d,
    cfg: QuantConfig = IDENTITY,
    stream: tuple = (),
    grad_cfg: QuantConfig | None = None,
    operands: QuantizedOperands | None = None,
) -> AverisGrads:
    """Gradients of ``L`` w.r.t. ``x`` and ``w`` given ``d = dL/dY``.

    ``grad_cfg`` overrides the quantizer used for the gradient operands
    (``mu_D`` and ``D_R``); by default they use ``cfg`` like everything else.
    ``operands`` are the forward pass's quantized operands; when omitted they
    are recomputed from the same streams, which gives identical values.
    """
    gcfg = cfg if grad_cfg is None else grad_cfg
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    d = as_matrix(d, "d")
    _check_backward(x, w, d)
    l = x.shape[0]

    ops = operands if operands is not None else quantize_operands(x, w, cfg, stream)
    ds = split(d)
    mu_d = fake_quantize_vector(ds.mean, gcfg, (*stream, _MUD))
    d_r = fake_quantize(ds.residual, gcfg, (*stream, _DR))

    grad_input = (mu_d @ ops.weight.T) + d_r @ ops.weight.T

    t1 = ops.residual.T @ d_r
    t2 = np.outer(ops.residual.sum(axis=0), mu_d)
    t3 = np.outer(ops.mean, d_r.sum(axis=0))
    t4 = l * np.outer(ops.mean, mu_d)
    grad_weight = ((t1 + t2) + t3) + t4
    return AverisGrads(grad_input=grad_input, grad_weight=grad_weight, term_breakdown=(t1, t2, t3, t4))


def backward_vanilla(
    x,
    w,
    d,
    cfg: QuantConfig = IDENTITY,
    stream: tuple = (),
    grad_cfg: QuantConfig | None = None,
    operands: tuple | None = None,
) -> AverisGrads:
    gcfg = cfg if grad_cfg is None else grad_cfg
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    d = as_matrix(d, "d")
    _check_backward(x, w, d)
    if operands is not None:
        xq, wq = operands
    else:
        xq = fake_quantize(x, cfg, (*stream, _X))
        wq = fake_quantize(w, cfg, (*stream, _W))
    dq = fake_quantize(d, gcfg, (*stream, _D))
    gw = xq.T @ dq
    return AverisGrads(grad_input=dq @ wq.T, grad_weight=gw, term_breakdown=(gw,))


# ---------------------------------------------------------------- error comparison


def mean_dominated_inputs(l: int = 1024, m: int = 256, n: int = 256, mean_std: float = 5.0,
                          sigma: float = 1.0, seed: int = 0):
    """``X = 1 mu^T + sigma Z`` with ``mu_j ~ N(0, mean_std^2)`` and ``W ~ N(0, 1/m)``."""
    rng = make_rng(seed, 0xE7)
    mu = rng.normal(0.0, mean_std, size=m) if mean_std > 0 else np.zeros(m)
    x = mu + sigma * rng.standard_normal((l, m))
    w = rng.standard_normal((m, n)) / np.sqrt(m)
    return x, w


def forward_errors(x, w, cfg: QuantConfig, stream: tuple = ()) -> dict:
    """Relative Frobenius output error of both GeMM paths against the exact ``X W``."""
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    exact = x @ w
    ref = np.linalg.norm(exact)
    if ref == 0.0:
        raise ContractError("x @ w is zero; relative error undefined")
    e_avr = float(np.linalg.norm(forward(x, w, cfg, stream) - exact) / ref)
    e_van = float(np.linalg.norm(forward_vanilla(x, w, cfg, stream) - exact) / ref)
    return {
        "averis_error": e_avr,
        "vanilla_error": e_van,
        "improvement": e_van / e_avr if e_avr > 0 else float("inf"),
    }
