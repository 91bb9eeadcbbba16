"""Blockwise FP4 (E2M1) quantization emulated in float64.

Each block of ``block_size`` consecutive elements shares one scale
``amax / 6`` so the block's largest magnitude lands on the top E2M1 code.
Elements are then rounded onto the signed grid ``±{0, .5, 1, 1.5, 2, 3, 4, 6}``
either to nearest (ties to the even grid index) or stochastically.

Codes are stored one per ``uint8``: bit 3 is the sign, bits 0-2 index
:data:`E2M1_GRID`. Nothing is bit-packed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import as_matrix
from .rng import make_rng

E2M1_GRID = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
E2M1_MAX = 6.0
SIGN_BIT = 8

ROUNDING_MODES = ("nearest", "stochastic")
SCALE_MODES = ("real", "e4m3")
LAYOUTS = ("row", "column")
FORMATS = ("e2m1", "identity")

_GAPS = np.diff(E2M1_GRID)


@dataclass(frozen=True)
class QuantConfig:
    block_size: int = 16
    rounding: str = "stochastic"
    scale_mode: str = "real"
    layout: str = "row"
    seed: int = 0
    format: str = "e2m1"

    def __post_init__(self):
        if int(self.block_size) < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        for value, allowed, field in (
            (self.rounding, ROUNDING_MODES, "rounding"),
            (self.scale_mode, SCALE_MODES, "scale_mode"),
            (self.layout, LAYOUTS, "layout"),
            (self.format, FORMATS, "format"),
        ):
            if value not in allowed:
                raise ValueError(f"{field} must be one of {allowed}, got {value!r}")

    @property
    def is_identity(self) -> bool:
        return self.format == "identity"

    def with_(self, **kw) -> "QuantConfig":
        return replace(self, **kw)


IDENTITY = QuantConfig(format="identity")


@dataclass(frozen=True)
class QuantizedTensor:
    shape: tuple
    codes: np.ndarray  # uint8, same shape as the source
    scales: np.ndarray  # float64, one per block
    config: QuantConfig

    @property
    def n_blocks(self) -> int:
        return int(self.scales.shape[0])


def _e4m3_round(v: np.ndarray) -> np.ndarray:
    """Round positive values to the nearest E4M3 number (bias 7, max 448)."""
    v = np.minimum(v, 448.0)
    exp = np.floor(np.log2(np.maximum(v, 2.0**-9)))
    exp = np.maximum(exp, -6.0)  # subnormal range shares the 2**-6 exponent
    step = 2.0 ** (exp - 3)
    out = np.round(v / step) * step
    # Never let a scale collapse to zero; the smallest subnormal is 2**-9.
    return np.clip(out, 2.0**-9, 448.0)


def _to_blocks(x: np.ndarray, cfg: QuantConfig) -> tuple[np.ndarray, int]:
    """View ``x`` as (n_blocks, block_size) in the configured layout, zero-padded."""
    flat = (x.T if cfg.layout == "column" else x).reshape(-1)
    bs = cfg.block_size
    n_blocks = -(-flat.size // bs)
    pad = n_blocks * bs - flat.size
    if pad:
        # Padded lanes are zero, so they never raise a block's amax.
        flat = np.concatenate([flat, np.zeros(pad)])
    return flat.reshape(n_blocks, bs), pad


def _from_blocks(blocks: np.ndarray, pad: int, shape: tuple, cfg: QuantConfig) -> np.ndarray:
    flat = blocks.reshape(-1)
    if pad:
        flat = flat[:-pad]
    if cfg.layout == "column":
        return flat.reshape(shape[1], shape[0]).T.copy()
    return flat.reshape(shape)


def _grid_step(mag: np.ndarray) -> np.ndarray:
    # E2M1 spacing: 0.5 on [0, 2), 1 on [2, 4), 2 on [4, 6].
    return 0.5 + 0.5 * (mag >= 2.0) + (mag >= 4.0)


def _row_max(a: np.ndarray) -> np.ndarray:
    # Pairwise halving beats a strided reduction over short rows.
    while a.shape[1] > 1 and a.shape[1] % 2 == 0:
        h = a.shape[1] // 2
        a = np.maximum(a[:, :h], a[:, h:])
    return a.max(axis=1)


def _round_nearest(mag: np.ndarray) -> np.ndarray:
    step = _grid_step(mag)
    # np.round is half-to-even on mag/step; within each spacing region an even
    # multiple of the step is exactly an even grid index.
    return np.minimum(np.round(mag / step) * step, E2M1_MAX)


def _round_stochastic(mag: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # floor(y + u) with u ~ U[0, 1) is floor(y) + 1 with probability frac(y),
    # so the expectation is exactly mag.
    step = _grid_step(mag)
    y = np.divide(mag, step)
    y += rng.random(mag.shape)
    np.floor(y, out=y)
    y *= step
    return np.minimum(y, E2M1_MAX, out=y)


def _grid_index(vals: np.ndarray) -> np.ndarray:
    return np.where(vals < 2.0, 2.0 * vals, np.where(vals < 4.0, vals + 2.0, 0.5 * vals + 4.0)).astype(np.uint8)


def _quantize_core(x: np.ndarray, cfg: QuantConfig, stream: tuple):
    """Return (unsigned grid values, signed source blocks, scales, pad) in block layout."""
    blocks, pad = _to_blocks(x, cfg)
    mag = np.abs(blocks)
    amax = _row_max(mag)
    scales = amax / E2M1_MAX
    if cfg.scale_mode == "e4m3":
        scales = _e4m3_round(scales)
    scales[amax == 0] = 1.0

    mag /= scales[:, None]
    np.minimum(mag, E2M1_MAX, out=mag)
    if cfg.rounding == "nearest":
        vals = _round_nearest(mag)
    else:
        vals = _round_stochastic(mag, make_rng(cfg.seed, 0xF4, *stream))
    return vals, blocks, scales, pad


def quantize(x, cfg: QuantConfig = QuantConfig(), stream: tuple = ()) -> QuantizedTensor:
    """Quantize a matrix to blockwise E2M1.

    ``stream`` extends ``cfg.seed`` to key the stochastic-rounding generator,
    so distinct tensors in one computation can draw independent noise while
    staying reproducible.
    """
    if cfg.is_identity:
        raise ValueError("quantize: the identity format has no code representation")
    x = as_matrix(x, "x")
    vals, blocks, scales, pad = _quantize_core(x, cfg, stream)
    idx = _grid_index(vals)
    codes = idx | (((blocks < 0) & (idx > 0)).astype(np.uint8) * SIGN_BIT)
    codes = _from_blocks(codes, pad, x.shape, cfg).astype(np.uint8)
    return QuantizedTensor(shape=x.shape, codes=codes, scales=scales, config=cfg)


def decode(codes: np.ndarray) -> np.ndarray:
    """Map uint8 codes to signed grid values (unscaled)."""
    codes = np.asarray(codes, dtype=np.uint8)
    vals = E2M1_GRID[codes & 0x7]
    return np.where(codes & SIGN_BIT, -vals, vals)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    cfg = q.config
    vals, pad = _to_blocks(decode(q.codes), cfg)
    return _from_blocks(vals * q.scales[:, None], pad, q.shape, cfg)


def quantize_vector(v, cfg: QuantConfig = QuantConfig(), stream: tuple = ()) -> QuantizedTensor:
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    # A single row has no column structure worth blocking over.
    return quantize(v, cfg.with_(layout="row"), stream)


def fake_quantize(x, cfg: QuantConfig = QuantConfig(), stream: tuple = ()) -> np.ndarray:
    """Quantize then dequantize; the identity format returns a float64 copy."""
    x = as_matrix(x, "x")
    if cfg.is_identity:
        return x.copy()
    vals, blocks, scales, pad = _quantize_core(x, cfg, stream)
    # Same product as dequantize(quantize(x)): signed grid value times block scale.
    # Adding +0.0 turns the -0.0 of negative entries that rounded to zero into +0.0.
    out = np.copysign(vals, blocks, out=vals)
    out *= scales[:, None]
    out += 0.0
    return _from_blocks(out, pad, x.shape, cfg)


def fake_quantize_vector(v, cfg: QuantConfig = QuantConfig(), stream: tuple = ()) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if cfg.is_identity:
        return v.copy()
    return fake_quantize(v.reshape(1, -1), cfg.with_(layout="row"), stream).reshape(-1)


def quantization_error(x, cfg: QuantConfig = QuantConfig(), stream: tuple = ()) -> float:
    """Relative Frobenius error of a quantize/dequantize round trip (0 for a zero matrix)."""
    x = as_matrix(x, "x")
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(fake_quantize(x, cfg, stream) - x) / norm)


def grid_gap_at(mag: np.ndarray) -> np.ndarray:
    """Width of the E2M1 grid interval containing each (unscaled) magnitude."""
    lo = np.clip(np.searchsorted(E2M1_GRID, mag, side="right") - 1, 0, len(_GAPS) - 1)
    return _GAPS[lo]
