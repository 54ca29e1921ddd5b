"""Symmetric uniform quantizers and Gaussian-optimal step sizes.

The integer grid for b bits is the two's-complement range
[-2^(b-1), 2^(b-1) - 1].  Step sizes are calibrated once per bit-width by
minimizing the expected squared error of a standard normal input; see
``calibrate_delta``.  Bit-width 32 means pass-through everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .errors import InvalidBitsError, InvalidDimensionError
from .linalg import as_matrix, as_vector, matvec_t

QUANT_BITS = (2, 3, 4, 5, 6, 7, 8)
PASSTHROUGH_BITS = 32
QUAD_TAIL = 8.0
QUAD_MIN_NODES = 2048
_GOLDEN_LO = 1e-4
_GOLDEN_HI = 4.0
_GOLDEN_TOL = 1e-9
_CONST_ROW_RTOL = 1e-12


@dataclass(frozen=True)
class QuantizerSpec:
    """One quantizer: bit-width, step size, and the integer clamp range."""

    bits: int
    delta: float
    qmin: int
    qmax: int

    @classmethod
    def create(cls, bits: int, delta: float) -> "QuantizerSpec":
        if bits not in QUANT_BITS:
            raise InvalidBitsError(f"bits must be one of {QUANT_BITS}, got {bits}")
        if not (delta > 0.0) or not np.isfinite(delta):
            raise InvalidBitsError(f"delta must be positive and finite, got {delta}")
        return cls(
            bits=int(bits),
            delta=float(delta),
            qmin=-(1 << (bits - 1)),
            qmax=(1 << (bits - 1)) - 1,
        )


def round_half_away(y):
    """Round to nearest integer, halves away from zero (unlike banker's rounding)."""
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def quantize_uniform(x, spec: QuantizerSpec):
    """Quantize elementwise onto ``spec``'s grid: clamp(round(x / delta)) * delta.

    Accepts any array shape.  Bit-width 32 returns the input unchanged
    (as a float64 copy).
    """
    arr = np.asarray(x, dtype=np.float64)
    if spec.bits == PASSTHROUGH_BITS:
        return arr.copy()
    q = np.clip(round_half_away(arr / spec.delta), spec.qmin, spec.qmax)
    return q * spec.delta


def _mse_quadrature(delta: float, bits: int) -> float:
    """E[(x - Q(x))^2] for x ~ N(0,1), by composite Gauss-Legendre on [-8, 8].

    The integrand has kinks where the quantizer switches cells, at
    (l + 1/2) * delta for integer l.  Panels are aligned to those cell
    boundaries (then subdivided until there are at least QUAD_MIN_NODES
    nodes total), so each panel integrates a smooth function and the MSE
    is a smooth, unimodal function of delta.  A fixed uniform panel grid
    would instead produce spurious local minima as boundaries drift
    across panel edges.
    """
    qmin = -(1 << (bits - 1))
    qmax = (1 << (bits - 1)) - 1
    bounds = (np.arange(qmin, qmax, dtype=np.float64) + 0.5) * delta
    edges = np.unique(
        np.concatenate(
            [[-QUAD_TAIL], bounds[(bounds > -QUAD_TAIL) & (bounds < QUAD_TAIL)], [QUAD_TAIL]]
        )
    )
    order = 8
    panels = edges.shape[0] - 1
    # subdivide every panel evenly until order * total panels >= QUAD_MIN_NODES
    per = int(np.ceil(QUAD_MIN_NODES / (order * panels)))
    if per > 1:
        pieces = [
            np.linspace(edges[i], edges[i + 1], per + 1)[:-1] for i in range(panels)
        ]
        edges = np.concatenate(pieces + [[QUAD_TAIL]])
    nodes, weights = np.polynomial.legendre.leggauss(order)
    lo = edges[:-1][:, None]
    hi = edges[1:][:, None]
    half = 0.5 * (hi - lo)
    x = 0.5 * (hi + lo) + half * nodes[None, :]
    q = np.clip(round_half_away(x / delta), qmin, qmax) * delta
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    vals = (x - q) ** 2 * pdf
    return float(np.sum(vals * weights[None, :] * half))


def calibrate_delta(bits: int) -> float:
    """Optimal step size for a standard normal input at the given bit-width.

    Golden-section search over (0, 4] on the quadrature MSE.  The search is
    deterministic (fixed bracket, fixed tolerance), so repeated calls agree
    bit for bit.
    """
    if bits not in QUANT_BITS:
        raise InvalidBitsError(f"bits must be one of {QUANT_BITS}, got {bits}")
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    lo, hi = _GOLDEN_LO, _GOLDEN_HI
    c = hi - inv_phi * (hi - lo)
    d = lo + inv_phi * (hi - lo)
    fc = _mse_quadrature(c, bits)
    fd = _mse_quadrature(d, bits)
    while hi - lo > _GOLDEN_TOL:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = _mse_quadrature(c, bits)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_phi * (hi - lo)
            fd = _mse_quadrature(d, bits)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class DeltaTable:
    """Calibrated step size per bit-width, JSON round-trippable."""

    deltas: Mapping[int, float]

    def delta(self, bits: int) -> float:
        if bits not in self.deltas:
            raise InvalidBitsError(f"no calibrated delta for {bits} bits")
        return self.deltas[bits]

    def spec(self, bits: int) -> QuantizerSpec:
        return QuantizerSpec.create(bits, self.delta(bits))

    def key(self) -> tuple:
        return tuple(sorted(self.deltas.items()))

    def to_json(self) -> str:
        return json.dumps({str(b): self.deltas[b] for b in sorted(self.deltas)})

    @classmethod
    def from_json(cls, text: str) -> "DeltaTable":
        raw = json.loads(text)
        deltas = {}
        for k, v in raw.items():
            b = int(k)
            if b not in QUANT_BITS:
                raise InvalidBitsError(f"unsupported bit-width in table: {k}")
            if not (float(v) > 0.0):
                raise InvalidBitsError(f"non-positive delta for {k} bits")
            deltas[b] = float(v)
        return cls(deltas=deltas)


@lru_cache(maxsize=1)
def default_delta_table() -> DeltaTable:
    """Calibrate all supported bit-widths once and cache the table."""
    return DeltaTable(deltas={b: calibrate_delta(b) for b in QUANT_BITS})


def quantize_activation(x, bits: int, h, table: DeltaTable | None = None):
    """Rotate an activation vector into the Hadamard domain and quantize it.

    Computes y = H^T x, then sigma * Q(y / sigma) with the per-token scale
    sigma = RMS(y).  Bit-width 32 skips quantization (rotation only); an
    all-zero vector quantizes to zeros.
    """
    h = as_matrix(h)
    x = as_vector(x)
    if x.shape[0] != h.shape[0]:
        raise InvalidDimensionError(
            f"vector length {x.shape[0]} does not match Hadamard order {h.shape[0]}"
        )
    y = matvec_t(h, x)
    if bits == PASSTHROUGH_BITS:
        return y
    if table is None:
        table = default_delta_table()
    sigma = np.sqrt(np.mean(y * y))
    if sigma == 0.0:
        return np.zeros_like(y)
    return sigma * quantize_uniform(y / sigma, table.spec(bits))


def quantize_rotated_batch(y, bits: int, table: DeltaTable | None = None):
    """Per-row dynamic quantization of already-rotated activations.

    ``y`` has one token per row.  Row scales are RMS values; zero rows stay
    zero.  Row i of the result is bit-identical to the vector path in
    ``quantize_activation`` applied to that token.
    """
    y = as_matrix(y)
    if bits == PASSTHROUGH_BITS:
        return y.copy()
    if table is None:
        table = default_delta_table()
    sigma = np.sqrt(np.mean(y * y, axis=1))
    safe = np.where(sigma == 0.0, 1.0, sigma)
    out = safe[:, None] * quantize_uniform(y / safe[:, None], table.spec(bits))
    out[sigma == 0.0] = 0.0
    return out


def quantize_weight_channelwise(w, bits: int, table: DeltaTable | None = None):
    """Quantize a weight matrix row by row with per-row scales.

    Each output row c uses sigma_c = population std of that row; rows that
    are constant to within relative tolerance 1e-12 fall back to the
    absolute row value as the scale (zero rows quantize to zeros).
    Bit-width 32 copies the input through.
    """
    w = as_matrix(w)
    if bits == PASSTHROUGH_BITS:
        return w.copy()
    if table is None:
        table = default_delta_table()
    spec = table.spec(bits)
    if w.size == 0:
        return w.copy()
    sigma = np.std(w, axis=1)
    peak = np.max(np.abs(w), axis=1)
    constant = sigma <= _CONST_ROW_RTOL * peak
    scale = np.where(constant, peak, sigma)
    safe = np.where(scale == 0.0, 1.0, scale)
    out = safe[:, None] * quantize_uniform(w / safe[:, None], spec)
    out[scale == 0.0] = 0.0
    return out
