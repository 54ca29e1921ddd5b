"""Seeded synthetic linear-chain network and its quantized forward passes.

The model is a stack of dense layers with a leaky rectifier (slope 0.1)
between them, standing in for a transformer backbone at desk scale.  All
randomness flows through one documented counter-based generator so every
artifact is a pure function of its seed:

    gen(seed, index) = mix(seed + (index + 1) * 0x9E3779B97F4A7C15)  mod 2^64

where mix is the splitmix64 finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

(all arithmetic modulo 2^64).  Uniform doubles take the top 53 bits:
u = (gen(...) >> 11) * 2^-53, giving u in [0, 1).  Gaussians come from
Box-Muller on consecutive uniform pairs (u1, u2):

    r = sqrt(-2 ln(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)

emitted in (z0, z1) order.  Substreams are indexed as
gen(seed, (tag << 32) | i) with documented tags, so any language can
reproduce the exact streams from the integers alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Mapping

import numpy as np

from .branches import (
    QuantizedLinear,
    assemble_layer,
    branch_decomposition,
    forward_quantized_batch,
)
from .errors import InvalidBitsError, InvalidDimensionError
from .linalg import as_matrix, as_vector, hadamard
from .quantizer import PASSTHROUGH_BITS, DeltaTable, default_delta_table

LEAKY_SLOPE = 0.1
ALLOWED_BITS = (2, 3, 4, 5, 6, 7, 8, PASSTHROUGH_BITS)

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# substream tags (see module docstring)
TAG_WEIGHT = 1
TAG_OUTLIER = 2
TAG_CALIB = 3
TAG_DERIVE = 4


def gen(seed: int, index: int) -> int:
    """The counter-based generator: value of stream ``seed`` at ``index``."""
    z = (int(seed) + (int(index) + 1) * _GAMMA) & _MASK
    z ^= z >> 30
    z = (z * _MIX1) & _MASK
    z ^= z >> 27
    z = (z * _MIX2) & _MASK
    z ^= z >> 31
    return z


def _gen_block(seed: int, count: int) -> np.ndarray:
    """Vectorized gen(seed, 0..count-1); bit-identical to the scalar form."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK) + idx * np.uint64(_GAMMA)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def substream(seed: int, tag: int, i: int) -> int:
    """Derived stream seed: gen(seed, (tag << 32) | i)."""
    return gen(seed, (tag << 32) | i)


def uniform_stream(seed: int, count: int) -> np.ndarray:
    """``count`` uniforms in [0, 1) from stream ``seed``."""
    return (_gen_block(seed, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def gaussian_stream(seed: int, count: int) -> np.ndarray:
    """``count`` standard normals from stream ``seed`` (Box-Muller pairs)."""
    pairs = (count + 1) // 2
    u = uniform_stream(seed, 2 * pairs)
    r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


def _power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ModelSpec:
    """Blueprint for a synthetic chain: sizes, seed, and outlier structure."""

    n_layers: int
    dims: tuple
    seed: int
    outlier_fraction: float = 0.0
    outlier_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not (1 <= self.n_layers <= 128):
            raise InvalidDimensionError(f"n_layers must be in [1, 128], got {self.n_layers}")
        if len(self.dims) != self.n_layers + 1:
            raise InvalidDimensionError(
                f"dims must have n_layers+1={self.n_layers + 1} entries, got {len(self.dims)}"
            )
        for d in self.dims:
            if not _power_of_two(d) or not (8 <= d <= 1024):
                raise InvalidDimensionError(
                    f"dims must be powers of two in [8, 1024], got {d}"
                )
        if not (0 <= int(self.seed) <= _MASK):
            raise InvalidDimensionError("seed must fit in 64 bits")
        if not (0.0 <= self.outlier_fraction <= 1.0):
            raise InvalidDimensionError("outlier_fraction must be in [0, 1]")
        if not (self.outlier_scale >= 1.0):
            raise InvalidDimensionError("outlier_scale must be >= 1")

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_layers": self.n_layers,
                "dims": list(self.dims),
                "seed": self.seed,
                "outlier_fraction": self.outlier_fraction,
                "outlier_scale": self.outlier_scale,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        raw = json.loads(text)
        return cls(
            n_layers=int(raw["n_layers"]),
            dims=tuple(raw["dims"]),
            seed=int(raw["seed"]),
            outlier_fraction=float(raw.get("outlier_fraction", 0.0)),
            outlier_scale=float(raw.get("outlier_scale", 1.0)),
        )


@dataclass
class ToyModel:
    spec: ModelSpec
    weights: list
    _layer_cache: dict = field(default_factory=dict, repr=False, compare=False)
    _branch_cache: dict = field(default_factory=dict, repr=False, compare=False)
    _mse_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_layers(self) -> int:
        return self.spec.n_layers

    @property
    def dims(self) -> tuple:
        return self.spec.dims

    @property
    def flops(self) -> tuple:
        d = self.spec.dims
        return tuple(2 * d[i + 1] * d[i] for i in range(self.spec.n_layers))


def gen_model(spec: ModelSpec) -> ToyModel:
    """Materialize the weights: N(0, 1/fan_in) entries with scaled outliers.

    Layer i uses substream (TAG_WEIGHT, i) for the Gaussian entries and
    (TAG_OUTLIER, i) for the outlier mask; a fraction of entries is
    multiplied by outlier_scale.
    """
    weights = []
    for i in range(spec.n_layers):
        n_in, n_out = spec.dims[i], spec.dims[i + 1]
        vals = gaussian_stream(substream(spec.seed, TAG_WEIGHT, i), n_out * n_in)
        w = vals.reshape(n_out, n_in) / np.sqrt(n_in)
        if spec.outlier_fraction > 0.0:
            u = uniform_stream(substream(spec.seed, TAG_OUTLIER, i), n_out * n_in)
            mask = u.reshape(n_out, n_in) < spec.outlier_fraction
            w = np.where(mask, w * spec.outlier_scale, w)
        weights.append(w)
    return ToyModel(spec=spec, weights=weights)


@dataclass(frozen=True)
class CalibrationSet:
    """Inputs plus their exact full-precision outputs; immutable after build."""

    inputs: tuple
    fp_outputs: tuple
    seed: int

    def key(self) -> tuple:
        return (self.seed, len(self.inputs))

    @cached_property
    def input_matrix(self) -> np.ndarray:
        return np.stack(self.inputs, axis=0)

    @cached_property
    def output_matrix(self) -> np.ndarray:
        return np.stack(self.fp_outputs, axis=0)


@dataclass(frozen=True)
class QuantContext:
    """Quantization-pipeline parameters shared by every layer.

    Requested branch ranks are scaled per layer when scale_ranks is on:
    r_lrb capped at N/4 and r_gmb at N/16 (floor 1, N = min layer dim), so
    small toy layers keep proportionate branches.  fp32_dense controls
    whether 32-bit layers take the exact dense path (default) or run
    through the rotation machinery like any other width.
    """

    deltas: DeltaTable = field(default_factory=default_delta_table)
    r_lrb: int = 16
    r_gmb: int = 4
    use_gmb: bool = True
    gmb_order: str = "lrb_first"
    gmb_placement: str = "post"
    fp32_dense: bool = True
    scale_ranks: bool = True

    def cache_key(self) -> tuple:
        return (
            self.deltas.key(),
            self.r_lrb,
            self.r_gmb,
            self.use_gmb,
            self.gmb_order,
            self.gmb_placement,
            self.scale_ranks,
        )


@lru_cache(maxsize=1)
def default_context() -> QuantContext:
    return QuantContext()


def _effective_ranks(ctx: QuantContext, n_out: int, n_in: int) -> tuple[int, int]:
    n = min(n_out, n_in)
    if ctx.scale_ranks:
        r_l = min(ctx.r_lrb, max(1, n // 4)) if ctx.r_lrb > 0 else 0
        r_g = min(ctx.r_gmb, max(1, n // 16)) if ctx.r_gmb > 0 else 0
    else:
        r_l = min(ctx.r_lrb, n)
        r_g = ctx.r_gmb
    return r_l, r_g


def _layer_for(model: ToyModel, i: int, bits: int, ctx: QuantContext) -> QuantizedLinear:
    key = (i, bits, ctx.cache_key())
    layer = model._layer_cache.get(key)
    if layer is None:
        w = model.weights[i]
        r_l, r_g = _effective_ranks(ctx, w.shape[0], w.shape[1])
        # the branch fit is bit-independent; share it across bit-widths
        bkey = (i, r_l, r_g, ctx.use_gmb, ctx.gmb_order, ctx.gmb_placement)
        decomp = model._branch_cache.get(bkey)
        if decomp is None:
            decomp = branch_decomposition(
                w,
                r_l,
                r_g,
                hadamard(w.shape[1]),
                use_gmb=ctx.use_gmb,
                order=ctx.gmb_order,
                placement=ctx.gmb_placement,
            )
            model._branch_cache[bkey] = decomp
        lrb, gmb, w_res = decomp
        layer = assemble_layer(
            w_res, lrb, gmb, bits, bits, w.shape[1], ctx.gmb_placement, ctx.deltas
        )
        model._layer_cache[key] = layer
    return layer


def quantized_layer(model: ToyModel, i: int, bits: int, ctx: QuantContext | None = None) -> QuantizedLinear:
    """Build (or fetch from cache) one layer's quantized form at ``bits``."""
    if ctx is None:
        ctx = default_context()
    if not (0 <= i < model.n_layers):
        raise InvalidDimensionError(f"layer {i} out of range")
    if bits not in ALLOWED_BITS:
        raise InvalidBitsError(f"bits {bits} not in {ALLOWED_BITS}")
    return _layer_for(model, i, bits, ctx)


def _validate_alloc(model: ToyModel, alloc: Mapping[int, int]):
    for i in range(model.n_layers):
        if i not in alloc:
            raise InvalidBitsError(f"allocation missing layer {i}")
        if alloc[i] not in ALLOWED_BITS:
            raise InvalidBitsError(
                f"layer {i} bits {alloc[i]} not in {ALLOWED_BITS}"
            )
    for key in alloc:
        if not (0 <= int(key) < model.n_layers):
            raise InvalidBitsError(f"allocation names unknown layer {key}")


def forward_batch(model: ToyModel, alloc, xs, ctx: QuantContext | None = None) -> np.ndarray:
    """Quantized forward, one input per row; layers at 32 bits run dense."""
    if ctx is None:
        ctx = default_context()
    xs = as_matrix(xs)
    if xs.shape[1] != model.dims[0]:
        raise InvalidDimensionError(
            f"input width {xs.shape[1]} does not match model width {model.dims[0]}"
        )
    _validate_alloc(model, alloc)
    for i in range(model.n_layers):
        bits = alloc[i]
        if bits == PASSTHROUGH_BITS and ctx.fp32_dense:
            xs = np.einsum("nd,od->no", xs, model.weights[i])
        else:
            xs = forward_quantized_batch(_layer_for(model, i, bits, ctx), xs, ctx.deltas)
        if i < model.n_layers - 1:
            xs = np.where(xs > 0.0, xs, LEAKY_SLOPE * xs)
    return xs


def forward(model: ToyModel, alloc, x, ctx: QuantContext | None = None) -> np.ndarray:
    """Single-vector forward; bit-identical to the matching forward_batch row."""
    x = as_vector(x)
    return forward_batch(model, alloc, x[None, :], ctx)[0]


def gen_calibration(model: ToyModel, count: int, seed: int) -> CalibrationSet:
    """``count`` i.i.d. standard-normal inputs plus exact dense outputs.

    Input j comes from substream (TAG_CALIB, j) of ``seed``.
    """
    if count < 1:
        raise InvalidDimensionError(f"count must be >= 1, got {count}")
    d0 = model.dims[0]
    xs = np.stack(
        [gaussian_stream(substream(seed, TAG_CALIB, j), d0) for j in range(count)],
        axis=0,
    )
    all32 = {i: PASSTHROUGH_BITS for i in range(model.n_layers)}
    fp = forward_batch(model, all32, xs, default_context())
    return CalibrationSet(
        inputs=tuple(xs[j] for j in range(count)),
        fp_outputs=tuple(fp[j] for j in range(count)),
        seed=int(seed),
    )


def end_to_end_mse(model: ToyModel, alloc, calib: CalibrationSet, ctx: QuantContext | None = None) -> float:
    """Mean over the calibration set of |out - fp|^2 / output_dim.

    This is the search's performance indicator once environment bits are
    folded into ``alloc``.  Results are memoized on the model keyed by
    (allocation, calibration identity, context).
    """
    if ctx is None:
        ctx = default_context()
    _validate_alloc(model, alloc)
    key = (tuple(sorted(alloc.items())), calib.key(), ctx.cache_key(), ctx.fp32_dense)
    hit = model._mse_cache.get(key)
    if hit is not None:
        return hit
    out = forward_batch(model, alloc, calib.input_matrix, ctx)
    diff = out - calib.output_matrix
    mse = float(np.mean(diff * diff))
    model._mse_cache[key] = mse
    return mse


def mean_bitwidth(alloc, model: ToyModel) -> float:
    """FLOPs-weighted average bit-width over the full allocation."""
    _validate_alloc(model, alloc)
    flops = model.flops
    total = sum(flops)
    return sum(flops[i] * alloc[i] for i in range(model.n_layers)) / total


def model_to_json(model: ToyModel) -> str:
    from .branches import _matrix_to_json

    return json.dumps(
        {
            "spec": json.loads(model.spec.to_json()),
            "flops": list(model.flops),
            "weights": [_matrix_to_json(w) for w in model.weights],
        }
    )
