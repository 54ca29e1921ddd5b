"""High-precision side branches for quantized layers.

Two branch types capture weight structure that survives quantization badly:

* LRB: a rank-r factorization a @ b of the rotated weight, from truncated SVD.
* GMB: a block-partitioned Monarch-style correction.  The weight is cut into
  an n_o x n_i grid of blocks and each block keeps its top singular pair, so
  the branch is rank-1 per block but full-rank overall.  It admits an exact
  factored form L @ P @ R with block-diagonal L and R around a fixed
  grid-transpose permutation P.

Both branches stay in floating point; only the residual left after
subtracting them gets quantized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidDimensionError, InvalidPartitionError, InvalidRankError
from .linalg import as_matrix, hadamard, matmul, matvec, top_singular_pair, truncated_svd
from .quantizer import (
    DeltaTable,
    PASSTHROUGH_BITS,
    quantize_rotated_batch,
    quantize_weight_channelwise,
)

GMB_ORDERS = ("lrb_first", "gmb_first")
GMB_PLACEMENTS = ("post", "pre")


@dataclass(frozen=True)
class LrbFactors:
    """Low-rank branch a (n_out x r) @ b (r x n_in); r may be zero."""

    a: np.ndarray
    b: np.ndarray

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def product(self) -> np.ndarray:
        if self.rank == 0:
            return np.zeros((self.a.shape[0], self.b.shape[1]))
        return matmul(self.a, self.b)


def init_lrb(w_h, r: int) -> LrbFactors:
    """Rank-r factors of a rotated weight via truncated SVD.

    a absorbs the singular values (a = U_r diag(s_r), b = V_r^T).  r = 0
    returns empty factors whose product is the zero matrix.
    """
    w_h = as_matrix(w_h)
    if r == 0:
        return LrbFactors(
            a=np.zeros((w_h.shape[0], 0)), b=np.zeros((0, w_h.shape[1]))
        )
    if r < 0 or r > min(w_h.shape):
        raise InvalidRankError(f"LRB rank {r} invalid for shape {w_h.shape}")
    t = truncated_svd(w_h, r)
    return LrbFactors(a=t.u * t.sigma[None, :], b=t.v.T.copy())


@dataclass(frozen=True)
class GmbFactors:
    """Per-block rank-1 factors over an n_o x n_i block grid.

    sigma[j, k], u[j, k] (length b_o) and v[j, k] (length b_i) describe
    block (j, k) of the n_o*b_o x n_i*b_i matrix.
    """

    n_o: int
    n_i: int
    sigma: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def b_o(self) -> int:
        return self.u.shape[2]

    @property
    def b_i(self) -> int:
        return self.v.shape[2]

    def param_count(self) -> int:
        return self.n_i * self.n_o * (self.b_i + self.b_o)


def gmb_budget_partitions(n_out: int, n_in: int, r: int) -> tuple[int, int]:
    """Block-grid shape (n_o, n_i) for parameter budget r(n_o b_o + n_i b_i).

    Setting n_o = n_i = r makes the per-block rank-1 parameter count
    n_i*n_o*(b_i+b_o) equal that budget exactly.  r = 0 means no branch.
    Raises if r does not divide both dimensions.
    """
    if r == 0:
        return (0, 0)
    if r < 0 or r > min(n_out, n_in):
        raise InvalidRankError(f"GMB r {r} invalid for shape ({n_out}, {n_in})")
    if n_out % r or n_in % r:
        raise InvalidPartitionError(
            f"r {r} must divide both dimensions ({n_out}, {n_in})"
        )
    b_o, b_i = n_out // r, n_in // r
    assert r * r * (b_i + b_o) == r * (r * b_o + r * b_i)
    return (r, r)


def gmb_decompose(m, n_o: int, n_i: int) -> GmbFactors:
    """Top singular pair of every block in an n_o x n_i partition of ``m``."""
    m = as_matrix(m)
    rows, cols = m.shape
    if n_o < 1 or n_i < 1 or rows % n_o or cols % n_i:
        raise InvalidPartitionError(
            f"partition {n_o} x {n_i} does not divide shape {m.shape}"
        )
    b_o, b_i = rows // n_o, cols // n_i
    sigma = np.zeros((n_o, n_i))
    u = np.zeros((n_o, n_i, b_o))
    v = np.zeros((n_o, n_i, b_i))
    for j in range(n_o):
        for k in range(n_i):
            block = m[j * b_o : (j + 1) * b_o, k * b_i : (k + 1) * b_i]
            s, bu, bv = top_singular_pair(block)
            sigma[j, k] = s
            u[j, k] = bu
            v[j, k] = bv
    return GmbFactors(n_o=n_o, n_i=n_i, sigma=sigma, u=u, v=v)


def gmb_reconstruct_blocks(f: GmbFactors) -> np.ndarray:
    """Assemble the dense branch matrix block by block."""
    blocks = np.einsum("jk,jko,jki->joki", f.sigma, f.u, f.v)
    return blocks.reshape(f.n_o * f.b_o, f.n_i * f.b_i)


def gmb_permutation(n_o: int, n_i: int) -> np.ndarray:
    """Grid-transpose permutation: position k*n_o + j maps to j*n_i + k."""
    k, j = np.meshgrid(np.arange(n_i), np.arange(n_o), indexing="ij")
    perm = np.empty(n_i * n_o, dtype=np.int64)
    perm[(k * n_o + j).ravel()] = (j * n_i + k).ravel()
    return perm


def permutation_matrix(perm) -> np.ndarray:
    p = np.zeros((perm.shape[0], perm.shape[0]))
    p[perm, np.arange(perm.shape[0])] = 1.0
    return p


def gmb_build_factored(f: GmbFactors):
    """Exact factored form (L, perm, R) with L @ P @ R equal to the block assembly.

    L is block-diagonal with n_o blocks of shape b_o x n_i (columns are
    sigma[j,k] * u[j,k]); R is block-diagonal with n_i blocks of shape
    n_o x b_i (rows are v[j,k]); perm is the grid transpose wiring them up.
    """
    l = np.zeros((f.n_o * f.b_o, f.n_i * f.n_o))
    for j in range(f.n_o):
        l[j * f.b_o : (j + 1) * f.b_o, j * f.n_i : (j + 1) * f.n_i] = (
            f.u[j].T * f.sigma[j][None, :]
        )
    r = np.zeros((f.n_i * f.n_o, f.n_i * f.b_i))
    for k in range(f.n_i):
        r[k * f.n_o : (k + 1) * f.n_o, k * f.b_i : (k + 1) * f.b_i] = f.v[:, k, :]
    return l, gmb_permutation(f.n_o, f.n_i), r


@dataclass(frozen=True)
class QuantizedLinear:
    """One quantized layer: integer-grid residual plus floating branches.

    The forward path is
        y = q_res @ Q_act(x) + branch_h @ (H^T x) [+ branch_pre @ x]
    where Q_act rotates and quantizes the activation at ``bits_a``.  With
    the default post-rotation placement every branch acts on H^T x and
    ``branch_pre`` is absent.
    """

    q_res: np.ndarray
    lrb: LrbFactors
    gmb: GmbFactors | None
    bits_w: int
    bits_a: int
    n: int
    gmb_placement: str = "post"

    @cached_property
    def h(self) -> np.ndarray:
        return hadamard(self.n)

    @cached_property
    def branch_h(self) -> np.ndarray:
        """Combined branch matrix applied to the rotated activation."""
        total = self.lrb.product()
        if self.gmb is not None and self.gmb_placement == "post":
            total = total + gmb_reconstruct_blocks(self.gmb)
        return total

    @cached_property
    def branch_pre(self) -> np.ndarray | None:
        """Branch applied to the raw activation (pre-rotation placement only)."""
        if self.gmb is not None and self.gmb_placement == "pre":
            return gmb_reconstruct_blocks(self.gmb)
        return None


def branch_decomposition(
    w,
    r_lrb: int,
    r_gmb: int,
    h,
    *,
    use_gmb: bool = True,
    order: str = "lrb_first",
    placement: str = "post",
):
    """Fit the branches of one weight; independent of any bit-width.

    Default pipeline: W_H = W @ H, LRB fitted on W_H, GMB fitted on
    W_H - LRB.  ``order`` swaps which branch is fitted first; ``placement``
    "pre" fits the GMB on the raw weight W instead (its output then feeds
    on x, not H^T x).  Returns (lrb, gmb, w_res) with w_res the leftover
    handed to the residual quantizer.
    """
    w = as_matrix(w)
    h = as_matrix(h)
    if order not in GMB_ORDERS:
        raise InvalidPartitionError(f"order must be one of {GMB_ORDERS}")
    if placement not in GMB_PLACEMENTS:
        raise InvalidPartitionError(f"placement must be one of {GMB_PLACEMENTS}")
    if h.shape[0] != h.shape[1] or h.shape[0] != w.shape[1]:
        raise InvalidDimensionError(
            f"Hadamard shape {h.shape} does not match weight {w.shape}"
        )
    w_h = matmul(w, h)
    gmb = None
    if use_gmb and r_gmb > 0:
        n_o, n_i = gmb_budget_partitions(w.shape[0], w.shape[1], r_gmb)
        if placement == "pre":
            # branch lives outside the rotation; fit on the raw weight,
            # then remove its rotated image from the residual
            gmb = gmb_decompose(w, n_o, n_i)
            shadow = matmul(gmb_reconstruct_blocks(gmb), h)
            lrb = init_lrb(w_h - shadow, r_lrb)
            w_res = w_h - shadow - lrb.product()
        elif order == "lrb_first":
            lrb = init_lrb(w_h, r_lrb)
            gmb = gmb_decompose(w_h - lrb.product(), n_o, n_i)
            w_res = w_h - lrb.product() - gmb_reconstruct_blocks(gmb)
        else:
            gmb = gmb_decompose(w_h, n_o, n_i)
            lrb = init_lrb(w_h - gmb_reconstruct_blocks(gmb), r_lrb)
            w_res = w_h - gmb_reconstruct_blocks(gmb) - lrb.product()
    else:
        lrb = init_lrb(w_h, r_lrb)
        w_res = w_h - lrb.product()
    return lrb, gmb, w_res


def assemble_layer(w_res, lrb, gmb, bits_w: int, bits_a: int, n: int,
                   placement: str = "post", table: DeltaTable | None = None) -> QuantizedLinear:
    """Quantize a decomposition's residual and package the layer."""
    return QuantizedLinear(
        q_res=quantize_weight_channelwise(w_res, bits_w, table),
        lrb=lrb,
        gmb=gmb,
        bits_w=int(bits_w),
        bits_a=int(bits_a),
        n=int(n),
        gmb_placement=placement,
    )


def quantize_layer(
    w,
    bits_w: int,
    r_lrb: int,
    r_gmb: int,
    h,
    *,
    bits_a: int | None = None,
    use_gmb: bool = True,
    order: str = "lrb_first",
    placement: str = "post",
    table: DeltaTable | None = None,
) -> QuantizedLinear:
    """Rotate a weight, peel off the branches, and quantize the residual.

    See branch_decomposition for the pipeline and its variants.  ``bits_a``
    defaults to ``bits_w`` (a "3-bit layer" quantizes weights and
    activations at 3 bits).
    """
    if bits_a is None:
        bits_a = bits_w
    lrb, gmb, w_res = branch_decomposition(
        w, r_lrb, r_gmb, h, use_gmb=use_gmb, order=order, placement=placement
    )
    return assemble_layer(
        w_res, lrb, gmb, bits_w, bits_a, as_matrix(w).shape[1], placement, table
    )


def forward_quantized(layer: QuantizedLinear, x, table: DeltaTable | None = None):
    """Quantized forward for one activation vector."""
    return forward_quantized_batch(layer, np.asarray(x, dtype=np.float64)[None, :], table)[0]


def forward_quantized_batch(layer: QuantizedLinear, xs, table: DeltaTable | None = None):
    """Quantized forward, one token per row of ``xs``."""
    xs = as_matrix(xs)
    if xs.shape[1] != layer.n:
        raise InvalidDimensionError(
            f"activation width {xs.shape[1]} does not match layer width {layer.n}"
        )
    rotated = np.einsum("nj,ji->ni", xs, layer.h)
    qact = quantize_rotated_batch(rotated, layer.bits_a, table)
    out = np.einsum("nd,od->no", qact, layer.q_res)
    out = out + np.einsum("nd,od->no", rotated, layer.branch_h)
    if layer.branch_pre is not None:
        out = out + np.einsum("nd,od->no", xs, layer.branch_pre)
    return out


def _matrix_to_json(m: np.ndarray) -> dict:
    return {
        "rows": int(m.shape[0]),
        "cols": int(m.shape[1]),
        "data": [float(v) for v in m.ravel()],
    }


def _matrix_from_json(obj: dict) -> np.ndarray:
    m = np.asarray(obj["data"], dtype=np.float64).reshape(obj["rows"], obj["cols"])
    return m


def qlinear_to_json(layer: QuantizedLinear) -> str:
    doc = {
        "bits_w": layer.bits_w,
        "bits_a": layer.bits_a,
        "n": layer.n,
        "lrb": {
            "a": _matrix_to_json(layer.lrb.a),
            "b": _matrix_to_json(layer.lrb.b),
        },
        "gmb": None,
        "q_res": _matrix_to_json(layer.q_res),
    }
    if layer.gmb is not None:
        doc["gmb"] = {
            "n_o": layer.gmb.n_o,
            "n_i": layer.gmb.n_i,
            "sigma": [[float(v) for v in row] for row in layer.gmb.sigma],
            "u": [[list(map(float, vec)) for vec in row] for row in layer.gmb.u],
            "v": [[list(map(float, vec)) for vec in row] for row in layer.gmb.v],
        }
    if layer.gmb_placement != "post":
        doc["gmb_placement"] = layer.gmb_placement
    return json.dumps(doc)


def qlinear_from_json(text: str) -> QuantizedLinear:
    doc = json.loads(text)
    gmb = None
    if doc.get("gmb") is not None:
        g = doc["gmb"]
        gmb = GmbFactors(
            n_o=int(g["n_o"]),
            n_i=int(g["n_i"]),
            sigma=np.asarray(g["sigma"], dtype=np.float64),
            u=np.asarray(g["u"], dtype=np.float64),
            v=np.asarray(g["v"], dtype=np.float64),
        )
    return QuantizedLinear(
        q_res=_matrix_from_json(doc["q_res"]),
        lrb=LrbFactors(
            a=_matrix_from_json(doc["lrb"]["a"]),
            b=_matrix_from_json(doc["lrb"]["b"]),
        ),
        gmb=gmb,
        bits_w=int(doc["bits_w"]),
        bits_a=int(doc["bits_a"]),
        n=int(doc["n"]),
        gmb_placement=doc.get("gmb_placement", "post"),
    )
