"""Attention variants: simplified self-attention, QKV local self-attention with
factorized positional embeddings, and the affine self convolution (ASC) family
on the plane and on p4.

The per-location affine map is A_(x)[f](y) = f(y) L_x[psi](y) + L_x[beta](y):
a depthwise multiplicative filter plus an additive positional term.  Scoring
the affinely-mapped center against the affinely-mapped neighbors and
aggregating the affinely-mapped values turns a convolution into its
data-dependent counterpart while keeping translation (resp. roto-translation)
equivariance.

All variants funnel into two fused kernels (see ``kernels``): planar ops apply
psi/beta on the fly, p4 ops premix orientation sums with small per-channel
GEMMs and evaluate each output orientation with a rotated window-offset table.
Score normalization can be overridden per call (``score_mode``) with the
test-only hooks "ones" / "uniform".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import HeadDivisibility, KernelLargerThanPaddedInput, ShapeMismatch
from .nn import Module, he_std, pad2d, pointwise, unpad2d_grad, _group_conv1x1
from .groups import rotated_offset_index, window_offsets
from .tensor import Tensor, scratch

_MODES = {"softmax": kernels.MODE_SOFTMAX, "ones": kernels.MODE_ONES,
          "uniform": kernels.MODE_UNIFORM}


@dataclass
class AffineParams:
    """Depthwise affine pair: psi multiplicative, beta additive.

    Neighbor role: psi [C,k,k] (planar) or [C,4,k,k] (p4); beta [C,k,k] (on
    p4 beta lives on the quotient, so it has no orientation axis).
    Center (Q) role: psi [C] (planar) or [C,4] (p4); beta [C].
    """
    psi: Tensor
    beta: Tensor


@dataclass
class AscParams:
    """Pointwise QKV weights plus the three affine maps of one ASC layer."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    aq: AffineParams
    ak: AffineParams
    av: AffineParams
    heads: int
    d_k: int


def _check_heads(channels: int, heads: int, what: str) -> int:
    if channels % heads:
        raise HeadDivisibility(f"{what}: {channels} channels not divisible by {heads} heads")
    return channels // heads


def _offsets_padded(k: int, rot: int = 0) -> np.ndarray:
    """Window offsets as (du, dv) into the padded array, optionally rotated.

    With ``rot = P`` the j-th entry is the offset P(delta_j): enumerating the
    window through this table lets p4 layers read psi/beta in native order.
    """
    m = k // 2
    centred = window_offsets(k)
    if rot % 4:
        centred = centred[rotated_offset_index(k, rot)]
    return np.ascontiguousarray((centred + m).astype(np.int64))


def _as_array(p, shape) -> tuple[np.ndarray, Tensor | None]:
    """Normalize a parameter to (const array, tensor-or-None for grads)."""
    if p is None:
        return np.zeros(shape, np.float32), None
    if isinstance(p, Tensor):
        arr = np.ascontiguousarray(p.data.reshape(shape))
        return arr, p
    return np.ascontiguousarray(np.asarray(p, np.float32).reshape(shape)), None


def _check_window(k: int, H: int, W: int, padding: str) -> None:
    if k % 2 == 0:
        raise ShapeMismatch(f"window size must be odd, got {k}")
    if padding == "circular" and (k > H or k > W):
        raise KernelLargerThanPaddedInput(
            f"circular window {k} exceeds spatial dims {H}x{W}")


# -- planar fused core -------------------------------------------------------------


def _planar_attention(qa: Tensor, K: Tensor, V: Tensor, psk, bek, psv, bev,
                      k: int, heads: int, scale: float, padding: str,
                      score_mode: str) -> tuple[Tensor, Tensor]:
    """Fused planar window attention; returns (out, scores)."""
    B, Ck, H, W = qa.shape
    Cv = V.shape[1]
    _check_window(k, H, W, padding)
    _check_heads(Ck, heads, "score channels")
    _check_heads(Cv, heads, "value channels")
    k2 = k * k
    m = k // 2
    psk_a, psk_t = _as_array(psk, (Ck, k2)) if psk is not None else (np.ones((Ck, k2), np.float32), None)
    bek_a, bek_t = _as_array(bek, (Ck, k2))
    psv_a, psv_t = _as_array(psv, (Cv, k2)) if psv is not None else (np.ones((Cv, k2), np.float32), None)
    bev_a, bev_t = _as_array(bev, (Cv, k2))
    Kp = pad2d(K.data, m, padding)
    Vp = pad2d(V.data, m, padding)
    offs = _offsets_padded(k)
    mode = _MODES[score_mode]
    out_data = scratch.acquire((B, Cv, H, W))
    alpha = scratch.acquire((B, heads, H, W, k2))
    kernels.affine_fwd(qa.data, Kp, Vp, psk_a, bek_a, psv_a, bev_a, offs,
                       heads, float(scale), mode, out_data, alpha)
    T._assert_finite(out_data, "attention output")

    def bw(g):
        dqa = np.zeros(qa.shape, np.float32)
        dKp = np.zeros(Kp.shape, np.float32)
        dVp = np.zeros(Vp.shape, np.float32)
        dpsk = np.zeros((Ck, k2), np.float64)
        dbek = np.zeros((Ck, k2), np.float64)
        dpsv = np.zeros((Cv, k2), np.float64)
        dbev = np.zeros((Cv, k2), np.float64)
        kernels.affine_bwd(np.ascontiguousarray(g), qa.data, Kp, Vp, psk_a, bek_a,
                           psv_a, bev_a, offs, heads, float(scale), mode, alpha,
                           dqa, dKp, dVp, dpsk, dbek, dpsv, dbev)
        contribs = [(qa, dqa),
                    (K, unpad2d_grad(dKp, m, padding)),
                    (V, unpad2d_grad(dVp, m, padding))]
        for t, d in ((psk_t, dpsk), (bek_t, dbek), (psv_t, dpsv), (bev_t, dbev)):
            if t is not None:
                contribs.append((t, d.astype(np.float32).reshape(t.shape)))
        return contribs

    inputs = [qa, K, V] + [t for t in (psk_t, bek_t, psv_t, bev_t) if t is not None]
    out = T._make(out_data)
    T.record(out, bw, inputs)
    sc = T._make(alpha)
    sc.requires_grad = False
    return out, sc


# -- public planar ops ---------------------------------------------------------------


def neighborhood_gather(f: Tensor, k: int, padding: str = "zero") -> Tensor:
    """Materialize k x k windows: out[..., x, y, j] = f at offset j around (x, y)."""
    H, W = f.shape[-2], f.shape[-1]
    if k % 2 == 0:
        raise ShapeMismatch(f"window size must be odd, got {k}")
    if padding == "circular" and (k > H or k > W):
        raise KernelLargerThanPaddedInput(
            f"circular window {k} exceeds spatial dims {H}x{W}")
    m = k // 2
    fp = pad2d(f.data, m, padding)
    win = np.lib.stride_tricks.sliding_window_view(fp, (k, k), axis=(-2, -1))
    out_data = np.ascontiguousarray(win).reshape(f.shape + (k * k,))

    def bw(g):
        gw = g.reshape(f.shape[:-2] + (H, W, k, k))
        gp = np.zeros(fp.shape, np.float64)
        for u in range(k):
            for v in range(k):
                gp[..., u:u + H, v:v + W] += gw[..., u, v]
        return [(f, unpad2d_grad(gp.astype(np.float32), m, padding))]

    return T._finish(out_data, bw, (f,), "gather output")


def affine_map_apply(f_window: Tensor, a: AffineParams, role: str = "neighbor") -> Tensor:
    """Apply A_(x): multiply by psi and add beta, per channel and offset.

    ``neighbor`` expects gathered windows [..., C, H, W, k*k] with psi/beta
    [C, k, k]; ``center`` expects plain maps [..., C, H, W] with scalar
    per-channel psi/beta.
    """
    if role == "center":
        C = f_window.shape[1]
        psi = T.reshape(a.psi, (1, C) + (1,) * (f_window.ndim - 2))
        beta = T.reshape(a.beta, (1, C) + (1,) * (f_window.ndim - 2))
        return T.add(T.mul(f_window, psi), beta)
    C = f_window.shape[1]
    k2 = f_window.shape[-1]
    mid = (1,) * (f_window.ndim - 3)
    psi = T.reshape(a.psi, (1, C) + mid + (k2,))
    beta = T.reshape(a.beta, (1, C) + mid + (k2,))
    return T.add(T.mul(f_window, psi), beta)


def simple_self_attention(f: Tensor, k: int, padding: str = "zero",
                          score_mode: str = "softmax",
                          return_scores: bool = False):
    """Single-channel local self-attention: out(x) = sum_y softmax_y(f(x)f(y)) f(y)."""
    if f.shape[1] != 1:
        raise ShapeMismatch(f"simplified self-attention is single-channel, got {f.shape}")
    out, sc = _planar_attention(f, f, f, None, None, None, None,
                                k, 1, 1.0, padding, score_mode)
    return (out, sc) if return_scores else out


def sasa_self_attention(f: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                        beta_row: Tensor, beta_col: Tensor, heads: int, k: int,
                        padding: str = "zero", score_mode: str = "softmax",
                        return_scores: bool = False):
    """QKV local self-attention with factorized additive positional embeddings.

    Per head the key embedding is offset by beta(y - x) whose first half
    depends only on the row offset and second half only on the column offset;
    the score is <Q(x), K(y) + beta(y-x)> / d_k per head.
    """
    d_k = wq.shape[0]
    dh = _check_heads(d_k, heads, "sasa d_k")
    if dh % 2:
        raise HeadDivisibility(f"per-head dim {dh} must be even for the row/col split")
    Q = pointwise(f, wq)
    K = pointwise(f, wk)
    V = pointwise(f, wv)
    bek = _sasa_embedding(beta_row, beta_col, heads, dh, k)
    out, sc = _planar_attention(Q, K, V, None, bek, None, None,
                                k, heads, 1.0 / dh, padding, score_mode)
    return (out, sc) if return_scores else out


def _sasa_embedding(beta_row: Tensor, beta_col: Tensor, heads: int, dh: int,
                    k: int) -> Tensor:
    """Expand factorized embeddings to a dense [C, k*k] additive table."""
    half = dh // 2
    k2 = k * k
    C = heads * dh
    rows = np.repeat(np.arange(k), k)
    cols = np.tile(np.arange(k), k)
    table = np.zeros((C, k2), np.float32)
    br = beta_row.data
    bc = beta_col.data
    for h in range(heads):
        table[h * dh:h * dh + half, :] = br[h][:, rows]
        table[h * dh + half:(h + 1) * dh, :] = bc[h][:, cols]

    def bw(g):
        dbr = np.zeros(beta_row.shape, np.float64)
        dbc = np.zeros(beta_col.shape, np.float64)
        for h in range(heads):
            gr = g[h * dh:h * dh + half, :]
            gc = g[h * dh + half:(h + 1) * dh, :]
            for j in range(k2):
                dbr[h, :, rows[j]] += gr[:, j]
                dbc[h, :, cols[j]] += gc[:, j]
        return [(beta_row, dbr.astype(np.float32)), (beta_col, dbc.astype(np.float32))]

    return T._finish(table, bw, (beta_row, beta_col), "sasa embedding")


def simple_asc(f: Tensor, a: AffineParams, k: int, padding: str = "zero",
               heads: int = 1, score_mode: str = "softmax",
               return_scores: bool = False):
    """Simplified ASC: score and aggregate the affinely-mapped input itself.

    out(x) = sum_y alpha(x,y) (f(y) L_x[psi](y) + L_x[beta](y)) with alpha the
    softmax of the (per-head channel-mean) product of A_(x)[f] at the center
    with A_(x)[f] at the neighbors.  Single-channel with one head reproduces
    the scalar form; as a network layer it runs multi-channel + multi-head
    with the same single psi/beta pair.
    """
    C = f.shape[1]
    ch = _check_heads(C, heads, "simple_asc channels")
    k2 = k * k
    centre = (k2 - 1) // 2
    psi2 = T.reshape(a.psi, (C, k2))
    beta2 = T.reshape(a.beta, (C, k2))
    psi0 = _column(psi2, centre)
    beta0 = _column(beta2, centre)
    qa = affine_map_apply(f, AffineParams(psi0, beta0), role="center")
    out, sc = _planar_attention(qa, f, f, psi2, beta2, psi2, beta2,
                                k, heads, 1.0 / ch, padding, score_mode)
    return (out, sc) if return_scores else out


def _column(t2: Tensor, j: int) -> Tensor:
    """Select column j of a rank-2 tensor (differentiable slice)."""
    col = np.ascontiguousarray(t2.data[:, j])

    def bw(g):
        d = np.zeros(t2.shape, np.float32)
        d[:, j] = g
        return [(t2, d)]

    return T._finish(col, bw, (t2,), "column")


def asc_forward(f: Tensor, p: AscParams, k: int, padding: str = "zero",
                score_mode: str = "softmax", return_scores: bool = False):
    """Full QKV affine self convolution on the plane.

    1) Q/K/V by pointwise maps; 2) affine maps per term (the Q pair has no
    spatial extent); 3) per-head scores (1/d_k scaled) between the mapped
    center and mapped neighbors; 4) aggregation of the mapped values.  Heads
    are concatenated; no output projection happens here.
    """
    d_k = p.wq.shape[0]
    d_out = p.wv.shape[0]
    if p.d_k != d_k or d_k != d_out:
        raise ShapeMismatch(f"expected d_k == d_out, got {d_k} vs {d_out}")
    dh = _check_heads(d_k, p.heads, "asc d_k")
    Q = pointwise(f, p.wq)
    K = pointwise(f, p.wk)
    V = pointwise(f, p.wv)
    qa = affine_map_apply(Q, p.aq, role="center")
    k2 = k * k
    psk = T.reshape(p.ak.psi, (d_k, k2))
    bek = T.reshape(p.ak.beta, (d_k, k2))
    psv = T.reshape(p.av.psi, (d_out, k2))
    bev = T.reshape(p.av.beta, (d_out, k2))
    out, sc = _planar_attention(qa, K, V, psk, bek, psv, bev,
                                k, p.heads, 1.0 / dh, padding, score_mode)
    return (out, sc) if return_scores else out


# -- p4 fused core ----------------------------------------------------------------


def p4_center_affine(Q: Tensor, psi_q: Tensor | None, beta_q: Tensor | None) -> Tensor:
    """Orientation-summed affine center term for every output orientation.

    qa(c,P,x) = sum_R Q(c,R,x) psi_q(c, R-P mod 4) + beta_q(c); psi_q [C,4]
    (or None for unit psi), beta_q [C] (or None).
    """
    B, C, four, H, W = Q.shape
    psi_a, psi_t = _as_array(psi_q, (C, 4)) if psi_q is not None else (np.ones((C, 4), np.float32), None)
    beta_a, beta_t = _as_array(beta_q, (C,))
    q64 = Q.data.reshape(B, C, 4, H * W).astype(np.float64)
    # W4[c, P, R] = psi_q[c, (R - P) % 4]
    ridx = (np.arange(4)[None, :] - np.arange(4)[:, None]) % 4
    W4 = psi_a.astype(np.float64)[:, ridx]
    qa = np.einsum("cpr,bcrz->bcpz", W4, q64, optimize=True)
    qa += beta_a.astype(np.float64)[None, :, None, None]
    out_data = qa.astype(np.float32).reshape(B, C, 4, H, W)

    def bw(g):
        g64 = g.reshape(B, C, 4, H * W).astype(np.float64)
        dQ = np.einsum("cpr,bcpz->bcrz", W4, g64, optimize=True)
        contribs = [(Q, dQ.astype(np.float32).reshape(Q.shape))]
        if psi_t is not None:
            dW4 = np.einsum("bcpz,bcrz->cpr", g64, q64, optimize=True)
            dpsi = np.zeros((C, 4), np.float64)
            for Pq in range(4):
                for R in range(4):
                    dpsi[:, (R - Pq) % 4] += dW4[:, Pq, R]
            contribs.append((psi_t, dpsi.astype(np.float32).reshape(psi_t.shape)))
        if beta_t is not None:
            contribs.append((beta_t, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32)))
        return contribs

    return T._finish(out_data, bw, [t for t in (Q, psi_t, beta_t) if t is not None],
                     "p4 center affine")


def _premix(Xt: np.ndarray, psi: np.ndarray, beta: np.ndarray, P: int,
            out: np.ndarray) -> None:
    """out[c, j, b, z] = sum_m Xt[c, (P+m)%4, b, z] psi[c, m, j] + beta[c, j].

    Xt is [C, 4, B, Hp*Wp]; psi [C, 4, k2]; beta [C, k2].  Per-channel GEMMs
    with the additive term folded in through an all-ones row.
    """
    C, _, B, Z = Xt.shape
    k2 = psi.shape[2]
    idx = [(P + mm) % 4 for mm in range(4)]
    ones = np.ones((1, B * Z), np.float64)
    for c in range(C):
        A = np.concatenate([Xt[c, idx].reshape(4, B * Z).astype(np.float64), ones], axis=0)
        Wm = np.concatenate([psi[c].astype(np.float64),
                             beta[c].astype(np.float64)[None, :]], axis=0)
        out[c] = (Wm.T @ A).astype(np.float32).reshape(k2, B, Z).reshape(out.shape[1:])


def _premix_bwd(dout: np.ndarray, Xt: np.ndarray, psi: np.ndarray, P: int,
                dX: np.ndarray, dpsi: np.ndarray, dbeta: np.ndarray) -> None:
    """Adjoint of _premix, accumulating into dX [C,4,B,Z], dpsi, dbeta (float64)."""
    C, _, B, Z = Xt.shape
    k2 = psi.shape[2]
    idx = [(P + mm) % 4 for mm in range(4)]
    for c in range(C):
        g = dout[c].reshape(k2, B * Z).astype(np.float64)
        dA = psi[c].astype(np.float64) @ g          # [4, B*Z]
        for mm in range(4):
            dX[c, idx[mm]] += dA[mm].reshape(B, Z)
        dpsi[c] += Xt[c, idx].reshape(4, B * Z).astype(np.float64) @ g.T
        dbeta[c] += g.sum(axis=1)


def _p4_attention(qa: Tensor, K: Tensor, V: Tensor, psk, bek, psv, bev,
                  k: int, heads: int, scale: float, padding: str,
                  score_mode: str) -> tuple[Tensor, Tensor]:
    """Fused p4 window attention.

    qa: [B,C,4,H,W] affine center terms per output orientation; K/V: p4 maps.
    psk [C,4,k,k] / bek [C,k,k] (quotient domain, added once per offset into
    the orientation sum), likewise psv/bev.  For each output orientation P the
    window enumeration uses the P-rotated offset table, so parameters are read
    in their native index order.
    """
    B, Ck, four, H, W = qa.shape
    Cv = V.shape[1]
    _check_window(k, H, W, padding)
    _check_heads(Ck, heads, "p4 score channels")
    _check_heads(Cv, heads, "p4 value channels")
    k2 = k * k
    m = k // 2
    psk_a, psk_t = _as_array(psk, (Ck, 4, k2)) if psk is not None else (np.ones((Ck, 4, k2), np.float32), None)
    bek_a, bek_t = _as_array(bek, (Ck, k2))
    psv_a, psv_t = _as_array(psv, (Cv, 4, k2)) if psv is not None else (np.ones((Cv, 4, k2), np.float32), None)
    bev_a, bev_t = _as_array(bev, (Cv, k2))
    Kp = pad2d(K.data, m, padding)
    Vp = pad2d(V.data, m, padding)
    Hp, Wp = Kp.shape[-2:]
    KT = np.ascontiguousarray(Kp.transpose(1, 2, 0, 3, 4)).reshape(Ck, 4, B, Hp * Wp)
    VT = np.ascontiguousarray(Vp.transpose(1, 2, 0, 3, 4)).reshape(Cv, 4, B, Hp * Wp)
    mode = _MODES[score_mode]
    out_data = scratch.acquire((B, Cv, 4, H, W))
    alpha = scratch.acquire((B, heads, 4, H, W, k2))
    Kt = scratch.acquire((Ck, k2, B, Hp, Wp))
    Vt = scratch.acquire((Cv, k2, B, Hp, Wp))
    out_P = scratch.acquire((B, Cv, H, W))
    alpha_P = scratch.acquire((B, heads, H, W, k2))
    qa_P = scratch.acquire((B, Ck, H, W))
    for P in range(4):
        offs = _offsets_padded(k, rot=P)
        _premix(KT, psk_a, bek_a, P, Kt.reshape(Ck, k2, B, Hp * Wp))
        _premix(VT, psv_a, bev_a, P, Vt.reshape(Cv, k2, B, Hp * Wp))
        qa_P[...] = qa.data[:, :, P]
        kernels.premixed_fwd(qa_P, Kt, Vt, offs, heads, float(scale), mode,
                             out_P, alpha_P)
        out_data[:, :, P] = out_P
        alpha[:, :, P] = alpha_P
    T._assert_finite(out_data, "p4 attention output")

    def bw(g):
        dqa = np.zeros(qa.shape, np.float32)
        dKT = np.zeros((Ck, 4, B, Hp * Wp), np.float64)
        dVT = np.zeros((Cv, 4, B, Hp * Wp), np.float64)
        dpsk = np.zeros((Ck, 4, k2), np.float64)
        dbek = np.zeros((Ck, k2), np.float64)
        dpsv = np.zeros((Cv, 4, k2), np.float64)
        dbev = np.zeros((Cv, k2), np.float64)
        dKt = scratch.acquire((Ck, k2, B, Hp, Wp))
        dVt = scratch.acquire((Cv, k2, B, Hp, Wp))
        dqa_P = scratch.acquire((B, Ck, H, W))
        for P in range(4):
            offs = _offsets_padded(k, rot=P)
            _premix(KT, psk_a, bek_a, P, Kt.reshape(Ck, k2, B, Hp * Wp))
            _premix(VT, psv_a, bev_a, P, Vt.reshape(Cv, k2, B, Hp * Wp))
            qa_P[...] = qa.data[:, :, P]
            alpha_P[...] = alpha[:, :, P]
            dKt[...] = 0.0
            dVt[...] = 0.0
            dqa_P[...] = 0.0
            kernels.premixed_bwd(np.ascontiguousarray(g[:, :, P]), qa_P, Kt, Vt,
                                 offs, heads, float(scale), mode, alpha_P,
                                 dqa_P, dKt, dVt)
            dqa[:, :, P] = dqa_P
            _premix_bwd(dKt.reshape(Ck, k2, B, Hp * Wp), KT, psk_a, P, dKT, dpsk, dbek)
            _premix_bwd(dVt.reshape(Cv, k2, B, Hp * Wp), VT, psv_a, P, dVT, dpsv, dbev)
        dKp = np.ascontiguousarray(
            dKT.reshape(Ck, 4, B, Hp, Wp).transpose(2, 0, 1, 3, 4)).astype(np.float32)
        dVp = np.ascontiguousarray(
            dVT.reshape(Cv, 4, B, Hp, Wp).transpose(2, 0, 1, 3, 4)).astype(np.float32)
        contribs = [(qa, dqa),
                    (K, unpad2d_grad(dKp, m, padding)),
                    (V, unpad2d_grad(dVp, m, padding))]
        for t, d in ((psk_t, dpsk), (bek_t, dbek), (psv_t, dpsv), (bev_t, dbev)):
            if t is not None:
                contribs.append((t, d.astype(np.float32).reshape(t.shape)))
        return contribs

    inputs = [qa, K, V] + [t for t in (psk_t, bek_t, psv_t, bev_t) if t is not None]
    out = T._make(out_data)
    T.record(out, bw, inputs)
    sc = T._make(alpha)
    sc.requires_grad = False
    return out, sc


# -- public p4 ops ----------------------------------------------------------------


def p4_affine_map_apply(f_window: Tensor, a: AffineParams, P: int,
                        role: str = "neighbor") -> Tensor:
    """Apply the p4 affine map with center orientation P.

    neighbor: windows [B,C,4,H,W,k2], psi [C,4,k,k], beta [C,k,k]; the
    transformed psi is read at orientation (R - P) mod 4 and at the offset
    rotated by P^-1; beta depends only on the (rotated) spatial offset and is
    added identically to every orientation slice.
    center: maps [B,C,4,H,W], psi [C,4], beta [C]; only the orientation index
    transforms (the spatial index is pinned at 0).
    """
    C = f_window.shape[1]
    if role == "center":
        psi_a = a.psi.data.reshape(C, 4)
        roll = [(r - P) % 4 for r in range(4)]
        psi_p = np.ascontiguousarray(psi_a[:, roll])

        def bwc(g):
            # d psi picks up the inverse orientation roll
            prod = np.einsum("bcrhw,bcrhw->cr", g, f_window.data, optimize=True)
            dpsi = np.zeros((C, 4), np.float64)
            for r in range(4):
                dpsi[:, roll[r]] += prod[:, r]
            return [(f_window, (g * psi_p[None, :, :, None, None]).astype(np.float32)),
                    (a.psi, dpsi.astype(np.float32).reshape(a.psi.shape)),
                    (a.beta, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32))]

        out_data = (f_window.data * psi_p[None, :, :, None, None]
                    + a.beta.data.reshape(C)[None, :, None, None, None])
        return T._finish(out_data.astype(np.float32), bwc, (f_window, a.psi, a.beta),
                         "p4 center affine map")
    k2 = f_window.shape[-1]
    k = int(round(k2 ** 0.5))
    rho = rotated_offset_index(k, -P)
    roll = [(r - P) % 4 for r in range(4)]
    psi_p = np.ascontiguousarray(a.psi.data.reshape(C, 4, k2)[:, roll][:, :, rho])
    beta_p = np.ascontiguousarray(a.beta.data.reshape(C, k2)[:, rho])
    out_data = (f_window.data * psi_p[None, :, :, None, None, :]
                + beta_p[None, :, None, None, None, :])

    def bw(g):
        dpsi_p = np.einsum("bcrxyj,bcrxyj->crj", g, f_window.data, optimize=True)
        dpsi = np.zeros((C, 4, k2), np.float64)
        for r in range(4):
            for j in range(k2):
                dpsi[:, roll[r], rho[j]] += dpsi_p[:, r, j]
        dbeta_p = g.sum(axis=(0, 2, 3, 4), dtype=np.float64)
        dbeta = np.zeros((C, k2), np.float64)
        for j in range(k2):
            dbeta[:, rho[j]] += dbeta_p[:, j]
        return [(f_window, (g * psi_p[None, :, :, None, None, :]).astype(np.float32)),
                (a.psi, dpsi.astype(np.float32).reshape(a.psi.shape)),
                (a.beta, dbeta.astype(np.float32).reshape(a.beta.shape))]

    return T._finish(out_data.astype(np.float32), bw, (f_window, a.psi, a.beta),
                     "p4 affine map")


def p4_score(fq_center: Tensor, fk_window: Tensor, heads: int = 1,
             scale: float | None = None) -> Tensor:
    """Normalized p4 score: orientation sums first, then the per-head product.

    fq_center [B,C,4,H,W] and fk_window [B,C,4,H,W,k2] are affine-mapped
    values; returns alpha [B,heads,H,W,k2] with softmax-normalized rows.
    """
    B, C = fq_center.shape[:2]
    ch = _check_heads(C, heads, "p4 score channels")
    if scale is None:
        scale = 1.0 / ch
    qsum = T.reduce_sum(fq_center, 2)                  # [B,C,H,W]
    ksum = T.reduce_sum(fk_window, 2)                  # [B,C,H,W,k2]
    H, W = qsum.shape[-2:]
    k2 = ksum.shape[-1]
    qh = T.reshape(qsum, (B, heads, ch, H, W, 1))
    kh = T.reshape(ksum, (B, heads, ch, H, W, k2))
    s = T.reduce_sum(T.mul(qh, kh), 2)                 # [B,heads,H,W,k2]
    s = T.mul(s, T.Tensor(np.float32(scale)))
    return T.softmax(s, axis=-1)


def p4_simple_asc(f: Tensor, a: AffineParams, k: int, padding: str = "zero",
                  heads: int = 1, score_mode: str = "softmax",
                  return_scores: bool = False):
    """Simplified ASC on p4 with a single affine pair.

    out(P,x) = sum_y alpha((P,x),(P,y)) sum_R A_(P,x)[f](R,y); the additive
    beta lives on the quotient and enters each orientation sum once.  The
    attention runs independently per output orientation P.
    """
    C = f.shape[1]
    ch = _check_heads(C, heads, "p4 simple_asc channels")
    k2 = k * k
    centre = (k2 - 1) // 2
    psi3 = T.reshape(a.psi, (C, 4, k2))
    beta2 = T.reshape(a.beta, (C, k2))
    psi_c = _column3(psi3, centre)   # [C,4]
    beta_c = _column(beta2, centre)  # [C]
    qa = p4_center_affine(f, psi_c, beta_c)
    out, sc = _p4_attention(qa, f, f, psi3, beta2, psi3, beta2,
                            k, heads, 1.0 / ch, padding, score_mode)
    return (out, sc) if return_scores else out


def _column3(t3: Tensor, j: int) -> Tensor:
    """Select trailing index j of a rank-3 tensor (differentiable)."""
    col = np.ascontiguousarray(t3.data[:, :, j])

    def bw(g):
        d = np.zeros(t3.shape, np.float32)
        d[:, :, j] = g
        return [(t3, d)]

    return T._finish(col, bw, (t3,), "column3")


def p4_asc_forward(f: Tensor, p: AscParams, k: int, padding: str = "zero",
                   score_mode: str = "softmax", return_scores: bool = False):
    """Full QKV roto-translation ASC: group-conv QKV, p4 affine maps,
    orientation-summed scores, aggregation over the window per orientation."""
    d_k = p.wq.shape[0]
    d_out = p.wv.shape[0]
    if p.d_k != d_k or d_k != d_out:
        raise ShapeMismatch(f"expected d_k == d_out, got {d_k} vs {d_out}")
    dh = _check_heads(d_k, p.heads, "p4 asc d_k")
    Q = _qkv_p4(f, p.wq)
    K = _qkv_p4(f, p.wk)
    V = _qkv_p4(f, p.wv)
    qa = p4_center_affine(Q, p.aq.psi, p.aq.beta)
    k2 = k * k
    psk = T.reshape(p.ak.psi, (d_k, 4, k2))
    bek = T.reshape(p.ak.beta, (d_k, k2))
    psv = T.reshape(p.av.psi, (d_out, 4, k2))
    bev = T.reshape(p.av.beta, (d_out, k2))
    out, sc = _p4_attention(qa, K, V, psk, bek, psv, bev,
                            k, p.heads, 1.0 / dh, padding, score_mode)
    return (out, sc) if return_scores else out


def _qkv_p4(f: Tensor, w: Tensor) -> Tensor:
    """QKV map on p4: [C_out, C_in] acts per orientation; [C_out, C_in, 4]
    is a 1x1 group convolution mixing orientations."""
    if w.ndim == 2:
        return pointwise(f, w)
    O, I, four = w.shape
    return _group_conv1x1(f, T.reshape(w, (O, I, 4, 1, 1)), None, 1)


# -- layer modules (used by the model builders) --------------------------------------


class SasaLayer(Module):
    """Local self-attention with factorized beta^K and an output projection."""

    def __init__(self, rng, d_in: int, d_out: int, heads: int = 8, k: int = 5):
        super().__init__()
        dh = _check_heads(d_out, heads, "sasa layer")
        if dh % 2:
            raise HeadDivisibility(f"per-head dim {dh} must be even")
        std = he_std(d_in)
        self.wq = self.param("wq", Tensor(rng.normal(0, std, (d_out, d_in))))
        self.wk = self.param("wk", Tensor(rng.normal(0, std, (d_out, d_in))))
        self.wv = self.param("wv", Tensor(rng.normal(0, std, (d_out, d_in))))
        self.beta_row = self.param("beta_row", Tensor(rng.normal(0, 1, (heads, dh // 2, k))))
        self.beta_col = self.param("beta_col", Tensor(rng.normal(0, 1, (heads, dh // 2, k))))
        self.proj = self.param("proj", Tensor(rng.normal(0, he_std(d_out), (d_out, d_out))))
        self.heads, self.k = heads, k

    def forward(self, x, ctx):
        y = sasa_self_attention(x, self.wq, self.wk, self.wv, self.beta_row,
                                self.beta_col, self.heads, self.k,
                                padding=ctx.padding("zero"))
        return pointwise(y, self.proj)


class SimpleAscLayer(Module):
    """Value map -> simplified ASC with one affine pair -> output projection."""

    def __init__(self, rng, d_in: int, d_out: int, heads: int = 8, k: int = 5):
        super().__init__()
        _check_heads(d_out, heads, "simple_asc layer")
        self.wv = self.param("wv", Tensor(rng.normal(0, he_std(d_in), (d_out, d_in))))
        self.psi = self.param("psi", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.beta = self.param("beta", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.proj = self.param("proj", Tensor(rng.normal(0, he_std(d_out), (d_out, d_out))))
        self.heads, self.k = heads, k

    def forward(self, x, ctx):
        v = pointwise(x, self.wv)
        y = simple_asc(v, AffineParams(self.psi, self.beta), self.k,
                       padding=ctx.padding("zero"), heads=self.heads)
        return pointwise(y, self.proj)


class AscLayer(Module):
    """Full planar ASC plus output projection."""

    def __init__(self, rng, d_in: int, d_out: int, heads: int = 8, k: int = 5):
        super().__init__()
        _check_heads(d_out, heads, "asc layer")
        std = he_std(d_in)
        wq = Tensor(rng.normal(0, std, (d_out, d_in)))
        wk = Tensor(rng.normal(0, std, (d_out, d_in)))
        wv = Tensor(rng.normal(0, std, (d_out, d_in)))
        self.wq = self.param("wq", wq)
        self.wk = self.param("wk", wk)
        self.wv = self.param("wv", wv)
        self.psi_q = self.param("psi_q", Tensor(rng.normal(0, 1, (d_out,))))
        self.beta_q = self.param("beta_q", Tensor(rng.normal(0, 1, (d_out,))))
        self.psi_k = self.param("psi_k", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.beta_k = self.param("beta_k", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.psi_v = self.param("psi_v", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.beta_v = self.param("beta_v", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.proj = self.param("proj", Tensor(rng.normal(0, he_std(d_out), (d_out, d_out))))
        self.heads, self.k, self.d = heads, k, d_out

    def params_struct(self) -> AscParams:
        return AscParams(self.wq, self.wk, self.wv,
                         AffineParams(self.psi_q, self.beta_q),
                         AffineParams(self.psi_k, self.beta_k),
                         AffineParams(self.psi_v, self.beta_v),
                         self.heads, self.d)

    def forward(self, x, ctx):
        y = asc_forward(x, self.params_struct(), self.k, padding=ctx.padding("zero"))
        return pointwise(y, self.proj)


class P4AscLayer(Module):
    """Roto-translation ASC: 1x1 group-conv QKV and projection, p4 affine maps."""

    def __init__(self, rng, d_in: int, d_out: int, heads: int = 8, k: int = 5):
        super().__init__()
        _check_heads(d_out, heads, "p4 asc layer")
        std = he_std(d_in * 4)
        self.wq = self.param("wq", Tensor(rng.normal(0, std, (d_out, d_in, 4))))
        self.wk = self.param("wk", Tensor(rng.normal(0, std, (d_out, d_in, 4))))
        self.wv = self.param("wv", Tensor(rng.normal(0, std, (d_out, d_in, 4))))
        self.psi_q = self.param("psi_q", Tensor(rng.normal(0, 1, (d_out, 4))))
        self.beta_q = self.param("beta_q", Tensor(rng.normal(0, 1, (d_out,))))
        self.psi_k = self.param("psi_k", Tensor(rng.normal(0, 1, (d_out, 4, k, k))))
        self.beta_k = self.param("beta_k", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.psi_v = self.param("psi_v", Tensor(rng.normal(0, 1, (d_out, 4, k, k))))
        self.beta_v = self.param("beta_v", Tensor(rng.normal(0, 1, (d_out, k, k))))
        self.proj = self.param("proj", Tensor(rng.normal(0, he_std(d_out * 4), (d_out, d_out, 4))))
        self.heads, self.k, self.d = heads, k, d_out

    def params_struct(self) -> AscParams:
        return AscParams(self.wq, self.wk, self.wv,
                         AffineParams(self.psi_q, self.beta_q),
                         AffineParams(self.psi_k, self.beta_k),
                         AffineParams(self.psi_v, self.beta_v),
                         self.heads, self.d)

    def forward(self, x, ctx):
        y = p4_asc_forward(x, self.params_struct(), self.k, padding=ctx.padding("zero"))
        return _qkv_p4(y, self.proj)
