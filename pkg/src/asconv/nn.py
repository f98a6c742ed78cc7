"""Convolutional building blocks: planar/lifting/p4 convolution, pointwise
maps, batch normalization, pooling and the classifier head.

Feature map layouts: planar ``[B, C, H, W]``, p4 ``[B, C, 4, H, W]`` with the
orientation axis indexing the four quarter-turns.  Convolutions follow the
cross-correlation orientation ``out(x) = sum_y f(y) psi(y - x)``.

Model forward passes use zero padding; the equivariance checks pass a
circular-padding override through ``Ctx`` so the group actions are exact
bijections on the torus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (BatchTooSmall, KernelLargerThanPaddedInput, OddSpatialDim,
                     ShapeMismatch)
from .groups import rotate_filter_planar, transform_filter_p4
from .tensor import Tensor


@dataclass
class Ctx:
    """Per-forward context: train/eval mode and optional padding override."""
    train: bool = False
    pad: str | None = None

    def padding(self, default: str) -> str:
        return self.pad if self.pad is not None else default


EVAL = Ctx(train=False)


def pad2d(x: np.ndarray, m: int, mode: str) -> np.ndarray:
    """Pad the trailing two axes by ``m`` (zero or circular wrap)."""
    if m == 0:
        return x
    spec = [(0, 0)] * (x.ndim - 2) + [(m, m), (m, m)]
    if mode == "zero":
        return np.pad(x, spec)
    if mode == "circular":
        return np.pad(x, spec, mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}")


def unpad2d_grad(gp: np.ndarray, m: int, mode: str) -> np.ndarray:
    """Adjoint of pad2d: crop (zero) or fold wrapped borders back (circular)."""
    if m == 0:
        return gp
    if mode == "zero":
        return np.ascontiguousarray(gp[..., m:-m, m:-m])
    H = gp.shape[-2] - 2 * m
    W = gp.shape[-1] - 2 * m
    g = gp.astype(np.float64).copy()
    g[..., m:2 * m, :] += g[..., m + H:, :]
    g[..., H:H + m, :] += g[..., :m, :]
    core_rows = g[..., m:m + H, :]
    core_rows[..., m:2 * m] += core_rows[..., m + W:]
    core_rows[..., W:W + m] += core_rows[..., :m]
    return np.ascontiguousarray(core_rows[..., m:m + W]).astype(np.float32)


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> [B, C*k*k, Ho*Wo] patch matrix (copies)."""
    B, C, Hp, Wp = xp.shape
    Ho, Wo = Hp - k + 1, Wp - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    col = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo)
    return np.ascontiguousarray(col)


def _col2im(gcol: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the padded map."""
    B, C, Hp, Wp = shape
    Ho, Wo = Hp - k + 1, Wp - k + 1
    g = gcol.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros(shape, dtype=np.float64)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + Ho, v:v + Wo] += g[:, :, u, v]
    return out.astype(np.float32)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "zero", pad_width: int | None = None) -> Tensor:
    """Planar convolution [B,Cin,H,W] * [Cout,Cin,k,k] -> [B,Cout,Ho,Wo].

    Stride is applied by subsampling the full stride-1 response.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input/filter, got {x.shape}, {w.shape}")
    O, I, k, k2_ = w.shape
    if k != k2_ or k % 2 == 0:
        raise ShapeMismatch(f"filters must be odd square, got {w.shape}")
    if x.shape[1] != I:
        raise ShapeMismatch(f"channel mismatch: input {x.shape[1]} vs filter {I}")
    m = (k - 1) // 2 if pad_width is None else pad_width
    xp = pad2d(x.data, m, padding)
    if k > xp.shape[-2] or k > xp.shape[-1]:
        raise KernelLargerThanPaddedInput(
            f"kernel {k} exceeds padded input {xp.shape[-2:]}")
    col = _im2col(xp, k).astype(np.float64)
    w2 = w.data.reshape(O, I * k * k).astype(np.float64)
    Ho, Wo = xp.shape[-2] - k + 1, xp.shape[-1] - k + 1
    full = (w2 @ col).astype(np.float32).reshape(x.shape[0], O, Ho, Wo)
    out_data = full[:, :, ::stride, ::stride].copy() if stride > 1 else full
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def bw(g):
        if stride > 1:
            gf = np.zeros((x.shape[0], O, Ho, Wo), dtype=np.float32)
            gf[:, :, ::stride, ::stride] = g
        else:
            gf = g
        g2 = gf.reshape(x.shape[0], O, Ho * Wo).astype(np.float64)
        dw = np.einsum("boy,bcy->oc", g2, col, optimize=True).reshape(w.shape)
        gcol = np.matmul(w2.T, g2).astype(np.float32)
        dxp = _col2im(gcol.reshape(x.shape[0], I * k * k, Ho * Wo), xp.shape, k)
        contribs = [(w, dw.astype(np.float32)), (x, unpad2d_grad(dxp, m, padding))]
        if bias is not None:
            contribs.append((bias, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)))
        return contribs

    inputs = (x, w) if bias is None else (x, w, bias)
    return T._finish(out_data, bw, inputs, "conv2d output")


def lifting_conv(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                 padding: str = "zero") -> Tensor:
    """Evaluate a planar filter at all four rotations: [B,Cin,H,W] -> [B,Cout,4,H,W].

    Orientation slice r is conv2d with the filter rotated by r quarter-turns.
    """
    slices = []
    for r in range(4):
        wr = Tensor(rotate_filter_planar(w.data, r))
        wr.requires_grad = w.requires_grad
        slices.append((r, wr))
    outs = []
    for r, wr in slices:
        y = conv2d(x, wr, None, stride=stride, padding=padding)
        outs.append(y.data)
    out_data = np.stack(outs, axis=2)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None, None]

    # single fused node: redo the conv backward per rotation, un-rotate dW
    O, I, k, _ = w.shape
    m = (k - 1) // 2
    xp = pad2d(x.data, m, padding)
    col = _im2col(xp, k).astype(np.float64)
    Ho, Wo = xp.shape[-2] - k + 1, xp.shape[-1] - k + 1

    def bw(g):
        B = x.shape[0]
        dw = np.zeros(w.shape, dtype=np.float64)
        dxp = np.zeros(xp.shape, dtype=np.float64)
        for r in range(4):
            gr = g[:, :, r]
            if stride > 1:
                gf = np.zeros((B, O, Ho, Wo), dtype=np.float32)
                gf[:, :, ::stride, ::stride] = gr
            else:
                gf = gr
            g2 = gf.reshape(B, O, Ho * Wo).astype(np.float64)
            dwr = np.einsum("boy,bcy->oc", g2, col, optimize=True).reshape(w.shape)
            dw += rotate_filter_planar(dwr, -r)
            w2 = rotate_filter_planar(w.data, r).reshape(O, I * k * k).astype(np.float64)
            gcol = np.matmul(w2.T, g2).astype(np.float32)
            dxp += _col2im(gcol.reshape(B, I * k * k, Ho * Wo), xp.shape, k)
        contribs = [(w, dw.astype(np.float32)),
                    (x, unpad2d_grad(dxp.astype(np.float32), m, padding))]
        if bias is not None:
            contribs.append((bias, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32)))
        return contribs

    inputs = (x, w) if bias is None else (x, w, bias)
    return T._finish(out_data, bw, inputs, "lifting_conv output")


def group_conv(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
               padding: str = "zero") -> Tensor:
    """p4 convolution: [B,Cin,4,H,W] * [Cout,Cin,4,k,k] -> [B,Cout,4,H,W].

    out(P,x) = sum_{R,y} f(R,y) psi(P^-1 R, P^-1 (y-x)); realized as four
    planar convolutions on the flattened (channel, orientation) axis with the
    P-transformed filter.
    """
    if x.ndim != 5 or x.shape[2] != 4:
        raise ShapeMismatch(f"group_conv input must be [B,C,4,H,W], got {x.shape}")
    O, I, four, k, _ = w.shape
    if four != 4 or x.shape[1] != I:
        raise ShapeMismatch(f"filter {w.shape} incompatible with input {x.shape}")
    B, _, _, H, W = x.shape
    if k == 1:
        return _group_conv1x1(x, w, bias, stride)
    m = (k - 1) // 2
    xf = x.data.reshape(B, I * 4, H, W)
    xp = pad2d(xf, m, padding)
    col = _im2col(xp, k).astype(np.float64)
    Ho, Wo = xp.shape[-2] - k + 1, xp.shape[-1] - k + 1
    outs = []
    wps = []
    for P in range(4):
        wp = transform_filter_p4(w.data, P).reshape(O, I * 4 * k * k)
        wps.append(wp.astype(np.float64))
        full = (wps[P] @ col).astype(np.float32).reshape(B, O, Ho, Wo)
        outs.append(full[:, :, ::stride, ::stride] if stride > 1 else full)
    out_data = np.stack(outs, axis=2)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None, None]

    def bw(g):
        dw = np.zeros(w.shape, dtype=np.float64)
        dxp = np.zeros(xp.shape, dtype=np.float64)
        for P in range(4):
            gr = g[:, :, P]
            if stride > 1:
                gf = np.zeros((B, O, Ho, Wo), dtype=np.float32)
                gf[:, :, ::stride, ::stride] = gr
            else:
                gf = gr
            g2 = gf.reshape(B, O, Ho * Wo).astype(np.float64)
            dwp = np.einsum("boy,bcy->oc", g2, col, optimize=True)
            # adjoint of the filter transform is the inverse transform
            dw += transform_filter_p4(dwp.reshape(O, I, 4, k, k), -P)
            gcol = np.matmul(wps[P].T, g2).astype(np.float32)
            dxp += _col2im(gcol.reshape(B, I * 4 * k * k, Ho * Wo), xp.shape, k)
        dx = unpad2d_grad(dxp.astype(np.float32), m, padding).reshape(x.shape)
        contribs = [(w, dw.astype(np.float32)), (x, dx)]
        if bias is not None:
            contribs.append((bias, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32)))
        return contribs

    inputs = (x, w) if bias is None else (x, w, bias)
    return T._finish(out_data, bw, inputs, "group_conv output")


def _group_conv1x1(x: Tensor, w: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    """Fast path for 1x1 p4 filters: out[b,o,P] = sum_{i,m} f[b,i,(P+m)%4] w[o,i,m]."""
    B, I, _, H, W = x.shape
    O = w.shape[0]
    xf = x.data.reshape(B, I, 4, H * W).astype(np.float64)
    wf = w.data.reshape(O, I, 4).astype(np.float64)
    out = np.empty((B, O, 4, H, W), dtype=np.float32)
    for P in range(4):
        rolled = np.take(xf, [(P + mm) % 4 for mm in range(4)], axis=2)
        out[:, :, P] = np.einsum("oim,bimz->boz", wf, rolled,
                                 optimize=True).astype(np.float32).reshape(B, O, H, W)
    if stride > 1:
        out = np.ascontiguousarray(out[:, :, :, ::stride, ::stride])

    def bw(g):
        if stride > 1:
            gf = np.zeros((B, O, 4, H, W), dtype=np.float32)
            gf[:, :, :, ::stride, ::stride] = g
        else:
            gf = g
        g64 = gf.reshape(B, O, 4, H * W).astype(np.float64)
        dw = np.zeros((O, I, 4), dtype=np.float64)
        dx = np.zeros((B, I, 4, H * W), dtype=np.float64)
        for P in range(4):
            idx = [(P + mm) % 4 for mm in range(4)]
            rolled = np.take(xf, idx, axis=2)
            dw += np.einsum("boz,bimz->oim", g64[:, :, P], rolled, optimize=True)
            dr = np.einsum("oim,boz->bimz", wf, g64[:, :, P], optimize=True)
            for mm in range(4):
                dx[:, :, idx[mm]] += dr[:, :, mm]
        contribs = [(w, dw.reshape(w.shape).astype(np.float32)),
                    (x, dx.reshape(x.shape).astype(np.float32))]
        if bias is not None:
            contribs.append((bias, g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32)))
        return contribs

    if bias is not None:
        out = out + bias.data[None, :, None, None, None]
    inputs = (x, w) if bias is None else (x, w, bias)
    return T._finish(out, bw, inputs, "group_conv1x1 output")


def pointwise(x: Tensor, w: Tensor) -> Tensor:
    """Pure channel mixing at every (orientation,) spatial site: w is [Cout, Cin].

    On p4 maps this is the group convolution whose filter is supported at the
    group identity, so it commutes exactly with the group action.
    """
    if w.ndim != 2:
        raise ShapeMismatch(f"pointwise weight must be rank 2, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"channels {x.shape[1]} vs weight {w.shape}")
    B, I = x.shape[0], x.shape[1]
    O = w.shape[0]
    rest = x.shape[2:]
    xf = x.data.reshape(B, I, -1).astype(np.float64)
    w64 = w.data.astype(np.float64)
    out_data = np.matmul(w64, xf).astype(np.float32).reshape((B, O) + rest)

    def bw(g):
        g2 = g.reshape(B, O, -1).astype(np.float64)
        dw = np.einsum("boz,biz->oi", g2, xf, optimize=True)
        dx = np.matmul(w64.T, g2).astype(np.float32).reshape(x.shape)
        return [(w, dw.astype(np.float32)), (x, dx)]

    return T._finish(out_data, bw, (x, w), "pointwise output")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, train: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; p4 maps pool statistics over orientations too."""
    axes = tuple(i for i in range(x.ndim) if i != 1)
    n = int(np.prod([x.shape[i] for i in axes]))
    if train:
        if x.shape[0] < 2:
            raise BatchTooSmall("batchnorm in train mode needs batch >= 2")
        x64 = x.data.astype(np.float64)
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    invstd = 1.0 / np.sqrt(var + eps)
    shape = [1] * x.ndim
    shape[1] = -1
    xhat = ((x.data - mu.reshape(shape).astype(np.float32))
            * invstd.reshape(shape).astype(np.float32))
    out_data = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        g64 = g.astype(np.float64)
        dgamma = (g64 * xhat).sum(axis=axes)
        dbeta = g64.sum(axis=axes)
        gs = gamma.data.astype(np.float64).reshape(shape) * invstd.reshape(shape)
        if train:
            dx = gs * (g64 - dbeta.reshape(shape) / n
                       - xhat * (dgamma.reshape(shape) / n))
        else:
            dx = gs * g64
        return [(x, dx.astype(np.float32)),
                (gamma, dgamma.astype(np.float32)),
                (beta, dbeta.astype(np.float32))]

    return T._finish(out_data.astype(np.float32), bw, (x, gamma, beta), "batchnorm output")


def avgpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling on the trailing two axes."""
    H, W = x.shape[-2], x.shape[-1]
    if H % 2 or W % 2:
        raise OddSpatialDim(f"avgpool2 needs even spatial dims, got {H}x{W}")
    lead = x.shape[:-2]
    v = x.data.reshape(lead + (H // 2, 2, W // 2, 2)).astype(np.float64)
    out_data = v.mean(axis=(-3, -1)).astype(np.float32)

    def bw(g):
        ge = np.broadcast_to((g / 4.0)[..., :, None, :, None],
                             lead + (H // 2, 2, W // 2, 2))
        return [(x, np.ascontiguousarray(ge).reshape(x.shape).astype(np.float32))]

    return T._finish(out_data, bw, (x,), "avgpool2 output")


def global_pool_and_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Mean over spatial (and orientation) axes, then an affine map to logits."""
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"channels {x.shape[1]} vs head weight {w.shape}")
    axes = tuple(range(2, x.ndim))
    pooled = T.reduce_mean(x, axes)           # [B, C]
    return T.add(T.matmul(pooled, T.transpose(w)), b)


# -- module system ---------------------------------------------------------------


class Module:
    """Container for parameters, buffers and child modules (explicit registration)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        self._params[name] = t
        return t

    def buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        self._buffers[name] = arr
        return arr

    def child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, a in self._buffers.items():
            yield prefix + name, a
        for cname, c in self._children.items():
            yield from c.named_buffers(prefix + cname + ".")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for cname, c in self._children.items():
            yield from c.named_modules(prefix + cname + ".")

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of all parameters and buffers."""
        out = {}
        for name, p in self.named_parameters():
            out["param." + name] = p.data
        for name, a in self.named_buffers():
            out["buffer." + name] = a
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise ShapeMismatch(f"state mismatch, offending keys: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = state[name]
            if arr.shape != src.shape:
                raise ShapeMismatch(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        return self.forward(x, ctx)


def he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int,
                 stride: int = 1, padding: str = "zero"):
        super().__init__()
        std = he_std(cin * k * k)
        self.w = self.param("w", Tensor(rng.normal(0.0, std, (cout, cin, k, k))))
        self.stride = stride
        self.pad_default = padding

    def forward(self, x, ctx):
        return conv2d(x, self.w, stride=self.stride, padding=ctx.padding(self.pad_default))


class LiftingConv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, padding: str = "zero"):
        super().__init__()
        std = he_std(cin * k * k)
        self.w = self.param("w", Tensor(rng.normal(0.0, std, (cout, cin, k, k))))
        self.pad_default = padding

    def forward(self, x, ctx):
        return lifting_conv(x, self.w, padding=ctx.padding(self.pad_default))


class GroupConv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1,
                 padding: str = "zero"):
        super().__init__()
        # p4 fan-in counts the four orientations
        std = he_std(cin * 4 * k * k)
        self.w = self.param("w", Tensor(rng.normal(0.0, std, (cout, cin, 4, k, k))))
        self.stride = stride
        self.pad_default = padding

    def forward(self, x, ctx):
        return group_conv(x, self.w, stride=self.stride, padding=ctx.padding(self.pad_default))


class BatchNorm(Module):
    def __init__(self, channels: int, gamma_init: float = 1.0):
        super().__init__()
        self.gamma = self.param("gamma", Tensor(np.full(channels, gamma_init, np.float32)))
        self.beta = self.param("beta", Tensor(np.zeros(channels, np.float32)))
        self.running_mean = self.buffer("running_mean", np.zeros(channels, np.float64))
        self.running_var = self.buffer("running_var", np.ones(channels, np.float64))

    def forward(self, x, ctx):
        return batchnorm(x, self.gamma, self.beta, self.running_mean,
                         self.running_var, train=ctx.train)


class PointwiseConv(Module):
    """1x1 convolution as pure channel mixing (shared across group elements)."""

    def __init__(self, rng, cin: int, cout: int):
        super().__init__()
        self.w = self.param("w", Tensor(rng.normal(0.0, he_std(cin), (cout, cin))))

    def forward(self, x, ctx):
        return pointwise(x, self.w)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int):
        super().__init__()
        self.w = self.param("w", Tensor(rng.normal(0.0, he_std(cin), (cout, cin))))
        self.b = self.param("b", Tensor(np.zeros(cout, np.float32)))
