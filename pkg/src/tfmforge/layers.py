"""Parameterized layers: convolutions, linear, normalization, initialization.

All layers are pure functions of (input, ParamSet) built on the tensor
engine's custom-op hook, with hand-derived backward rules.  Spatial inputs may
be given per-sample as C x H x W or batched as B x C x H x W; gradients flow
to inputs, weights and biases alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    transposed: bool = False
    output_padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.stride, *self.kernel) < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding < 0 or self.output_padding < 0:
            raise ValueError(f"invalid conv spec {self}")
        if self.output_padding and not self.transposed:
            raise ValueError("output_padding only applies to transposed convs")

    def out_size(self, h: int) -> int:
        kh = self.kernel[0]
        if self.transposed:
            return (h - 1) * self.stride - 2 * self.padding + kh + self.output_padding
        return (h + 2 * self.padding - kh) // self.stride + 1


@dataclass(frozen=True)
class NormSpec:
    mode: str  # "group" | "layer"
    groups: int = 1
    eps: float = 1e-5

    def __post_init__(self):
        if self.mode not in ("group", "layer"):
            raise ValueError(f"unknown norm mode {self.mode!r}")


class ParamSet:
    """Ordered name -> Tensor map; iteration order defines checkpoint layout."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()


# -- convolution ---------------------------------------------------------


def _as_batched(x: Tensor):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ValueError(f"expected CxHxW or BxCxHxW input, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    # xp: padded input B x C x Hp x Wp -> B x (oh*ow) x (C*kh*kw)
    b, c = xp.shape[:2]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # B x C x oh x ow x kh x kw
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int,
            padding: int, oh: int, ow: int) -> np.ndarray:
    # cols: B x (oh*ow) x (C*kh*kw) scattered back into B x C x H x W
    b, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[..., i, j]
    if padding:
        return xp[:, :, padding:hp - padding, padding:wp - padding]
    return xp


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2D cross-correlation; weight is Cout x Cin x kh x kw, bias per Cout."""
    if spec.transposed:
        raise ValueError("conv2d got a transposed spec; use conv_transpose2d")
    xb, squeeze = _as_batched(x)
    b, c, h, w = xb.shape
    kh, kw = spec.kernel
    if c != spec.in_channels or weight.shape != (spec.out_channels, c, kh, kw):
        raise ValueError(
            f"conv2d channel mismatch: input {xb.shape}, weight {weight.shape}, spec {spec}")
    oh, ow = spec.out_size(h), spec.out_size(w)
    xp = np.pad(xb, ((0, 0), (0, 0), (spec.padding,) * 2, (spec.padding,) * 2))
    cols = _im2col(xp, kh, kw, spec.stride, oh, ow)
    wmat = weight.data.reshape(spec.out_channels, c * kh * kw)
    out = cols @ wmat.T  # B x (oh*ow) x Cout
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(b, spec.out_channels, oh, ow)

    def backward(g):
        if squeeze:
            g = g[None]
        gmat = g.reshape(b, spec.out_channels, oh * ow).transpose(0, 2, 1)
        gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        gcols = gmat @ wmat
        gx = _col2im(gcols, (b, c, h, w), kh, kw, spec.stride, spec.padding, oh, ow)
        gb = gmat.sum(axis=(0, 1)) if bias is not None else None
        if squeeze:
            gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out_t = out[0] if squeeze else out
    return Tensor._from_op(np.ascontiguousarray(out_t), parents, backward)


def conv_transpose2d(x: Tensor, spec: ConvSpec, weight: Tensor,
                     bias: Tensor | None = None) -> Tensor:
    """Transposed conv; the exact linear adjoint of conv2d with shared weights.

    Weight layout is Cin x Cout x kh x kw, matching the forward conv's
    Cout x Cin x kh x kw when the two share storage.
    """
    if not spec.transposed:
        raise ValueError("conv_transpose2d needs a transposed spec")
    xb, squeeze = _as_batched(x)
    b, c, h, w = xb.shape
    kh, kw = spec.kernel
    if c != spec.in_channels or weight.shape != (c, spec.out_channels, kh, kw):
        raise ValueError(
            f"conv_transpose2d channel mismatch: input {xb.shape}, weight {weight.shape}, spec {spec}")
    oh, ow = spec.out_size(h), spec.out_size(w)
    co = spec.out_channels
    wmat = weight.data.reshape(c, co * kh * kw)
    xmat = xb.reshape(b, c, h * w).transpose(0, 2, 1)  # B x (h*w) x Cin
    cols = xmat @ wmat  # B x (h*w) x (Cout*kh*kw)
    # scatter into the (possibly extended) output, then trim output_padding
    full_oh, full_ow = oh - spec.output_padding, ow - spec.output_padding
    out = _col2im(cols, (b, co, full_oh, full_ow), kh, kw, spec.stride,
                  spec.padding, h, w)
    if spec.output_padding:
        out = np.pad(out, ((0, 0), (0, 0), (0, spec.output_padding),
                           (0, spec.output_padding)))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        if squeeze:
            g = g[None]
        gcore = g[:, :, :full_oh, :full_ow]
        gp = np.pad(gcore, ((0, 0), (0, 0), (spec.padding,) * 2, (spec.padding,) * 2))
        gcols = _im2col(gp, kh, kw, spec.stride, h, w)  # B x (h*w) x (Cout*kh*kw)
        gx = (gcols @ wmat.T).transpose(0, 2, 1).reshape(b, c, h, w)
        gw = np.tensordot(xmat, gcols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if squeeze:
            gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out_t = out[0] if squeeze else out
    return Tensor._from_op(np.ascontiguousarray(out_t), parents, backward)


# -- linear --------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ W (+ b) along the last axis; W is D_in x D_out."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"linear: input last extent {x.shape[-1]} != D_in {din}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T
        lead = g.reshape(-1, dout)
        gw = x.data.reshape(-1, din).T @ lead
        gb = lead.sum(axis=0) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


# -- normalization -------------------------------------------------------


def normalize(x: Tensor, spec: NormSpec, gamma: Tensor, beta: Tensor) -> Tensor:
    """Group or layer normalization with learnable per-channel/feature affine.

    Group mode expects CxHxW or BxCxHxW with gamma/beta of length C; layer
    mode normalizes over the last axis with gamma/beta of that length.
    """
    if spec.mode == "group":
        xb, squeeze = _as_batched(x)
        b, c, h, w = xb.shape
        if c % spec.groups != 0:
            raise ValueError(f"groups {spec.groups} does not divide channels {c}")
        gshape = (b, spec.groups, (c // spec.groups) * h * w)
        affine_shape = (1, c, 1, 1)
        red_axes = (0, 2, 3)
    else:
        xb, squeeze = x.data, False
        d = xb.shape[-1]
        gshape = (-1, 1, d)
        affine_shape = (1,) * (xb.ndim - 1) + (d,)
        red_axes = tuple(range(xb.ndim - 1))
        c = d

    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"affine params must have shape ({c},)")

    grouped = xb.reshape(gshape)
    mean = grouped.mean(axis=-1, keepdims=True)
    var = grouped.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + spec.eps)
    xhat = ((grouped - mean) * invstd).reshape(xb.shape)
    gam = gamma.data.reshape(affine_shape)
    out = xhat * gam + beta.data.reshape(affine_shape)

    def backward(g):
        if squeeze:
            g = g[None]
        ggamma = (g * xhat).sum(axis=red_axes)
        gbeta = g.sum(axis=red_axes)
        gh = (g * gam).reshape(gshape)
        xh = xhat.reshape(gshape)
        n = gh.shape[-1]
        gsum = gh.sum(axis=-1, keepdims=True)
        gdot = (gh * xh).sum(axis=-1, keepdims=True)
        gx = (invstd / n) * (n * gh - gsum - xh * gdot)
        gx = gx.reshape(xb.shape)
        if squeeze:
            gx = gx[0]
        return gx, ggamma, gbeta

    out_t = out[0] if squeeze else out
    return Tensor._from_op(np.ascontiguousarray(out_t), (x, gamma, beta), backward)


# -- upsampling helper for convolutional decoders ------------------------


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor spatial upsampling by an integer factor."""
    if factor == 1:
        return Tensor._from_op(x.data, (x,), lambda g: (g,))
    xb, squeeze = _as_batched(x)
    out = xb.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        if squeeze:
            g = g[None]
        b, c, oh, ow = g.shape
        gx = g.reshape(b, c, oh // factor, factor, ow // factor, factor).sum(axis=(3, 5))
        if squeeze:
            gx = gx[0]
        return (gx,)

    out_t = out[0] if squeeze else out
    return Tensor._from_op(np.ascontiguousarray(out_t), (x,), backward)


# -- initialization ------------------------------------------------------


def kaiming_uniform(shape, fan_in: int, rng, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -bound, bound).astype(dtype)


def init_conv(params: ParamSet, name: str, spec: ConvSpec, rng, dtype=np.float64,
              gain: float = 1.0):
    kh, kw = spec.kernel
    if spec.transposed:
        shape = (spec.in_channels, spec.out_channels, kh, kw)
        fan_in = spec.in_channels * kh * kw
    else:
        shape = (spec.out_channels, spec.in_channels, kh, kw)
        fan_in = spec.in_channels * kh * kw
    w = Tensor(gain * kaiming_uniform(shape, fan_in, rng.child(f"{name}.weight"),
                                      dtype),
               requires_grad=True)
    b = Tensor.zeros((spec.out_channels,), requires_grad=True, dtype=dtype)
    params.add(f"{name}.weight", w)
    params.add(f"{name}.bias", b)


def init_linear(params: ParamSet, name: str, din: int, dout: int, rng,
                bias: bool = True, dtype=np.float64):
    w = Tensor(kaiming_uniform((din, dout), din, rng.child(f"{name}.weight"), dtype),
               requires_grad=True)
    params.add(f"{name}.weight", w)
    if bias:
        params.add(f"{name}.bias", Tensor.zeros((dout,), requires_grad=True, dtype=dtype))


def init_norm(params: ParamSet, name: str, channels: int, dtype=np.float64):
    params.add(f"{name}.gamma", Tensor(np.ones(channels, dtype=dtype), requires_grad=True))
    params.add(f"{name}.beta", Tensor.zeros((channels,), requires_grad=True, dtype=dtype))


def init_embedding(params: ParamSet, name: str, rows: int, dim: int, rng,
                   dtype=np.float64):
    table = rng.child(name).normal((rows, dim), 0.0, 0.02).astype(dtype)
    params.add(name, Tensor(table, requires_grad=True))
