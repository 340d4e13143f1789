"""Fused primitives with hand-written backward passes.

Layouts follow the usual NCHW convention.  Single images (C, H, W) are
accepted wherever a batch is and come back without the batch axis.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Function, Tensor, _sigmoid, _softplus, as_tensor

CROP_SIZE = 7


# ---------------------------------------------------------------------------
# convolution


class Conv2d(Function):
    def forward(self, x, w, *maybe_bias):
        n, c, h, wd = x.shape
        co, ci, k, k2 = w.shape
        s, p = self.stride, self.pad
        if ci != c:
            raise ValueError(f"conv2d: input has {c} channels but kernel expects C_in={ci} (kernel {w.shape})")
        if k != k2 or k % 2 == 0:
            raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho = (h + 2 * p - k) // s + 1
        wo = (wd + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d: kernel {k} larger than padded input {h + 2 * p}x{wd + 2 * p}")
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # (n, ho, wo, c, k, k) -> rows of length c*k*k
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
        wmat = w.reshape(co, -1)
        out = cols @ wmat.T
        if maybe_bias:
            out += maybe_bias[0]
        self.cols, self.w, self.xp_shape, self.x_shape = cols, w, xp.shape, x.shape
        self.ho, self.wo, self.has_bias = ho, wo, bool(maybe_bias)
        return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def backward(self, g):
        n, c, h, wd = self.x_shape
        co, ci, k, _ = self.w.shape
        s, p, ho, wo = self.stride, self.pad, self.ho, self.wo
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gmat.T @ self.cols).reshape(self.w.shape)
        gcols = (gmat @ self.w.reshape(co, -1)).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(self.xp_shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if self.has_bias:
            grads.append(gmat.sum(axis=0))
        return grads


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation of (N,) C_in, H, W input with a (C_out, C_in, k, k) kernel."""
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or as_tensor(kernel).ndim != 4:
        raise ValueError(f"conv2d: expected (N,)C,H,W input and 4D kernel, got {x.shape} and {as_tensor(kernel).shape}")
    args = (x, kernel) if bias is None else (x, kernel, bias)
    out = Conv2d.apply(*args, stride=stride, pad=pad)
    return out.reshape(out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# normalization and resampling


class GroupNorm(Function):
    def forward(self, x, gamma, beta):
        n, c, h, w = x.shape
        g = c // self.channels_per_group
        xg = x.reshape(n, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + self.eps)
        self.xhat = ((xg - mu) * self.inv).reshape(x.shape)
        self.gamma = gamma
        return self.xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, gout):
        n, c, h, w = gout.shape
        g = c // self.channels_per_group
        ggamma = (gout * self.xhat).sum(axis=(0, 2, 3))
        gbeta = gout.sum(axis=(0, 2, 3))
        gxhat = (gout * self.gamma[None, :, None, None]).reshape(n, g, -1)
        xhat = self.xhat.reshape(n, g, -1)
        gx = self.inv * (gxhat - gxhat.mean(axis=2, keepdims=True) - xhat * (gxhat * xhat).mean(axis=2, keepdims=True))
        return gx.reshape(gout.shape), ggamma, gbeta


def group_norm(x, gamma, beta, channels_per_group: int = 4, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    if x.shape[1] % channels_per_group:
        raise ValueError(f"group_norm: {x.shape[1]} channels not divisible into groups of {channels_per_group}")
    return GroupNorm.apply(x, gamma, beta, channels_per_group=channels_per_group, eps=eps)


class Upsample2x(Function):
    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def upsample_nearest2x(x) -> Tensor:
    return Upsample2x.apply(x)


# ---------------------------------------------------------------------------
# box feature extraction


class RoIAlign(Function):
    """One bilinear sample per output bin, differentiable in features and box corners.

    Box corners are input-image pixels; a feature cell i sits at pixel
    ``stride * (i + 0.5)``.
    """

    def forward(self, feat, boxes):
        n, c, h, w = feat.shape
        s, stride = self.out_size, float(self.stride)
        frac = (np.arange(s) + 0.5) / s
        x0, y0, x1, y1 = (boxes[:, i : i + 1] for i in range(4))
        fx = (x0 + frac * (x1 - x0)) / stride - 0.5
        fy = (y0 + frac * (y1 - y0)) / stride - 0.5
        self.mx = (fx >= 0) & (fx <= w - 1)
        self.my = (fy >= 0) & (fy <= h - 1)
        fx, fy = np.clip(fx, 0, w - 1), np.clip(fy, 0, h - 1)
        ix0 = np.minimum(np.floor(fx).astype(int), max(w - 2, 0))
        iy0 = np.minimum(np.floor(fy).astype(int), max(h - 2, 0))
        ix1, iy1 = np.minimum(ix0 + 1, w - 1), np.minimum(iy0 + 1, h - 1)
        wx, wy = fx - ix0, fy - iy0
        b = self.batch_idx[:, None, None]
        # gathered corners: (K, S_y, S_x, C)
        f00 = feat[b, :, iy0[:, :, None], ix0[:, None, :]]
        f01 = feat[b, :, iy0[:, :, None], ix1[:, None, :]]
        f10 = feat[b, :, iy1[:, :, None], ix0[:, None, :]]
        f11 = feat[b, :, iy1[:, :, None], ix1[:, None, :]]
        wxe, wye = wx[:, None, :, None], wy[:, :, None, None]
        out = (1 - wye) * ((1 - wxe) * f00 + wxe * f01) + wye * ((1 - wxe) * f10 + wxe * f11)
        self.saved = (feat.shape, ix0, ix1, iy0, iy1, wx, wy, f00, f01, f10, f11, frac)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, g):
        shape, ix0, ix1, iy0, iy1, wx, wy, f00, f01, f10, f11, frac = self.saved
        gk = g.transpose(0, 2, 3, 1)  # (K, Sy, Sx, C)
        wxe, wye = wx[:, None, :, None], wy[:, :, None, None]
        gfeat = np.zeros(shape)
        b = self.batch_idx[:, None, None]
        for yy, xx, wgt in (
            (iy0, ix0, (1 - wye) * (1 - wxe)),
            (iy0, ix1, (1 - wye) * wxe),
            (iy1, ix0, wye * (1 - wxe)),
            (iy1, ix1, wye * wxe),
        ):
            bb, yb, xb = np.broadcast_arrays(b, yy[:, :, None], xx[:, None, :])
            np.add.at(gfeat, (bb, slice(None), yb, xb), gk * wgt)
        dfx = ((1 - wye) * (f01 - f00) + wye * (f11 - f10)) * gk  # d/d fx, (K,Sy,Sx,C)
        dfy = ((1 - wxe) * (f10 - f00) + wxe * (f11 - f01)) * gk
        dfx = dfx.sum(axis=(1, 3)) * self.mx  # (K, Sx)
        dfy = dfy.sum(axis=(2, 3)) * self.my  # (K, Sy)
        inv = 1.0 / self.stride
        gboxes = np.stack(
            [
                (dfx * (1 - frac)).sum(axis=1) * inv,
                (dfy * (1 - frac)).sum(axis=1) * inv,
                (dfx * frac).sum(axis=1) * inv,
                (dfy * frac).sum(axis=1) * inv,
            ],
            axis=1,
        )
        return gfeat, gboxes


def roi_align(features, boxes, batch_idx, stride: int, out_size: int = CROP_SIZE) -> Tensor:
    """Crop-and-resize K boxes from a (N, C, H, W) map into (K, C, out, out)."""
    batch_idx = np.asarray(batch_idx, dtype=int)
    return RoIAlign.apply(features, boxes, batch_idx=batch_idx, stride=stride, out_size=out_size)


def bilinear_crop_resize(feature_map, box, out_size: int = CROP_SIZE, stride: int = 1) -> Tensor:
    """Single (C, H, W) map and one (x_min, y_min, x_max, y_max) box -> (C, out, out)."""
    fm = as_tensor(feature_map)
    out = roi_align(fm.reshape(1, *fm.shape), as_tensor(box).reshape(1, 4), [0], stride, out_size)
    return out.reshape(out.shape[1:])


# ---------------------------------------------------------------------------
# vector ops and losses


class L2Normalize(Function):
    def forward(self, x):
        norm = np.sqrt((x * x).sum(axis=self.axis, keepdims=True))
        self.inv = np.where(norm > 0, 1.0 / np.where(norm > 0, norm, 1.0), 0.0)
        self.out = x * self.inv
        return self.out

    def backward(self, g):
        dot = (g * self.out).sum(axis=self.axis, keepdims=True)
        return ((g - self.out * dot) * self.inv,)


def l2_normalize(x, axis: int = -1) -> Tensor:
    return L2Normalize.apply(x, axis=axis)


class LogSumExp(Function):
    """Masked, max-shifted log-sum-exp; an all-masked slice gives -inf."""

    def forward(self, x):
        mask = np.ones(x.shape, bool) if self.mask is None else np.broadcast_to(self.mask, x.shape)
        xm = np.where(mask, x, -np.inf)
        m = xm.max(axis=self.axis, keepdims=True)
        m_safe = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x, 0.0) - m_safe), 0.0)
        tot = e.sum(axis=self.axis, keepdims=True)
        with np.errstate(divide="ignore"):
            out = m_safe + np.log(tot)
        self.weights = np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.0)
        return out if self.keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (g * self.weights,)


def log_sum_exp(x, axis: int = -1, mask=None, keepdims: bool = False) -> Tensor:
    return LogSumExp.apply(x, axis=axis, mask=None if mask is None else np.asarray(mask, bool), keepdims=keepdims)


class SigmoidFocalLoss(Function):
    def forward(self, x, t):
        p = _sigmoid(x)
        log_p, log_q = -_softplus(-x), -_softplus(x)
        a, gm = self.alpha, self.gamma
        pos = -a * (1 - p) ** gm * log_p
        neg = -(1 - a) * p**gm * log_q
        self.saved = (p, log_p, log_q, t)
        return t * pos + (1 - t) * neg

    def backward(self, g):
        p, log_p, log_q, t = self.saved
        a, gm = self.alpha, self.gamma
        dpos = a * (1 - p) ** gm * (gm * p * log_p - (1 - p))
        dneg = (1 - a) * p**gm * (p - gm * (1 - p) * log_q)
        return g * (t * dpos + (1 - t) * dneg), None


def sigmoid_focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss on logits against {0,1} targets."""
    return SigmoidFocalLoss.apply(logits, np.asarray(targets, dtype=np.float64), alpha=alpha, gamma=gamma)


class BCEWithLogits(Function):
    def forward(self, x, t):
        self.x, self.t = x, t
        return _softplus(x) - t * x

    def backward(self, g):
        return g * (_sigmoid(self.x) - self.t), None


def bce_with_logits(logits, targets) -> Tensor:
    return BCEWithLogits.apply(logits, np.asarray(targets, dtype=np.float64))
