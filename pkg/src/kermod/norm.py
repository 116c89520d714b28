"""Batch and group normalization, seen as implicit weight modulation.

When a normalization layer feeds a convolution, its per-channel affine
output is algebraically a rescaling of the downstream kernels plus a
constant offset map:

    conv(norm(x), W) == conv(x * (gamma/sigma), W) + conv(const(beta - gamma*mu/sigma), W)

``implicit_modulation_check`` evaluates both sides and reports their max
disagreement. ``fold_norm_into_conv`` handles the reversed (conv-then-norm)
case used at inference time.

Batch norm keeps running per-channel statistics updated in train mode and
uses them in eval mode. Group norm computes per-sample group statistics in
both modes (it is stateless, which is why it tolerates tiny batches); its
running buffers stay at their identity defaults.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_KINDS = ("batch", "group")


class NormError(Exception):
    pass


@dataclass
class NormLayer:
    """Per-channel affine normalization state.

    ``running_sigma`` stores a standard deviation, never a variance, and is
    floored away from zero by construction (sqrt(var + eps) updates).
    """
    kind: str
    channels: int
    groups: int = 1
    gamma: Tensor = None
    beta: Tensor = None
    running_mu: np.ndarray = None
    running_sigma: np.ndarray = None
    eps: float = 1e-5
    momentum: float = 0.1
    batches_tracked: int = 0

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise NormError(f"unknown norm kind {self.kind!r}; expected one of {NORM_KINDS}")
        c = self.channels
        if self.kind == "group":
            if c % self.groups != 0:
                raise NormError(f"channels={c} not divisible by groups={self.groups}")
        if self.gamma is None:
            self.gamma = Tensor(np.ones(c), name="gamma")
        if self.beta is None:
            self.beta = Tensor(np.zeros(c), name="beta")
        if self.running_mu is None:
            self.running_mu = np.zeros(c, dtype=self.gamma.data.dtype)
        if self.running_sigma is None:
            self.running_sigma = np.ones(c, dtype=self.gamma.data.dtype)

    def set_trainable(self, flag: bool):
        self.gamma.requires_grad = flag
        self.beta.requires_grad = flag

    def eval_scale_shift(self):
        """Per-channel (scale, shift) of the eval-mode affine: y = x*scale + shift.

        Computed in this exact op order so that a task delta carrying
        (scale, shift) as its gamma/beta entries reproduces eval outputs
        bit-for-bit on a freshly built base (whose running stats are the
        identity).
        """
        scale = self.gamma.data / self.running_sigma
        shift = self.beta.data - self.running_mu * scale
        return scale, shift


def batch_norm(channels: int, eps: float = 1e-5, momentum: float = 0.1) -> NormLayer:
    return NormLayer(kind="batch", channels=channels, eps=eps, momentum=momentum)


def group_norm(channels: int, groups: int | None = None, eps: float = 1e-5) -> NormLayer:
    if groups is None:
        groups = min(32, channels)
    return NormLayer(kind="group", channels=channels, groups=groups)


def _check_input(x: Tensor, layer: NormLayer):
    if x.ndim != 4:
        raise NormError(f"norm_forward expects (B,C,H,W), got {x.shape}")
    if x.shape[1] != layer.channels:
        raise NormError(
            f"channel mismatch: input has C={x.shape[1]}, layer has C={layer.channels}")


def norm_forward(x: Tensor, layer: NormLayer, mode: str = "train") -> Tensor:
    """Normalize a (B,C,H,W) tensor and apply the trainable per-channel affine."""
    if mode not in ("train", "eval"):
        raise NormError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_input(x, layer)
    b, c, h, w = x.shape
    gamma = ad.reshape(layer.gamma, (1, c, 1, 1))
    beta = ad.reshape(layer.beta, (1, c, 1, 1))

    if layer.kind == "batch":
        if mode == "eval":
            # same float op order as eval_scale_shift, kept on the tape so
            # gamma/beta still receive gradients in eval mode
            sigma_t = Tensor(layer.running_sigma)
            mu_t = Tensor(layer.running_mu)
            scale = layer.gamma / sigma_t
            shift = layer.beta - mu_t * scale
            return x * ad.reshape(scale, (1, c, 1, 1)) + ad.reshape(shift, (1, c, 1, 1))
        mu = ad.mean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
        inv = ad.pow_const(var + layer.eps, -0.5)
        xhat = centered * inv
        m = layer.momentum
        batch_sigma = np.sqrt(var.data.reshape(c) + layer.eps)
        layer.running_mu = ((1 - m) * layer.running_mu + m * mu.data.reshape(c)).astype(layer.running_mu.dtype)
        layer.running_sigma = ((1 - m) * layer.running_sigma + m * batch_sigma).astype(layer.running_sigma.dtype)
        layer.batches_tracked += 1
        return xhat * gamma + beta

    # group norm: per-sample statistics over each group of channels, both modes
    g = layer.groups
    grouped = ad.reshape(x, (b, g, (c // g) * h * w))
    mu = ad.mean(grouped, axis=2, keepdims=True)
    centered = grouped - mu
    var = ad.mean(centered * centered, axis=2, keepdims=True)
    inv = ad.pow_const(var + layer.eps, -0.5)
    xhat = ad.reshape(centered * inv, (b, c, h, w))
    return xhat * gamma + beta


def normalized_pre_affine(x: Tensor, layer: NormLayer) -> np.ndarray:
    """Train-mode normalized values before gamma/beta (statistics diagnostic)."""
    _check_input(x, layer)
    b, c, h, w = x.shape
    xd = x.data
    if layer.kind == "batch":
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        return (xd - mu) / np.sqrt(var + layer.eps)
    g = layer.groups
    grouped = xd.reshape(b, g, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    var = ((grouped - mu) ** 2).mean(axis=2, keepdims=True)
    return ((grouped - mu) / np.sqrt(var + layer.eps)).reshape(b, c, h, w)


def implicit_modulation_check(w, x, layer: NormLayer, stride: int = 1,
                              padding: int = 0) -> float:
    """Max |conv(norm_eval(x), w) - (conv(x*(g/s), w) + conv(offset_map, w))|.

    Both sides use the layer's eval-mode per-channel statistics. The
    computation follows the inputs' dtype, so float64 operands give a
    float64 check.
    """
    wd = w.data if isinstance(w, Tensor) else np.asarray(w)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xd.shape[1] != layer.channels:
        raise NormError(
            f"channel mismatch: input has C={xd.shape[1]}, layer has C={layer.channels}")
    gamma = layer.gamma.data.astype(xd.dtype)
    beta = layer.beta.data.astype(xd.dtype)
    mu = layer.running_mu.astype(xd.dtype)
    sigma = layer.running_sigma.astype(xd.dtype)

    ratio = (gamma / sigma).reshape(1, -1, 1, 1)
    xhat = ratio * (xd - mu.reshape(1, -1, 1, 1)) + beta.reshape(1, -1, 1, 1)
    lhs, _, _ = ad._conv_forward(xhat, wd, stride, padding)

    scaled, _, _ = ad._conv_forward(xd * ratio, wd, stride, padding)
    offset_map = np.broadcast_to(
        (beta - gamma * mu / sigma).reshape(1, -1, 1, 1), xd.shape).astype(xd.dtype)
    offset, _, _ = ad._conv_forward(np.ascontiguousarray(offset_map), wd, stride, padding)
    rhs = scaled + offset
    return float(np.abs(lhs - rhs).max())


def fold_norm_into_conv(w, bias, layer: NormLayer, mode: str = "eval"):
    """Absorb a trailing eval-mode norm into the preceding convolution.

    Returns (w_folded, bias_folded) with, per output channel o:
    w_folded[o] = w[o] * gamma[o] / sigma[o] and
    bias_folded[o] = (bias[o] - mu[o]) * gamma[o] / sigma[o] + beta[o].
    """
    if mode != "eval":
        raise NormError("normalization folding requires eval-mode statistics; "
                        f"got mode={mode!r}")
    wd = w.data if isinstance(w, Tensor) else np.asarray(w)
    kn = wd.shape[0]
    if bias is None:
        bias = np.zeros(kn, dtype=wd.dtype)
    bd = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
    if bd.shape != (kn,):
        raise NormError(f"bias shape {bd.shape} does not match output channels {kn}")
    if layer.channels != kn:
        raise NormError(
            f"norm layer has C={layer.channels} but convolution outputs {kn} channels")
    gamma = layer.gamma.data.astype(wd.dtype)
    beta = layer.beta.data.astype(wd.dtype)
    mu = layer.running_mu.astype(wd.dtype)
    sigma = layer.running_sigma.astype(wd.dtype)
    ratio = gamma / sigma
    w_folded = wd * ratio.reshape(-1, 1, 1, 1)
    bias_folded = (bd - mu) * ratio + beta
    return w_folded, bias_folded
