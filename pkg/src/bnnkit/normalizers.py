"""Normalization applied to features or weights before they are binarized."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _conv_kernels as _k
from .tensor import ShapeError, Tensor, channel_add, make_node, parameter

SIGMA_FLOOR = 1e-12


class NormKind(str, Enum):
    NONE = "NONE"
    LB = "LB"
    STD = "STD"
    MSTD = "MSTD"
    MSTDB = "MSTDB"
    BN = "BN"


FEATURE_KINDS = (NormKind.NONE, NormKind.LB, NormKind.STD, NormKind.BN)
WEIGHT_KINDS = (NormKind.NONE, NormKind.MSTD, NormKind.MSTDB)


@dataclass(frozen=True)
class NormalizerSpec:
    kind: NormKind = NormKind.NONE
    b: float = math.sqrt(2.0)
    center: str = "mean"  # MSTD/MSTDB centering: "mean" or "median"

    def __post_init__(self):
        object.__setattr__(self, "kind", NormKind(self.kind))
        if self.b <= 0:
            raise ValueError("MSTDB divisor b must be positive")
        if self.center not in ("mean", "median"):
            raise ValueError(f"center must be 'mean' or 'median', got {self.center!r}")

    @classmethod
    def parse(cls, name: str, **kw) -> "NormalizerSpec":
        """Accepts ``NONE`` or the FN_/WN_ prefixed config names (prefix optional)."""
        key = name.strip().upper()
        for prefix in ("FN_", "WN_"):
            if key.startswith(prefix):
                key = key[len(prefix):]
        return cls(NormKind(key), **kw)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mu: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormParams":
        return cls(
            gamma=parameter(np.ones(channels), "gamma"),
            beta=parameter(np.zeros(channels), "beta"),
            running_mu=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def eval_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """(scale, shift) such that eval-mode BN is ``scale * y + shift``."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.data - scale * self.running_mu


def _axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _cv(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x: Tensor, bn: BatchNormParams, training: bool) -> Tensor:
    """Per-channel batch normalization; updates running stats in training mode."""
    if x.shape[1] != bn.channels:
        raise ShapeError(f"batch_norm: {x.shape[1]} channels but params for {bn.channels}")
    xd = x.data
    shape = xd.shape
    flat = np.ascontiguousarray(xd).reshape(shape[0], shape[1], -1)
    m = flat.shape[0] * flat.shape[2]
    gamma, beta = bn.gamma, bn.beta
    if training:
        mu, var = _k.channel_moments(flat)
        bn.running_mu = (1 - bn.momentum) * bn.running_mu + bn.momentum * mu
        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var
    else:
        mu, var = bn.running_mu, bn.running_var
    inv = 1.0 / np.sqrt(var + bn.eps)
    gd = gamma.data
    xhat = _k.channel_affine(flat, inv, -mu * inv)
    out = _k.channel_affine(xhat, gd, beta.data).reshape(shape)

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(flat.shape)
        sg, sgx = _k.channel_grad_sums(g3, xhat)
        k = gd * inv
        zero = np.zeros_like(k)
        if training:
            dx = _k.channel_combine(g3, xhat, k, -k * sgx / m, -k * sg / m)
        else:
            dx = _k.channel_combine(g3, xhat, k, zero, zero)
        return dx.reshape(shape), sgx, sg

    return make_node(out, (x, gamma, beta), backward, "batch_norm")


def std_scale(x: Tensor) -> Tensor:
    """Divide each channel by its population standard deviation (over N, H, W)."""
    xd = x.data
    nd = xd.ndim
    axes = _axes(xd)
    m = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    sigma = np.sqrt((xc * xc).mean(axis=axes, keepdims=True))
    floored = sigma < SIGMA_FLOOR
    s = np.maximum(sigma, SIGMA_FLOOR)
    out = xd / s

    def backward(g):
        gx = g / s
        corr = xc * (g * xd).sum(axis=axes, keepdims=True) / (m * s ** 3)
        return (gx - np.where(floored, 0.0, corr),)

    return make_node(out, (x,), backward, "std_scale")


def _median_weights(flat: np.ndarray) -> np.ndarray:
    n = flat.size
    order = np.argsort(flat, kind="stable")
    w = np.zeros(n)
    if n % 2:
        w[order[n // 2]] = 1.0
    else:
        w[order[n // 2 - 1]] = 0.5
        w[order[n // 2]] = 0.5
    return w


def standardize(w: Tensor, b: float = 1.0, center: str = "mean") -> Tensor:
    """``(w - center(w)) / (sigma(w) * b)`` over the whole tensor.

    sigma is the population standard deviation about the mean.
    """
    wd = w.data
    flat = wd.reshape(-1)
    n = flat.size
    mu = flat.mean()
    sigma = float(np.sqrt(((flat - mu) ** 2).mean()))
    floored = sigma < SIGMA_FLOOR
    s = max(sigma, SIGMA_FLOOR)
    if center == "mean":
        c = mu
        cw = np.full(n, 1.0 / n)
    else:
        c = float(np.median(flat))
        cw = _median_weights(flat)
    out = (wd - c) / (s * b)

    def backward(g):
        gf = g.reshape(-1)
        gx = gf / (s * b) - cw * gf.sum() / (s * b)
        if not floored:
            gx = gx - (flat - mu) * (gf * (flat - c)).sum() / (n * s ** 3 * b)
        return (gx.reshape(wd.shape),)

    return make_node(out, (w,), backward, "standardize")


def normalize_feature(spec: NormalizerSpec, x: Tensor, mode: str = "train", bias: Tensor | None = None,
                      bn: BatchNormParams | None = None) -> Tensor:
    kind = spec.kind
    if kind not in FEATURE_KINDS:
        raise ValueError(f"{kind.value} is not a feature normalizer")
    if kind is NormKind.NONE:
        return x
    if kind is NormKind.LB:
        if bias is None:
            raise ValueError("LB needs a learnable bias vector")
        return channel_add(x, bias)
    if kind is NormKind.STD:
        return std_scale(x)
    if bn is None:
        raise ValueError("BN feature normalization needs BatchNormParams")
    return batch_norm(x, bn, training=(mode == "train"))


def normalize_weight(spec: NormalizerSpec, w: Tensor) -> Tensor:
    kind = spec.kind
    if kind not in WEIGHT_KINDS:
        raise ValueError(f"{kind.value} is not a weight normalizer")
    if kind is NormKind.NONE:
        return w
    b = 1.0 if kind is NormKind.MSTD else spec.b
    return standardize(w, b=b, center=spec.center)


@dataclass
class FeatureNormState:
    """Learnable state a feature normalizer needs for one layer."""

    spec: NormalizerSpec
    channels: int
    bias: Tensor | None = None
    bn: BatchNormParams | None = None

    def __post_init__(self):
        if self.spec.kind is NormKind.LB and self.bias is None:
            self.bias = parameter(np.zeros(self.channels), "fn_bias")
        if self.spec.kind is NormKind.BN and self.bn is None:
            self.bn = BatchNormParams.create(self.channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return normalize_feature(self.spec, x, mode, bias=self.bias, bn=self.bn)

    def sign_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """(scale, shift) per channel whose sign matches this normalizer at eval time.

        STD only rescales by a positive factor, so it cannot change a sign.
        """
        ones = np.ones(self.channels)
        kind = self.spec.kind
        if kind is NormKind.LB:
            return ones, self.bias.data.copy()
        if kind is NormKind.BN:
            return self.bn.eval_affine()
        return ones, np.zeros(self.channels)

