"""Binary convolution with pluggable repairs, and the residual building block.

Per convolution the forward pipeline is::

    x -> feature norm -> feature binarizer -> conv (pad -1) against
         (weight norm -> weight binarizer)(w) -> * alpha -> batch norm

The activation sits after the residual add (and after the first BN for the
single-residual block, where there is no add).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .binarizers import IDENTITY, LC_1, BinarizerSpec, Kind, TrainingProgress, sign_forward
from .module import Module
from .normalizers import (
    BatchNormParams,
    FeatureNormState,
    NormalizerSpec,
    NormKind,
    batch_norm,
    normalize_weight,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    channel_mul,
    conv2d_array,
    conv2d_real,
    make_node,
    parameter,
)


class ConfigError(ValueError):
    pass


class ScaleKind(str, Enum):
    NONE = "NONE"
    AM = "AM"
    LF = "LF"
    LFI = "LFI"


class ActKind(str, Enum):
    NONE = "NONE"
    HTANH_ID = "HTANH_ID"
    RELU = "RELU"
    PRELU = "PRELU"
    RPRELU = "RPRELU"
    DPRELU = "DPRELU"


class Residual(str, Enum):
    SINGLE = "SINGLE"
    DOUBLE = "DOUBLE"


# which activation parameters are learnable per variant: alpha, beta, gamma, zeta
_LEARNABLE = {
    ActKind.NONE: (False, False, False, False),
    ActKind.HTANH_ID: (False, False, False, False),
    ActKind.RELU: (False, False, False, False),
    ActKind.PRELU: (True, False, False, False),
    ActKind.RPRELU: (True, False, True, True),
    ActKind.DPRELU: (True, True, True, True),
}

_ACT_NAMES = {"NONE": ActKind.NONE, "I&H": ActKind.HTANH_ID, "HTANH_ID": ActKind.HTANH_ID,
              "RELU": ActKind.RELU, "PRELU": ActKind.PRELU, "RPRELU": ActKind.RPRELU, "DPRELU": ActKind.DPRELU}


@dataclass(frozen=True)
class ScalingFactorSpec:
    kind: ScaleKind = ScaleKind.NONE

    def __post_init__(self):
        object.__setattr__(self, "kind", ScaleKind(self.kind))


@dataclass(frozen=True)
class ActivationSpec:
    """Activation family ``max(alpha*x, beta*(x - gamma)) + zeta``; values are initial/fixed."""

    variant: ActKind = ActKind.HTANH_ID
    alpha: float = 0.25
    beta: float = 1.0
    gamma: float = 0.0
    zeta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", ActKind(self.variant))

    @classmethod
    def parse(cls, name: str) -> "ActivationSpec":
        try:
            return cls(_ACT_NAMES[name.strip().upper()])
        except KeyError:
            raise ConfigError(f"unknown activation {name!r}") from None

    @property
    def is_identity(self) -> bool:
        return self.variant in (ActKind.NONE, ActKind.HTANH_ID)

    def constants(self) -> tuple[float, float, float, float]:
        if self.variant is ActKind.RELU:
            return 0.0, 1.0, 0.0, 0.0
        if self.is_identity:
            return 1.0, 1.0, 0.0, 0.0
        if self.variant is ActKind.PRELU:
            return self.alpha, 1.0, 0.0, 0.0
        if self.variant is ActKind.RPRELU:
            return self.alpha, 1.0, self.gamma, self.zeta
        return self.alpha, self.beta, self.gamma, self.zeta


@dataclass(frozen=True)
class BlockConfig:
    feature_binarizer: BinarizerSpec = LC_1
    weight_binarizer: BinarizerSpec = LC_1
    feature_norm: NormalizerSpec = field(default_factory=NormalizerSpec)
    weight_norm: NormalizerSpec = field(default_factory=NormalizerSpec)
    scaling: ScalingFactorSpec = field(default_factory=ScalingFactorSpec)
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    residual: Residual = Residual.SINGLE
    channels: int | None = None
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "residual", Residual(self.residual))
        if self.feature_norm.kind not in (NormKind.NONE, NormKind.LB, NormKind.STD, NormKind.BN):
            raise ConfigError(f"{self.feature_norm.kind.value} cannot normalize features")
        if self.weight_norm.kind not in (NormKind.NONE, NormKind.MSTD, NormKind.MSTDB):
            raise ConfigError(f"{self.weight_norm.kind.value} cannot normalize weights")


# -- scaling factors -----------------------------------------------------------

def channel_abs_mean(w: Tensor) -> Tensor:
    """Per-output-channel mean of |w| (differentiable)."""
    wd = w.data
    o = wd.shape[0]
    flat = wd.reshape(o, -1)
    n = flat.shape[1]

    def backward(g):
        return ((np.sign(flat) * (g[:, None] / n)).reshape(wd.shape),)

    return make_node(np.abs(flat).mean(axis=1), (w,), backward, "channel_abs_mean")


def lfi_init(y_real: np.ndarray, y_bin: np.ndarray) -> np.ndarray:
    """Per-channel ratio mean|y_real| / mean|y_bin| over N, H, W."""
    axes = (0,) + tuple(range(2, np.ndim(y_bin)))
    num = np.abs(y_real).mean(axis=axes)
    den = np.abs(y_bin).mean(axis=axes)
    if np.any(den == 0):
        raise ValueError("LFI initialization failed: binary output is all zero for some channel")
    return num / den


def scaling_factor(spec: ScalingFactorSpec, w: Tensor, y_real=None, y_bin=None,
                   value: Tensor | None = None) -> Tensor | None:
    """Per-output-channel scaling factor; ``None`` for NONE."""
    kind = spec.kind
    if kind is ScaleKind.NONE:
        return None
    if kind is ScaleKind.AM:
        return channel_abs_mean(w)
    if kind is ScaleKind.LF:
        return value if value is not None else parameter(np.ones(w.shape[0]), "alpha")
    if value is not None:
        return value
    if y_real is None or y_bin is None:
        raise ValueError("LFI initialization needs one calibration pass (y_real and y_bin)")
    return parameter(lfi_init(np.asarray(y_real), np.asarray(y_bin)), "alpha")


# -- activation family ---------------------------------------------------------

def prelu_family(x: Tensor, alpha: Tensor, beta: Tensor, gamma: Tensor, zeta: Tensor) -> Tensor:
    """Elementwise ``max(a*x, b*(x - g)) + z`` with per-channel a, b, g, z."""
    c = x.shape[1]
    for t in (alpha, beta, gamma, zeta):
        if t.shape != (c,):
            raise ShapeError(f"activation parameter shape {t.shape} does not match {c} channels")
    nd = x.data.ndim
    view = lambda v: v.reshape((1, -1) + (1,) * (nd - 2))  # noqa: E731
    xd = x.data
    a, b, g0, z = (view(t.data) for t in (alpha, beta, gamma, zeta))
    neg_branch = a * xd
    pos_branch = b * (xd - g0)
    use_neg = neg_branch >= pos_branch
    out = np.where(use_neg, neg_branch, pos_branch) + z
    axes = (0,) + tuple(range(2, nd))

    def backward(gout):
        gx = gout * np.where(use_neg, a, b)
        ga = (gout * np.where(use_neg, xd, 0.0)).sum(axis=axes)
        gb = (gout * np.where(use_neg, 0.0, xd - g0)).sum(axis=axes)
        gg = (gout * np.where(use_neg, 0.0, -b)).sum(axis=axes)
        gz = gout.sum(axis=axes)
        return gx, ga, gb, gg, gz

    return make_node(out, (x, alpha, beta, gamma, zeta), backward, "prelu_family")


class Activation(Module):
    def __init__(self, spec: ActivationSpec, channels: int):
        self.spec = spec
        learn = _LEARNABLE[spec.variant]
        names = ("alpha", "beta", "gamma", "zeta")
        for name, value, trainable in zip(names, spec.constants(), learn):
            setattr(self, name, Tensor(np.full(channels, value), requires_grad=trainable, name=name))

    def __call__(self, x: Tensor) -> Tensor:
        if self.spec.is_identity:
            return x
        return prelu_family(x, self.alpha, self.beta, self.gamma, self.zeta)


def activation_apply(spec: ActivationSpec, x: Tensor, act: Activation | None = None) -> Tensor:
    return (act or Activation(spec, x.shape[1]))(x)


# -- binary convolution ----------------------------------------------------------

def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class BinaryConv(Module):
    """One binarized convolution followed by its batch norm (``bn=None`` bypasses it)."""

    _buffers = ("alpha_initialized",)

    def __init__(self, cfg: BlockConfig, in_ch: int, out_ch: int, stride: int = 1, kernel: int = 3,
                 rng: np.random.Generator | None = None, weight: np.ndarray | None = None, use_bn: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.stride = stride
        self.padding = kernel // 2
        if weight is None:
            weight = kaiming_normal(rng, (out_ch, in_ch, kernel, kernel))
        self.weight = parameter(weight, "weight")
        self.fnorm = FeatureNormState(cfg.feature_norm, in_ch)
        self.f_clip = parameter([1.0], "f_clip") if cfg.feature_binarizer.kind is Kind.LC_A else None
        self.w_clip = parameter([1.0], "w_clip") if cfg.weight_binarizer.kind is Kind.LC_A else None
        kind = cfg.scaling.kind
        self.alpha = parameter(np.ones(out_ch), "alpha") if kind in (ScaleKind.LF, ScaleKind.LFI) else None
        self.alpha_initialized = kind is not ScaleKind.LFI
        self.bn = BatchNormParams.create(out_ch) if use_bn else None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def binary_weight(self, progress: TrainingProgress | None, stage: int) -> tuple[Tensor, Tensor]:
        wn = normalize_weight(self.cfg.weight_norm, self.weight)
        spec = self.cfg.weight_binarizer if stage == 2 else IDENTITY
        return wn, sign_forward(wn, spec, progress, clip=self.w_clip)

    def binary_input(self, x: Tensor, progress: TrainingProgress | None, mode: str) -> tuple[Tensor, Tensor]:
        xn = self.fnorm(x, mode)
        return xn, sign_forward(xn, self.cfg.feature_binarizer, progress, clip=self.f_clip)

    def forward(self, x: Tensor, progress: TrainingProgress | None = None, stage: int = 2,
                mode: str = "train") -> Tensor:
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        xn, xb = self.binary_input(x, progress, mode)
        wn, wb = self.binary_weight(progress, stage)
        y = conv2d_real(xb, wb, self.stride, self.padding, pad_value=-1.0)
        kind = self.cfg.scaling.kind
        if kind is ScaleKind.LFI and not self.alpha_initialized:
            y_real = conv2d_array(xn.data, wn.data, self.stride, self.padding)
            self.alpha.data = lfi_init(y_real, y.data)
            self.alpha_initialized = True
        alpha = scaling_factor(self.cfg.scaling, wn, value=self.alpha)
        if alpha is not None:
            y = channel_mul(y, alpha)
        if self.bn is not None:
            y = batch_norm(y, self.bn, training=(mode == "train"))
        return y

    __call__ = forward

    def effective_alpha(self) -> np.ndarray:
        """Current per-channel alpha as an array (ones when there is no scaling)."""
        kind = self.cfg.scaling.kind
        if kind is ScaleKind.NONE:
            return np.ones(self.out_channels)
        if kind is ScaleKind.AM:
            wn = normalize_weight(self.cfg.weight_norm, Tensor(self.weight.data))
            return channel_abs_mean(wn).data
        return self.alpha.data.copy()


def binary_conv_train(cfg: BlockConfig, x: Tensor, w: Tensor, progress: TrainingProgress | None = None,
                      stage: int = 2, mode: str = "train", bn: BatchNormParams | None = None) -> Tensor:
    """Functional form of :class:`BinaryConv` for a given weight tensor.

    ``bn=None`` bypasses batch normalization. Uses padding ``k // 2``.
    """
    o, i, k, _ = w.shape
    layer = BinaryConv(cfg, i, o, stride=cfg.stride, kernel=k, weight=w.data, use_bn=bn is not None)
    layer.weight = w
    layer.bn = bn
    return layer(x, progress, stage, mode)


class RealConvBN(Module):
    """Real-valued convolution + batch norm (stem and projection shortcuts)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, rng: np.random.Generator):
        self.stride = stride
        self.padding = padding
        self.weight = parameter(kaiming_normal(rng, (out_ch, in_ch, kernel, kernel)), "weight")
        self.bn = BatchNormParams.create(out_ch)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        y = conv2d_real(x, self.weight, self.stride, self.padding)
        return batch_norm(y, self.bn, training=(mode == "train"))


class BuildingBlock(Module):
    def __init__(self, cfg: BlockConfig, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        self.cfg = cfg
        self.conv1 = BinaryConv(cfg, in_ch, out_ch, stride, rng=rng)
        self.act1 = Activation(cfg.activation, out_ch)
        self.conv2 = BinaryConv(cfg, out_ch, out_ch, 1, rng=rng)
        self.act2 = Activation(cfg.activation, out_ch)
        self.shortcut = RealConvBN(in_ch, out_ch, 1, stride, 0, rng) if (stride != 1 or in_ch != out_ch) else None

    def forward(self, x: Tensor, progress: TrainingProgress | None = None, stage: int = 2,
                mode: str = "train") -> Tensor:
        sc = self.shortcut(x, mode) if self.shortcut is not None else x
        y1 = self.conv1(x, progress, stage, mode)
        if sc.shape != y1.shape:
            raise ConfigError(f"residual shape mismatch: {sc.shape} vs {y1.shape}")
        double = self.cfg.residual is Residual.DOUBLE
        h = self.act1(add(y1, sc) if double else y1)
        y2 = self.conv2(h, progress, stage, mode)
        return self.act2(add(y2, h) if double else add(y2, sc))

    __call__ = forward


def building_block_forward(cfg: BlockConfig, x: Tensor, block: BuildingBlock,
                           progress: TrainingProgress | None = None, stage: int = 2, mode: str = "train") -> Tensor:
    if block.cfg != cfg:
        raise ConfigError("block was built from a different BlockConfig")
    return block(x, progress, stage, mode)


def with_residual(cfg: BlockConfig, residual: Residual) -> BlockConfig:
    return replace(cfg, residual=Residual(residual))
