"""Bit-packed XNOR-popcount inference with batch-norm folding and a binary model format.

Bit layout: -1 is stored as 0 and +1 as 1, packed least-significant bit
first along the innermost axis into 64-bit words. Feature maps are packed
as NHWC (channels innermost), weights as OHWI, so each kernel tap (kh, kw)
owns ``ceil(C / 64)`` words. Pad bits are 0 and masked out of every count.
"""
from __future__ import annotations

import io
import struct
import warnings
import zlib
from dataclasses import dataclass

import numba as nb
import numpy as np
from numba import types
from numba.extending import intrinsic

from .blocks import ActKind, BinaryConv, RealConvBN, Residual
from .models import ResNet
from .normalizers import BatchNormParams
from .tensor import ShapeError, Tensor, conv2d_array, conv_output_size, max_pool2d

WORD = 64
MAGIC = b"BNNF"
FORMAT_VERSION = 1


class ExportError(ValueError):
    pass


class FormatVersionError(ValueError):
    pass


class FormatError(ValueError):
    pass


class FoldWarning(UserWarning):
    pass


# -- packing ---------------------------------------------------------------------

def words_for(n: int) -> int:
    return (n + WORD - 1) // WORD


def valid_mask(n: int) -> np.ndarray:
    """Per-word masks selecting the first ``n`` bits of a packed row."""
    mask = np.full(words_for(n), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    tail = n % WORD
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


@dataclass(frozen=True)
class PackedBitTensor:
    shape: tuple[int, ...]  # logical shape; the last axis is packed
    words: np.ndarray  # uint64, shape[:-1] + (ceil(shape[-1] / 64),)

    @property
    def valid(self) -> int:
        """Number of meaningful bits in each packed row."""
        return self.shape[-1]


def pack_bits(x) -> PackedBitTensor:
    """Pack a {-1, +1} array along its last axis (+1 -> bit 1, LSB first)."""
    x = np.asarray(x)
    if x.ndim == 0:
        raise ShapeError("pack_bits needs at least one axis")
    bad = np.flatnonzero((x != 1) & (x != -1))
    if bad.size:
        idx = np.unravel_index(bad[0], x.shape)
        raise ValueError(f"pack_bits: element {tuple(int(i) for i in idx)} is {x[idx]!r}, not +1 or -1")
    n = x.shape[-1]
    nw = words_for(n)
    bits = np.zeros(x.shape[:-1] + (nw * WORD,), dtype=bool)
    bits[..., :n] = x > 0
    packed = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return PackedBitTensor(tuple(x.shape), words.reshape(x.shape[:-1] + (nw,)))


def unpack_bits(p: PackedBitTensor) -> np.ndarray:
    raw = np.ascontiguousarray(p.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., : p.valid]
    return np.where(bits == 1, 1.0, -1.0).reshape(p.shape)


def popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(np.asarray(words, dtype=np.uint64)).sum())


def xnor_popcount_dot(a: PackedBitTensor | np.ndarray, b: PackedBitTensor | np.ndarray, n: int | None = None) -> int:
    """``2 * popcount(xnor(a, b) & mask) - n``, the +/-1 dot product of two packed rows."""
    if isinstance(a, PackedBitTensor) and isinstance(b, PackedBitTensor):
        if a.valid != b.valid:
            raise ValueError(f"xnor_popcount_dot: valid lengths differ ({a.valid} vs {b.valid})")
        n = a.valid if n is None else n
        a, b = a.words, b.words
    if n is None:
        raise ValueError("xnor_popcount_dot needs the valid length n for raw words")
    a = np.asarray(a, dtype=np.uint64).reshape(-1)
    b = np.asarray(b, dtype=np.uint64).reshape(-1)
    if a.shape != b.shape or words_for(n) != a.size:
        raise ValueError(f"xnor_popcount_dot: {a.size} and {b.size} words cannot hold {n} valid bits")
    agree = ~(a ^ b) & valid_mask(n)
    return 2 * popcount(agree) - n


# -- kernel ------------------------------------------------------------------------

@intrinsic
def _ctpop(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@nb.njit(cache=True)
def _pixel_counts(xp, wt, mask, n, y0, x0, kh_n, kw_n, acc):
    # agreement counts of one receptive field against every output channel
    cw = xp.shape[3]
    o_n = wt.shape[1]
    acc[:] = np.uint64(0)
    r = 0
    for a in range(kh_n):
        for b in range(kw_n):
            for c in range(cw):
                p = xp[n, y0 + a, x0 + b, c]
                m = mask[c]
                wr = wt[r]
                for o in range(o_n):
                    acc[o] += _ctpop(~(p ^ wr[o]) & m)
                r += 1


@nb.njit(cache=True)
def _conv_dots(xp, w, mask, stride, oh, ow):
    # xp: [N, Hp, Wp, Cw] padded input words; w: [O, K, K, Cw] -> +/-1 dots [N, OH, OW, O]
    n_n = xp.shape[0]
    o_n, kh_n, kw_n, cw = w.shape
    # output channels innermost so the popcount loop runs over contiguous words
    wt = np.ascontiguousarray(w.reshape(o_n, kh_n * kw_n * cw).T)
    fan_in = kh_n * kw_n * mask_bits(mask)
    acc = np.empty(o_n, dtype=np.uint64)
    out = np.empty((n_n, oh, ow, o_n), dtype=np.int64)
    for n in range(n_n):
        for i in range(oh):
            for j in range(ow):
                _pixel_counts(xp, wt, mask, n, i * stride, j * stride, kh_n, kw_n, acc)
                for o in range(o_n):
                    out[n, i, j, o] = 2 * np.int64(acc[o]) - fan_in
    return out


@nb.njit(cache=True)
def _conv_sign(xp, w, mask, tau, stride, oh, ow):
    # fused conv + threshold: bit o of the output is (dot_o >= tau_o)
    n_n = xp.shape[0]
    o_n, kh_n, kw_n, cw = w.shape
    wt = np.ascontiguousarray(w.reshape(o_n, kh_n * kw_n * cw).T)
    fan_in = kh_n * kw_n * mask_bits(mask)
    # dot >= tau  <=>  agreements >= ceil((tau + fan_in) / 2)
    need = np.empty(o_n, dtype=np.int64)
    for o in range(o_n):
        need[o] = np.int64(np.ceil((tau[o] + fan_in) / 2.0))
    acc = np.empty(o_n, dtype=np.uint64)
    ow_n = (o_n + 63) // 64
    out = np.zeros((n_n, oh, ow, ow_n), dtype=np.uint64)
    for n in range(n_n):
        for i in range(oh):
            for j in range(ow):
                _pixel_counts(xp, wt, mask, n, i * stride, j * stride, kh_n, kw_n, acc)
                for o in range(o_n):
                    bit = np.uint64(np.int64(acc[o]) >= need[o])
                    out[n, i, j, o >> 6] |= bit << np.uint64(o & 63)
    return out


@nb.njit(cache=True)
def mask_bits(mask):
    total = 0
    for c in range(mask.shape[0]):
        total += _ctpop(mask[c])
    return total


# -- folding -----------------------------------------------------------------------

@dataclass(frozen=True)
class FusedLayer:
    """A binary conv with its scaling factor and batch norm folded in.

    ``weights`` are the (flipped) +/-1 kernels packed as OHWI. The binary
    output is ``dot >= tau``; the real output used at residual adds is
    ``scale * dot + shift`` (scale >= 0 because of the flip). ``in_scale``
    and ``in_bias`` are the per-input-channel affine whose sign binarizes
    the incoming real features.
    """

    weights: PackedBitTensor
    tau: np.ndarray
    flip: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    stride: int = 1
    padding: int = 1
    in_scale: np.ndarray | None = None
    in_bias: np.ndarray | None = None

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[3]

    @property
    def kernel(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_in(self) -> int:
        return self.kernel * self.kernel * self.in_channels

    @property
    def constant_channels(self) -> np.ndarray:
        return self.scale == 0


def fold_thresholds(gamma, beta, mu, var, eps, alpha=None, fan_in: int | None = None):
    """Per-channel (tau, flip, scale, shift) for ``sign(BN(alpha * dot))``.

    With gain ``a = gamma * alpha / s`` and offset ``c = beta - gamma * mu / s``
    (``s = sqrt(var + eps)``), BN output is ``a * dot + c``. Flipping the
    channel when ``a < 0`` leaves ``|a| * dot' + c``, which is >= 0 exactly
    when ``dot' >= -c / |a|``. Channels with ``a = 0`` are constant
    ``sign(c)``; they get ``tau = -(fan_in + 1)`` (always +1) or
    ``fan_in + 1`` (always -1).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    alpha = np.ones_like(gamma) if alpha is None else np.asarray(alpha, dtype=np.float64)
    s = np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    gain = gamma * alpha / s
    offset = beta - gamma * np.asarray(mu, dtype=np.float64) / s
    flip = gain < 0
    scale = np.abs(gain)
    dead = scale == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(dead, 0.0, (gamma * mu - beta * s) / np.abs(gamma * alpha))
    if dead.any():
        if fan_in is None:
            raise ValueError("constant channels need fan_in to place their threshold")
        warnings.warn(f"{int(dead.sum())} channel(s) have zero gain and fold to the constant sign(beta)",
                      FoldWarning, stacklevel=2)
        tau = np.where(dead, np.where(offset >= 0, -(fan_in + 1.0), fan_in + 1.0), tau)
    shift = np.where(dead, offset, -scale * tau)
    return tau, flip, scale, shift


def fuse_bn_sign(bn: BatchNormParams, w, alpha=None, stride: int = 1, padding: int | None = None,
                 in_scale=None, in_bias=None) -> FusedLayer:
    """Fold ``sign(BN(alpha * conv(x, w)))`` into packed weights and thresholds.

    ``w`` is the +/-1 kernel in OIHW order.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"fuse_bn_sign expects OIHW weights, got shape {w.shape}")
    o, c, k, _ = w.shape
    if bn.channels != o:
        raise ShapeError(f"batch norm has {bn.channels} channels, weights have {o}")
    tau, flip, scale, shift = fold_thresholds(bn.gamma.data, bn.beta.data, bn.running_mu, bn.running_var,
                                              bn.eps, alpha, fan_in=c * k * k)
    wf = np.where(flip[:, None, None, None], -w, w)
    packed = pack_bits(wf.transpose(0, 2, 3, 1))
    return FusedLayer(packed, tau, flip, scale, shift, stride, k // 2 if padding is None else padding,
                      np.ones(c) if in_scale is None else np.asarray(in_scale, dtype=np.float64),
                      np.zeros(c) if in_bias is None else np.asarray(in_bias, dtype=np.float64))


def _pad_words(x: PackedBitTensor, padding: int) -> np.ndarray:
    # zero words are all -1 bits, matching the -1 padding used in training
    if padding == 0:
        return x.words
    return np.pad(x.words, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _conv_args(layer: FusedLayer, x: PackedBitTensor):
    if len(x.shape) != 4 or x.shape[3] != layer.in_channels:
        raise ShapeError(f"packed conv expects NHWC input with {layer.in_channels} channels, got {x.shape}")
    _, h, w, _ = x.shape
    k = layer.kernel
    oh = conv_output_size(h, k, layer.stride, layer.padding)
    ow = conv_output_size(w, k, layer.stride, layer.padding)
    return (_pad_words(x, layer.padding), np.ascontiguousarray(layer.weights.words),
            valid_mask(layer.in_channels)), (layer.stride, oh, ow)


def packed_conv_dot(layer: FusedLayer, x: PackedBitTensor) -> np.ndarray:
    """Integer +/-1 convolution of packed NHWC features: [N, H', W', O]."""
    arrays, geometry = _conv_args(layer, x)
    return _conv_dots(*arrays, *geometry)


def packed_conv_forward(layer: FusedLayer, x: PackedBitTensor) -> PackedBitTensor:
    """Fused conv + BN + sign on packed features; the output is packed NHWC bits.

    The input is padded here with -1 bits (zero words) to ``layer.padding``.
    """
    arrays, (stride, oh, ow) = _conv_args(layer, x)
    words = _conv_sign(*arrays, np.asarray(layer.tau, dtype=np.float64), stride, oh, ow)
    return PackedBitTensor((x.shape[0], oh, ow, layer.out_channels), words)


def float_sign_bn_conv(x, w, bn: BatchNormParams, alpha=None, stride: int = 1, padding: int | None = None):
    """Floating-point reference: BN(alpha * conv(x, w)) in eval mode (pre-sign), NCHW."""
    w = np.asarray(w, dtype=np.float64)
    k = w.shape[2]
    y = conv2d_array(np.asarray(x, dtype=np.float64), w, stride, k // 2 if padding is None else padding, -1.0)
    if alpha is not None:
        y = y * np.asarray(alpha)[None, :, None, None]
    s = np.sqrt(bn.running_var + bn.eps)
    return (bn.gamma.data[None, :, None, None] * (y - bn.running_mu[None, :, None, None]) / s[None, :, None, None]
            + bn.beta.data[None, :, None, None])


@dataclass
class FoldReport:
    elements: int
    agree: int
    disagree: int
    ties: int  # elements with |BN output| <= tie_band; not asserted

    @property
    def exact(self) -> bool:
        return self.disagree == 0


def verify_fold(x, w, bn: BatchNormParams, alpha=None, stride: int = 1, tie_band: float = 1e-6) -> FoldReport:
    """Compare float ``sign(BN(conv))`` with the fused integer path outside the tie band."""
    ref = float_sign_bn_conv(x, w, bn, alpha, stride)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldWarning)
        layer = fuse_bn_sign(bn, w, alpha, stride)
    bits = unpack_bits(packed_conv_forward(layer, pack_bits(np.asarray(x).transpose(0, 2, 3, 1))))
    fused = bits.transpose(0, 3, 1, 2)
    outside = np.abs(ref) > tie_band
    agree = (np.where(ref >= 0, 1.0, -1.0) == fused) & outside
    return FoldReport(int(ref.size), int(agree.sum()), int(outside.sum() - agree.sum()), int((~outside).sum()))


# -- model export ------------------------------------------------------------------

class Role:
    STEM, CONV1, CONV2, SHORTCUT, CLASSIFIER = range(5)


class LayerKind:
    REAL_CONV, BINARY_CONV, LINEAR = range(3)


@dataclass(frozen=True)
class RealConvLayer:
    weight: np.ndarray  # OIHW
    scale: np.ndarray  # folded eval BN
    shift: np.ndarray
    stride: int
    padding: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = conv2d_array(x, self.weight, self.stride, self.padding)
        return y * self.scale[None, :, None, None] + self.shift[None, :, None, None]


@dataclass(frozen=True)
class LinearLayer:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class PackedBlock:
    conv1: FusedLayer
    conv2: FusedLayer
    shortcut: RealConvLayer | None


@dataclass(frozen=True)
class PackedModel:
    residual: Residual
    imagenet_stem: bool
    stem: RealConvLayer
    blocks: tuple[PackedBlock, ...]
    classifier: LinearLayer

    def binary_layers(self) -> list[FusedLayer]:
        return [layer for b in self.blocks for layer in (b.conv1, b.conv2)]

    def _binary(self, layer: FusedLayer, h: np.ndarray) -> np.ndarray:
        z = h * layer.in_scale[None, :, None, None] + layer.in_bias[None, :, None, None]
        bits = pack_bits(np.where(z >= 0, 1.0, -1.0).transpose(0, 2, 3, 1))
        dots = packed_conv_dot(layer, bits)
        y = dots * layer.scale + layer.shift
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def forward(self, x) -> np.ndarray:
        """Logits for a float NCHW batch (mixed integer/real execution)."""
        h = self.stem(np.asarray(x, dtype=np.float64))
        if self.imagenet_stem:
            h = max_pool2d(Tensor(h), 3, 2, 1).data
        double = self.residual is Residual.DOUBLE
        for block in self.blocks:
            sc = block.shortcut(h) if block.shortcut is not None else h
            y1 = self._binary(block.conv1, h)
            a = y1 + sc if double else y1
            y2 = self._binary(block.conv2, a)
            h = y2 + a if double else y2 + sc
        pooled = h.mean(axis=(2, 3))
        return pooled @ self.classifier.weight.T + self.classifier.bias

    __call__ = forward


def _real_layer(layer: RealConvBN) -> RealConvLayer:
    scale, shift = layer.bn.eval_affine()
    return RealConvLayer(layer.weight.data.copy(), scale, shift, layer.stride, layer.padding)


def _fuse_conv(conv: BinaryConv, where: str) -> FusedLayer:
    if conv.bn is None:
        raise ExportError(f"{where}: binary conv without batch norm cannot be folded")
    _, wb = conv.binary_weight(None, stage=2)
    in_scale, in_bias = conv.fnorm.sign_affine()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldWarning)
        return fuse_bn_sign(conv.bn, wb.data, conv.effective_alpha(), conv.stride, conv.padding, in_scale, in_bias)


def to_packed(model: ResNet) -> PackedModel:
    """Fold a trained model into its packed inference form (stage-2 weights)."""
    blocks = []
    for i, block in enumerate(model.blocks):
        for j, act in enumerate((block.act1, block.act2), start=1):
            if act.spec.variant not in (ActKind.NONE, ActKind.HTANH_ID):
                raise ExportError(f"blocks.{i}.act{j}: activation {act.spec.variant.value} is not foldable; "
                                  "packed export needs NONE or I&H")
        blocks.append(PackedBlock(_fuse_conv(block.conv1, f"blocks.{i}.conv1"),
                                  _fuse_conv(block.conv2, f"blocks.{i}.conv2"),
                                  _real_layer(block.shortcut) if block.shortcut is not None else None))
    return PackedModel(model.cfg.block.residual, model.cfg.imagenet_stem, _real_layer(model.stem), tuple(blocks),
                       LinearLayer(model.fc_weight.data.copy(), model.fc_bias.data.copy()))


# -- serialization -----------------------------------------------------------------

def _f64(buf: io.BytesIO, arr) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _write_real_conv(buf: io.BytesIO, role: int, layer: RealConvLayer) -> None:
    o, c, k, _ = layer.weight.shape
    buf.write(struct.pack("<BB5I", LayerKind.REAL_CONV, role, o, c, k, layer.stride, layer.padding))
    _f64(buf, layer.weight)
    _f64(buf, layer.scale)
    _f64(buf, layer.shift)


def _write_binary(buf: io.BytesIO, role: int, layer: FusedLayer) -> None:
    o, k, _, c = layer.weights.shape
    cw = words_for(c)
    buf.write(struct.pack("<BB6I", LayerKind.BINARY_CONV, role, o, c, k, layer.stride, layer.padding, cw))
    _f64(buf, layer.tau)
    buf.write(pack_bits(np.where(layer.flip, 1.0, -1.0)).words.astype("<u8").tobytes())
    buf.write(np.ascontiguousarray(layer.weights.words, dtype="<u8").tobytes())
    buf.write(np.full(o * k * k, c, dtype="<u4").tobytes())
    _f64(buf, layer.scale)
    _f64(buf, layer.shift)
    _f64(buf, layer.in_scale)
    _f64(buf, layer.in_bias)


def export_bytes(packed: PackedModel) -> bytes:
    """Serialize; see the README for the byte layout."""
    buf = io.BytesIO()
    layers = [(Role.STEM, packed.stem)]
    for block in packed.blocks:
        if block.shortcut is not None:
            layers.append((Role.SHORTCUT, block.shortcut))
        layers += [(Role.CONV1, block.conv1), (Role.CONV2, block.conv2)]
    layers.append((Role.CLASSIFIER, packed.classifier))
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(layers)))
    buf.write(struct.pack("<BB", 1 if packed.residual is Residual.DOUBLE else 0, int(packed.imagenet_stem)))
    for role, layer in layers:
        if isinstance(layer, RealConvLayer):
            _write_real_conv(buf, role, layer)
        elif isinstance(layer, FusedLayer):
            _write_binary(buf, role, layer)
        else:
            o, i = layer.weight.shape
            buf.write(struct.pack("<BB2I", LayerKind.LINEAR, role, o, i))
            _f64(buf, layer.weight)
            _f64(buf, layer.bias)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def export_model(model: ResNet) -> bytes:
    return export_bytes(to_packed(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated model file at byte offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def u64(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<u8").astype(np.uint64).reshape(shape)


def import_model(data: bytes) -> PackedModel:
    if len(data) < 18 or data[:4] != MAGIC:
        raise FormatError("not a packed model file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise FormatError("CRC-32 mismatch: model file is corrupt")
    r = _Reader(body)
    r.take(8)
    (count,) = r.unpack("<I")
    double, imagenet = r.unpack("<BB")
    stem = classifier = None
    blocks: list[PackedBlock] = []
    pending: dict[str, object] = {}
    for _ in range(count):
        kind, role = r.unpack("<BB")
        if kind == LayerKind.REAL_CONV:
            o, c, k, stride, padding = r.unpack("<5I")
            layer = RealConvLayer(r.f64(o, c, k, k), r.f64(o), r.f64(o), stride, padding)
        elif kind == LayerKind.BINARY_CONV:
            o, c, k, stride, padding, cw = r.unpack("<6I")
            tau = r.f64(o)
            flip = unpack_bits(PackedBitTensor((o,), r.u64(words_for(o)))) > 0
            words = r.u64(o, k, k, cw)
            counts = np.frombuffer(r.take(4 * o * k * k), dtype="<u4")
            if np.any(counts != c):
                raise FormatError("validity counts disagree with the channel count")
            scale, shift, in_scale, in_bias = r.f64(o), r.f64(o), r.f64(c), r.f64(c)
            layer = FusedLayer(PackedBitTensor((o, k, k, c), words), tau, flip, scale, shift, stride, padding,
                               in_scale, in_bias)
        elif kind == LayerKind.LINEAR:
            o, i = r.unpack("<2I")
            layer = LinearLayer(r.f64(o, i), r.f64(o))
        else:
            raise FormatError(f"unknown layer kind {kind} at byte offset {r.pos - 2}")
        if role == Role.STEM:
            stem = layer
        elif role == Role.SHORTCUT:
            pending["shortcut"] = layer
        elif role == Role.CONV1:
            pending["conv1"] = layer
        elif role == Role.CONV2:
            blocks.append(PackedBlock(pending.pop("conv1"), layer, pending.pop("shortcut", None)))
        elif role == Role.CLASSIFIER:
            classifier = layer
        else:
            raise FormatError(f"unknown layer role {role}")
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} unexpected trailing bytes")
    if stem is None or classifier is None or pending:
        raise FormatError("model file is missing layers")
    return PackedModel(Residual.DOUBLE if double else Residual.SINGLE, bool(imagenet), stem, tuple(blocks),
                       classifier)
