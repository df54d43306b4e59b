"""Sign binarization and the straight-through estimator family.

Every kind binarizes identically in the forward pass (``x >= 0 -> +1``); the
kinds differ only in the surrogate derivative used on the way back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import Tensor, make_node

SQRT2 = math.sqrt(2.0)


class ConfigError(ValueError):
    pass


class Kind(str, Enum):
    LC = "LC"
    LC_A = "LC_A"
    PN = "PN"
    GPN = "GPN"
    T = "T"
    EDE = "EDE"
    SS = "SS"
    EWGS = "EWGS"
    IDENTITY = "IDENTITY"


SCHEDULED = (Kind.T, Kind.EDE, Kind.GPN)


@dataclass(frozen=True)
class TrainingProgress:
    """Fraction ``T`` of total training completed, in [0, 1]."""

    T: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.T <= 1.0:
            raise ValueError(f"training progress must be in [0, 1], got {self.T}")

    @property
    def lambda_ede(self) -> float:
        return 10.0 ** (-3.0 + (1 + 3) * self.T)

    @property
    def lambda_gpn(self) -> float:
        return 10.0 ** (-2.0 + (1 + 2) * self.T)


@dataclass(frozen=True)
class BinarizerSpec:
    kind: Kind = Kind.LC
    clip_width: float = 1.0
    beta: float = 5.0
    delta: float = 1e-3
    gpn_k_clamp_at_one: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.clip_width <= 0:
            raise ConfigError("clip width must be positive")
        if self.beta <= 0:
            raise ConfigError("SwishSign beta must be positive")
        if self.delta < 0:
            raise ConfigError("EWGS delta must be non-negative")

    @classmethod
    def parse(cls, name: str, **kw) -> "BinarizerSpec":
        """Build from a table abbreviation such as ``LC_1.3``, ``PN`` or ``EWGS``."""
        name = name.strip()
        if name.upper() == "LC_A":
            return cls(Kind.LC_A, **kw)
        if name.upper().startswith("LC_"):
            try:
                width = float(name[3:])
            except ValueError:
                raise ConfigError(f"bad clip width in binarizer name {name!r}") from None
            return cls(Kind.LC, clip_width=width, **kw)
        try:
            return cls(Kind(name.upper()), **kw)
        except ValueError:
            raise ConfigError(f"unknown binarizer {name!r}") from None

    @property
    def name(self) -> str:
        if self.kind is Kind.LC:
            return f"LC_{self.clip_width:g}"
        return self.kind.value


LC_1 = BinarizerSpec(Kind.LC, 1.0)
IDENTITY = BinarizerSpec(Kind.IDENTITY)


def sign(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) >= 0) * 2.0 - 1.0


def schedule_lambda(kind, progress: TrainingProgress | float) -> float:
    """Sharpness of the gradual binarizers. T reuses the EDE schedule."""
    if not isinstance(progress, TrainingProgress):
        progress = TrainingProgress(float(progress))
    kind = Kind(kind)
    if kind in (Kind.EDE, Kind.T):
        return progress.lambda_ede
    if kind is Kind.GPN:
        return progress.lambda_gpn
    raise ConfigError(f"{kind.value} has no schedule")


def gpn_k(lam: float, clamp_at_one: bool = False) -> float:
    return max(1.0 / lam, 1.0) if clamp_at_one else max(1.0 / lam, 0.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _need_progress(spec: BinarizerSpec, progress) -> float:
    if progress is None:
        raise ConfigError(f"binarizer {spec.name} needs a training progress value")
    return schedule_lambda(spec.kind, progress)


def surrogate(spec: BinarizerSpec, x, progress: TrainingProgress | None = None, clip: float | None = None) -> np.ndarray:
    """The smooth stand-in for sign() whose derivative the STE uses.

    EWGS has no surrogate function and is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    kind = spec.kind
    if kind in (Kind.LC, Kind.LC_A):
        width = spec.clip_width if clip is None else clip
        return np.clip(x, -width, width)
    if kind is Kind.PN:
        return np.where(x < -1, -1.0, np.where(x < 0, 2 * x + x * x, np.where(x < 1, 2 * x - x * x, 1.0)))
    if kind is Kind.SS:
        bx = spec.beta * x
        s = _sigmoid(bx)
        return 2 * s * (1 + bx * (1 - s)) - 1
    if kind is Kind.T:
        lam = _need_progress(spec, progress)
        return np.tanh(lam * x)
    if kind is Kind.EDE:
        lam = _need_progress(spec, progress)
        return max(1.0 / lam, 1.0) * np.tanh(lam * x)
    if kind is Kind.GPN:
        lam = _need_progress(spec, progress)
        k = gpn_k(lam, spec.gpn_k_clamp_at_one)
        inner = -np.sign(x) * lam * lam * x * x / 2 + SQRT2 * lam * x
        return np.where(np.abs(x) < SQRT2 / lam, k * inner, k * np.sign(x))
    if kind is Kind.IDENTITY:
        return x
    raise ConfigError(f"{kind.value} has no surrogate function")


def ste_backward(spec: BinarizerSpec, x_r, g_out, progress: TrainingProgress | None = None,
                 clip: float | None = None) -> np.ndarray:
    """Gradient w.r.t. the real input given the gradient w.r.t. the sign output."""
    x = np.asarray(x_r, dtype=np.float64)
    g = np.asarray(g_out, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"x_r {x.shape} and g_out {g.shape} differ in shape")
    kind = spec.kind
    if kind is Kind.IDENTITY:
        return g.copy()
    if kind in (Kind.LC, Kind.LC_A):
        width = spec.clip_width if clip is None else clip
        return g * (np.abs(x) <= width)
    if kind is Kind.PN:
        d = np.where((x >= -1) & (x < 0), 2 + 2 * x, np.where((x >= 0) & (x < 1), 2 - 2 * x, 0.0))
        return g * d
    if kind is Kind.SS:
        bx = spec.beta * x
        s = _sigmoid(bx)
        return g * (2 * spec.beta * s * (1 - s) * (2 + bx * (1 - 2 * s)))
    if kind is Kind.T:
        lam = _need_progress(spec, progress)
        return g * lam * (1 - np.tanh(lam * x) ** 2)
    if kind is Kind.EDE:
        lam = _need_progress(spec, progress)
        return g * max(1.0 / lam, 1.0) * lam * (1 - np.tanh(lam * x) ** 2)
    if kind is Kind.GPN:
        lam = _need_progress(spec, progress)
        k = gpn_k(lam, spec.gpn_k_clamp_at_one)
        ax = np.abs(x)
        return g * np.where(ax < SQRT2 / lam, k * lam * (SQRT2 - lam * ax), 0.0)
    if kind is Kind.EWGS:
        return g * (1 + spec.delta * np.sign(g) * (x - sign(x)))
    raise ConfigError(f"unhandled binarizer {kind}")


def clip_grad(x_r, g_out, clip: float) -> float:
    """Gradient of the clipped-identity surrogate w.r.t. its clip width (LC_A)."""
    x = np.asarray(x_r)
    return float(np.sum(g_out * np.sign(x) * (np.abs(x) > clip)))


def sign_forward(x: Tensor, spec: BinarizerSpec = LC_1, progress: TrainingProgress | None = None,
                 clip: Tensor | None = None) -> Tensor:
    """Binarize ``x`` to {-1, +1}; the backward pass uses ``spec``'s estimator.

    ``clip`` is the learnable width for LC_A and receives its own gradient.
    """
    if spec.kind is Kind.IDENTITY:
        return x
    if spec.kind in SCHEDULED and progress is None:
        raise ConfigError(f"binarizer {spec.name} needs a training progress value")
    if spec.kind is Kind.LC_A and clip is None:
        raise ConfigError("LC_A needs a learnable clip parameter")
    xd = x.data
    out = sign(xd)
    if spec.kind is Kind.LC_A:
        width = float(clip.data.reshape(-1)[0])

        def backward(g):
            gc = np.full(clip.shape, clip_grad(xd, g, width))
            return ste_backward(spec, xd, g, progress, clip=width), gc

        return make_node(out, (x, clip), backward, f"sign[{spec.name}]")

    return make_node(out, (x,), lambda g: (ste_backward(spec, xd, g, progress),), f"sign[{spec.name}]")
