"""Optimizers, learning-rate schedule, two-stage control, regularizers and the epoch loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .binarizers import IDENTITY, TrainingProgress
from .models import ResNet
from .tensor import Tape, Tensor, add, cross_entropy, make_node, mul

METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_acc")


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class OptKind(str, Enum):
    SGD = "SGD"
    ADAM = "ADAM"


DEFAULT_LR = {OptKind.SGD: 0.1, OptKind.ADAM: 1e-3}


@dataclass
class OptimizerState:
    kind: OptKind = OptKind.SGD
    lr: float | None = None
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.kind = OptKind(self.kind)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.kind]

    def _buffers(self, params: Sequence[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif len(self.m) != len(params):
            raise ValueError(f"optimizer holds {len(self.m)} buffers but got {len(params)} parameters")

    def step(self, tensors: Sequence[Tensor]) -> None:
        """Update tensors in place from their ``.grad`` (missing grads count as zero)."""
        params = [t.data for t in tensors]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        fn = sgd_step if self.kind is OptKind.SGD else adam_step
        for t, new in zip(tensors, fn(self, params, grads)):
            t.data = new


def _checked(state: OptimizerState, params, grads) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"parameter {i}: grad shape {g.shape} != {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g.reshape(-1)))[0])
            raise TrainingDiverged(f"non-finite gradient in parameter {i} at flat index {bad}")
        out.append(g + state.weight_decay * p if state.weight_decay else g)
    return out


def sgd_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Momentum SGD: ``m = mu*m - lr*g``; ``W = W + m``. Returns new arrays."""
    if state.kind is not OptKind.SGD:
        raise ValueError("sgd_step needs an SGD optimizer state")
    grads = _checked(state, params, grads)
    state._buffers(params)
    state.t += 1
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.momentum * state.m[i] - state.lr * g
        out.append(p + state.m[i])
    return out


def adam_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """ADAM with bias correction; eps sits inside the square root."""
    if state.kind is not OptKind.ADAM:
        raise ValueError("adam_step needs an ADAM optimizer state")
    grads = _checked(state, params, grads)
    state._buffers(params)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** state.t)
        v_hat = state.v[i] / (1 - b2 ** state.t)
        out.append(p - state.lr * m_hat / np.sqrt(v_hat + state.eps))
    return out


def lr_at(epoch: float, total_epochs: float, warmup_epochs: float = 2, peak_lr: float = 0.1) -> float:
    """Linear warm-up to ``peak_lr`` then cosine decay to zero at ``total_epochs``."""
    if not total_epochs > warmup_epochs >= 0:
        raise ValueError("need total_epochs > warmup_epochs >= 0")
    if epoch < warmup_epochs:
        return peak_lr * epoch / warmup_epochs
    s = min((epoch - warmup_epochs) / (total_epochs - warmup_epochs), 1.0)
    return peak_lr * 0.5 * (1 + math.cos(math.pi * s))


# -- losses --------------------------------------------------------------------

class RegKind(str, Enum):
    NONE = "NONE"
    R1 = "R1"
    R2 = "R2"
    RE = "RE"


ENTROPY_SHARPNESS = 10.0


@dataclass(frozen=True)
class LossSpec:
    reg_kind: RegKind = RegKind.NONE
    reg_alpha: float = 1.0
    reg_lambda: float = 0.0
    wanted_entropy: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "reg_kind", RegKind(self.reg_kind))


def binary_entropy(p: float) -> float:
    """Shannon entropy in bits of a two-outcome distribution."""
    if p <= 0 or p >= 1:
        return 0.0
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


def sign_entropy(w: np.ndarray) -> float:
    """Hard-count entropy of the binarized weights (reporting only)."""
    return binary_entropy(float(np.mean(np.asarray(w) >= 0)))


def _entropy_term(w: Tensor, wanted: float) -> Tensor:
    wd = w.data
    th = np.tanh(ENTROPY_SHARPNESS * wd)
    p = float(np.clip(np.mean((th + 1) / 2), 1e-12, 1 - 1e-12))
    h = binary_entropy(p)
    gap = h - wanted

    def backward(g):
        dh_dp = math.log2((1 - p) / p)
        dp_dw = ENTROPY_SHARPNESS * (1 - th * th) / (2 * wd.size)
        return (float(g) * np.sign(gap) * dh_dp * dp_dw,)

    return make_node(np.array(abs(gap)), (w,), backward, "entropy_reg")


def _distance_term(w: Tensor, target: float, squared: bool) -> Tensor:
    wd = w.data
    d = target - np.abs(wd)
    value = np.sum(d * d) if squared else np.sum(np.abs(d))

    def backward(g):
        # d/dW of |a - |W|| is -sign(a - |W|) * sign(W)
        inner = 2 * d if squared else np.sign(d)
        return (-float(g) * inner * np.sign(wd),)

    return make_node(np.array(value), (w,), backward, "r2_reg" if squared else "r1_reg")


def regularization_loss(spec: LossSpec, weights: Iterable[Tensor]) -> Tensor:
    """Sum of the per-layer regularizer over the latent binary-conv weights."""
    if spec.reg_kind is RegKind.NONE:
        raise ValueError("regularization_loss needs a regularizer kind other than NONE")
    total = None
    for w in weights:
        if spec.reg_kind is RegKind.RE:
            term = _entropy_term(w, spec.wanted_entropy)
        else:
            term = _distance_term(w, spec.reg_alpha, squared=spec.reg_kind is RegKind.R2)
        total = term if total is None else add(total, term)
    if total is None:
        raise ValueError("no weights to regularize")
    return total


def total_loss(spec: LossSpec, logits: Tensor, labels: np.ndarray, weights: Iterable[Tensor]) -> Tensor:
    ce = cross_entropy(logits, labels)
    if spec.reg_kind is RegKind.NONE or spec.reg_lambda == 0:
        return ce
    return add(ce, mul(regularization_loss(spec, weights), spec.reg_lambda))


# -- two-stage control -----------------------------------------------------------

@dataclass
class StageController:
    """Stage 1 keeps weights real; stage 2 binarizes them and drops weight decay.

    With ``two_stage=False`` every epoch is stage 2 and weight decay is left alone.
    """

    two_stage: bool = False
    split_fraction: float = 0.5
    stage: int = 2

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.two_stage:
            self.stage = 1

    def stage_for(self, epoch: int, total_epochs: int) -> int:
        if not self.two_stage:
            return 2
        return 1 if epoch < int(round(self.split_fraction * total_epochs)) else 2

    def update(self, epoch: int, total_epochs: int, optimizer: OptimizerState) -> int:
        new = self.stage_for(epoch, total_epochs)
        if self.two_stage and new == 2:
            optimizer.weight_decay = 0.0
        self.stage = new
        return new


def training_state(model: ResNet, optimizer: OptimizerState, controller: StageController) -> dict[str, object]:
    """Flat snapshot of everything a stage switch could touch, for diffing."""
    state: dict[str, object] = {
        f"weight_binarizer.{i}": (conv.cfg.weight_binarizer if controller.stage == 2 else IDENTITY).name
        for i, conv in enumerate(model.binary_convs)
    }
    state.update({f"feature_binarizer.{i}": conv.cfg.feature_binarizer.name
                  for i, conv in enumerate(model.binary_convs)})
    for key in ("kind", "lr", "momentum", "beta1", "beta2", "eps", "weight_decay", "t"):
        state[f"optimizer.{key}"] = getattr(optimizer, key)
    for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
        state[f"optimizer.m.{i}"] = m.tobytes()
        state[f"optimizer.v.{i}"] = v.tobytes()
    for name, value in model.state_dict().items():
        state[name] = np.asarray(value).tobytes()
    return state


# -- loops -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    warmup_epochs: int = 2
    optimizer: OptKind = OptKind.SGD
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: LossSpec = field(default_factory=LossSpec)
    two_stage: bool = False
    split_fraction: float = 0.5

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(OptKind(self.optimizer), lr=self.lr, momentum=self.momentum,
                              weight_decay=self.weight_decay)

    @property
    def effective_warmup(self) -> int:
        # runs shorter than the warm-up fall back to a warm-up of epochs - 1
        return min(self.warmup_epochs, self.epochs - 1)

    @property
    def peak_lr(self) -> float:
        return DEFAULT_LR[OptKind(self.optimizer)] if self.lr is None else self.lr


Transform = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate(model: ResNet, x: np.ndarray, y: np.ndarray, batch_size: int = 256, stage: int = 2) -> float:
    """Top-1 accuracy in eval mode (running BN statistics, no tape)."""
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    correct = 0
    progress = TrainingProgress(1.0)
    for i in range(0, len(x), batch_size):
        logits = model(x[i:i + batch_size], progress, stage, mode="eval").data
        correct += int(np.sum(logits.argmax(axis=1) == y[i:i + batch_size]))
    return correct / len(x)


def train_epoch(model: ResNet, data: tuple[np.ndarray, np.ndarray], optimizer: OptimizerState,
                loss_spec: LossSpec, controller: StageController, epoch: int, cfg: TrainConfig,
                rng: np.random.Generator, transform: Transform | None = None,
                test_data: tuple[np.ndarray, np.ndarray] | None = None) -> dict[str, float]:
    """One pass over ``data``; returns a metrics row (test_acc is NaN without test data).

    Training progress and learning rate advance per batch. Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    x, y = data
    stage = controller.update(epoch, cfg.epochs, optimizer)
    batches = _batches(len(x), cfg.batch_size, rng)
    nb = len(batches)
    params = model.parameters()
    weights = [c.weight for c in model.binary_convs]
    loss_sum = 0.0
    correct = 0
    epoch_lr = None
    for b, idx in enumerate(batches):
        frac = (epoch * nb + b) / (cfg.epochs * nb)
        progress = TrainingProgress(min(frac, 1.0))
        optimizer.lr = lr_at(epoch + (b + 1) / nb, cfg.epochs, cfg.effective_warmup, cfg.peak_lr)
        if epoch_lr is None:
            epoch_lr = optimizer.lr
        xb = x[idx] if transform is None else transform(x[idx], rng)
        model.zero_grad()
        with Tape() as tape:
            logits = model(xb, progress, stage, mode="train")
            loss = total_loss(loss_spec, logits, y[idx], weights)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}")
        tape.backward(loss)
        optimizer.step(params)
        loss_sum += value * len(idx)
        correct += int(np.sum(logits.data.argmax(axis=1) == y[idx]))
    test_acc = evaluate(model, *test_data, stage=stage) if test_data is not None else float("nan")
    return {"epoch": epoch, "lr": epoch_lr, "train_loss": loss_sum / len(x),
            "train_acc": correct / len(x), "test_acc": test_acc}


@dataclass
class FitResult:
    history: list[dict[str, float]]
    failed: bool = False
    error: str | None = None

    @property
    def final_test_acc(self) -> float:
        return self.history[-1]["test_acc"] if self.history else float("nan")


def fit(model: ResNet, train_data, test_data, cfg: TrainConfig, seed: int,
        transform: Transform | None = None, on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train for ``cfg.epochs``; a divergence ends the run and is reported, not raised."""
    rng = np.random.default_rng(seed)
    optimizer = cfg.make_optimizer()
    controller = StageController(cfg.two_stage, cfg.split_fraction)
    history = []
    for epoch in range(cfg.epochs):
        try:
            row = train_epoch(model, train_data, optimizer, cfg.loss, controller, epoch, cfg, rng,
                              transform, test_data)
        except TrainingDiverged as exc:
            return FitResult(history, failed=True, error=str(exc))
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return FitResult(history)
