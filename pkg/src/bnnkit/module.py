"""Minimal parameter-container base class."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .normalizers import BatchNormParams, FeatureNormState
from .tensor import Tensor


class Module:
    """Walks attributes in definition order to find parameters and buffers.

    Parameters are tensors with ``requires_grad``; buffers are the BN running
    statistics plus anything listed in ``_buffers``.
    """

    _buffers: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            yield from _params_of(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, np.asarray(getattr(self, name))
        for name, value in self._children():
            yield from _buffers_of(value, prefix + name)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{n}": p.data.copy() for n, p in self.named_parameters()}
        state.update({f"buffer:{n}": np.array(b, copy=True) for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            arr = np.asarray(state[f"param:{name}"], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
        for name, _ in list(self.named_buffers()):
            _set_buffer(self, name, np.asarray(state[f"buffer:{name}"]))


def _params_of(value, prefix: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix + ".")
    elif isinstance(value, BatchNormParams):
        yield prefix + ".gamma", value.gamma
        yield prefix + ".beta", value.beta
    elif isinstance(value, FeatureNormState):
        if value.bias is not None:
            yield prefix + ".bias", value.bias
        if value.bn is not None:
            yield from _params_of(value.bn, prefix + ".bn")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _params_of(item, f"{prefix}.{i}")


def _buffers_of(value, prefix: str):
    if isinstance(value, Module):
        yield from value.named_buffers(prefix + ".")
    elif isinstance(value, BatchNormParams):
        yield prefix + ".running_mu", value.running_mu
        yield prefix + ".running_var", value.running_var
    elif isinstance(value, FeatureNormState) and value.bn is not None:
        yield from _buffers_of(value.bn, prefix + ".bn")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _buffers_of(item, f"{prefix}.{i}")


def _set_buffer(root, dotted: str, arr: np.ndarray) -> None:
    parts = dotted.split(".")
    obj = root
    for part in parts[:-1]:
        obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
    leaf = parts[-1]
    current = getattr(obj, leaf)
    if isinstance(current, (bool, np.bool_)):
        setattr(obj, leaf, bool(arr))
    else:
        setattr(obj, leaf, np.array(arr, dtype=np.float64))
