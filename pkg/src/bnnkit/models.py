"""Binary ResNet-18 / ResNet-20 builders with real-valued stem and classifier."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .binarizers import TrainingProgress
from .blocks import BinaryConv, BlockConfig, BuildingBlock, ConfigError, RealConvBN, kaiming_normal
from .module import Module
from .tensor import Tensor, global_avg_pool, linear, max_pool2d, parameter


class Arch(str, Enum):
    RESNET18 = "RESNET18"
    RESNET20 = "RESNET20"
    RESNET_TINY = "RESNET_TINY"  # width-0.25 ResNet-20 for desk-scale runs, not a published architecture


_STAGES = {
    Arch.RESNET18: ((64, 2), (128, 2), (256, 2), (512, 2)),
    Arch.RESNET20: ((16, 3), (32, 3), (64, 3)),
}


@dataclass(frozen=True)
class ModelConfig:
    arch: Arch = Arch.RESNET20
    block: BlockConfig = field(default_factory=BlockConfig)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    width_multiplier: float = 1.0
    imagenet_stem: bool = False

    def __post_init__(self):
        object.__setattr__(self, "arch", Arch(self.arch))
        if self.arch is Arch.RESNET_TINY and self.width_multiplier == 1.0:
            object.__setattr__(self, "width_multiplier", 0.25)
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError(f"width multiplier must be in (0, 1], got {self.width_multiplier}")

    def stage_plan(self) -> list[tuple[int, int]]:
        base = _STAGES[Arch.RESNET20 if self.arch is Arch.RESNET_TINY else self.arch]
        plan = []
        for channels, blocks in base:
            c = int(round(channels * self.width_multiplier))
            if c < 1:
                raise ConfigError(f"width multiplier {self.width_multiplier} leaves zero channels")
            plan.append((c, blocks))
        return plan


class ResNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        in_ch = cfg.input_shape[0]
        plan = cfg.stage_plan()
        c0 = plan[0][0]
        if cfg.imagenet_stem:
            self.stem = RealConvBN(in_ch, c0, 7, 2, 3, rng)
        else:
            self.stem = RealConvBN(in_ch, c0, 3, 1, 1, rng)
        self.blocks = []
        prev = c0
        for si, (c, n) in enumerate(plan):
            for bi in range(n):
                stride = 2 if (si > 0 and bi == 0) else 1
                bcfg = replace(cfg.block, channels=c, stride=stride)
                self.blocks.append(BuildingBlock(bcfg, prev, c, stride, rng))
                prev = c
        self.fc_weight = parameter(kaiming_normal(rng, (cfg.num_classes, prev)), "fc_weight")
        self.fc_bias = parameter(np.zeros(cfg.num_classes), "fc_bias")

    @property
    def binary_convs(self) -> list[BinaryConv]:
        return [conv for b in self.blocks for conv in (b.conv1, b.conv2)]

    def features(self, x: Tensor, progress: TrainingProgress | None = None, stage: int = 2,
                 mode: str = "train") -> Tensor:
        h = self.stem(x, mode)
        if self.cfg.imagenet_stem:
            h = max_pool2d(h, 3, 2, 1)
        for block in self.blocks:
            h = block(h, progress, stage, mode)
        return h

    def forward(self, x, progress: TrainingProgress | None = None, stage: int = 2, mode: str = "train") -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise ConfigError(f"input shape {x.shape[1:]} does not match model input {self.cfg.input_shape}")
        h = self.features(x, progress, stage, mode)
        return linear(global_avg_pool(h), self.fc_weight, self.fc_bias)

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0) -> ResNet:
    return ResNet(cfg, seed)


@dataclass
class ParamSummary:
    rows: list[tuple[str, int, int]]  # (layer, real, binarizable)

    @property
    def real(self) -> int:
        return sum(r for _, r, _ in self.rows)

    @property
    def binarizable(self) -> int:
        return sum(b for _, _, b in self.rows)

    def table(self) -> str:
        width = max(len(n) for n, _, _ in self.rows)
        lines = [f"{'layer':<{width}}  {'real':>10}  {'binary':>10}"]
        lines += [f"{n:<{width}}  {r:>10}  {b:>10}" for n, r, b in self.rows]
        lines.append(f"{'total':<{width}}  {self.real:>10}  {self.binarizable:>10}")
        return "\n".join(lines)


def param_summary(model: ResNet) -> ParamSummary:
    """Parameter counts per top-level layer; binary conv weights count as binarizable."""
    binary_ids = {id(c.weight) for c in model.binary_convs}
    rows: dict[str, list[int]] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        layer = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        if parts[0] == "blocks" and len(parts) > 2 and parts[2] in ("conv1", "conv2", "shortcut"):
            layer = ".".join(parts[:3])
        row = rows.setdefault(layer, [0, 0])
        row[1 if id(p) in binary_ids else 0] += p.size
    return ParamSummary([(k, r, b) for k, (r, b) in rows.items()])
