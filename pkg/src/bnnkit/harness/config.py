"""Plain-text ``key = value`` experiment configs keyed by the repair abbreviations.

Example::

    name = baseline
    arch = RESNET_TINY
    FB = LC_1          # feature binarizer
    WB = LC_1          # weight binarizer
    FN = NONE          # feature normalization: NONE, LB, STD, BN
    WN = NONE          # weight normalization: NONE, MSTD, MSTDB
    SF = NONE          # scaling factor: NONE, AM, LF, LFI
    ACT = I&H          # NONE, I&H, ReLU, PReLU, RPReLU, DPReLU
    2R = N             # double residual
    TST = N            # two-stage training
    OPT = SGD
    REG = NONE         # NONE, R1, R2, RE (RD is R1)
    gpn_k_clamp_at_one = N   # GPN k = max(1/lambda, 1) instead of max(1/lambda, 0)
    seeds = 1, 2, 3, 4, 5

Lines starting with ``#`` and trailing ``# comments`` are ignored.
Values such as ``TST_Y`` or ``2R_N`` are accepted as well as bare ``Y``/``N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..binarizers import BinarizerSpec
from ..blocks import ActivationSpec, BlockConfig, ConfigError, Residual, ScaleKind, ScalingFactorSpec
from ..models import Arch, ModelConfig
from ..normalizers import NormalizerSpec
from ..train import LossSpec, OptKind, RegKind, TrainConfig
from .augment import AugmentFlags

# canonical key -> accepted spellings (compared case-insensitively)
_ALIASES = {
    "name": ("name",),
    "arch": ("arch",),
    "width": ("width", "width_multiplier"),
    "classes": ("classes", "num_classes"),
    "input": ("input", "input_shape"),
    "imagenet_stem": ("imagenet_stem",),
    "FB": ("fb", "feature_binarizer"),
    "WB": ("wb", "weight_binarizer"),
    "gpn_k_clamp_at_one": ("gpn_k_clamp_at_one",),
    "FN": ("fn", "feature_norm"),
    "WN": ("wn", "weight_norm"),
    "WN_CENTER": ("wn_center",),
    "SF": ("sf", "scaling_factor"),
    "ACT": ("act", "activation"),
    "2R": ("2r", "double_residual"),
    "TST": ("tst", "two_stage"),
    "TST_SPLIT": ("tst_split", "split_fraction"),
    "OPT": ("opt", "optimizer"),
    "REG": ("reg", "regularization"),
    "REG_LAMBDA": ("reg_lambda",),
    "REG_ALPHA": ("reg_alpha",),
    "REG_ENTROPY": ("reg_entropy", "wanted_entropy"),
    "lr": ("lr", "learning_rate"),
    "momentum": ("momentum",),
    "weight_decay": ("weight_decay", "wd"),
    "epochs": ("epochs",),
    "batch": ("batch", "batch_size"),
    "warmup": ("warmup", "warmup_epochs"),
    "seeds": ("seeds",),
    "dataset": ("dataset",),
    "dataset_kind": ("dataset_kind",),
    "flip": ("flip",),
    "crop": ("crop",),
    "crop_padding": ("crop_padding",),
    "normalize": ("normalize",),
    "out": ("out",),
}
_LOOKUP = {spelling: key for key, spellings in _ALIASES.items() for spelling in spellings}


def canonical_key(raw: str) -> str:
    try:
        return _LOOKUP[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown config key {raw!r}") from None


def _yes_no(value: str, key: str) -> bool:
    v = value.strip().upper()
    for prefix in ("TST_", "2R_", "SE_"):
        if v.startswith(prefix):
            v = v[len(prefix):]
    if v in ("Y", "YES", "TRUE", "1"):
        return True
    if v in ("N", "NO", "FALSE", "0"):
        return False
    raise ConfigError(f"{key}: expected Y/N, got {value!r}")


def _reg_kind(value: str) -> RegKind:
    v = value.strip().upper()
    if v == "RD":
        return RegKind.R1
    try:
        return RegKind(v)
    except ValueError:
        raise ConfigError(f"REG: unknown regularizer {value!r}") from None


def _scale_kind(value: str) -> ScaleKind:
    try:
        return ScaleKind(value.strip().upper())
    except ValueError:
        raise ConfigError(f"SF: unknown scaling factor {value!r}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    dataset: str = ""
    dataset_kind: str = "IDX"
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    out: str = "runs"
    raw: tuple[tuple[str, str], ...] = ()  # canonical (key, value) pairs as parsed

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.dataset_kind.upper() not in ("IDX", "CIFAR_BIN"):
            raise ConfigError(f"dataset_kind must be IDX or CIFAR_BIN, got {self.dataset_kind!r}")

    @property
    def block(self) -> BlockConfig:
        return self.model.block

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.raw)

    def with_overrides(self, **values: str) -> "ExperimentConfig":
        """Re-parse with some keys replaced (keys use config-file spellings)."""
        merged = dict(self.raw)
        for k, v in values.items():
            merged[canonical_key(k)] = str(v)
        return from_pairs(list(merged.items()))


def parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = canonical_key(key)
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        pairs[key] = value
    return list(pairs.items())


def _input_shape(value: str) -> tuple[int, int, int]:
    parts = value.lower().replace(",", "x").split("x")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"input: expected CxHxW, got {value!r}") from None
    if len(shape) != 3:
        raise ConfigError(f"input: expected CxHxW, got {value!r}")
    return shape  # type: ignore[return-value]


def from_pairs(pairs: list[tuple[str, str]]) -> ExperimentConfig:
    kv = dict(pairs)
    get = kv.get
    try:
        clamp = _yes_no(get("gpn_k_clamp_at_one", "N"), "gpn_k_clamp_at_one")
        block = BlockConfig(
            feature_binarizer=BinarizerSpec.parse(get("FB", "LC_1"), gpn_k_clamp_at_one=clamp),
            weight_binarizer=BinarizerSpec.parse(get("WB", "LC_1"), gpn_k_clamp_at_one=clamp),
            feature_norm=NormalizerSpec.parse(get("FN", "NONE")),
            weight_norm=NormalizerSpec.parse(get("WN", "NONE"), center=get("WN_CENTER", "mean")),
            scaling=ScalingFactorSpec(_scale_kind(get("SF", "NONE"))),
            activation=ActivationSpec.parse(get("ACT", "I&H")),
            residual=Residual.DOUBLE if _yes_no(get("2R", "N"), "2R") else Residual.SINGLE,
        )
        model = ModelConfig(
            arch=Arch(get("arch", "RESNET20").upper()),
            block=block,
            num_classes=int(get("classes", "10")),
            input_shape=_input_shape(get("input", "3x32x32")),
            width_multiplier=float(get("width", "1.0")),
            imagenet_stem=_yes_no(get("imagenet_stem", "N"), "imagenet_stem"),
        )
        lr = get("lr")
        train = TrainConfig(
            epochs=int(get("epochs", "30")),
            batch_size=int(get("batch", "128")),
            warmup_epochs=int(get("warmup", "2")),
            optimizer=OptKind(get("OPT", "SGD").upper()),
            lr=float(lr) if lr not in (None, "", "default") else None,
            momentum=float(get("momentum", "0.9")),
            weight_decay=float(get("weight_decay", "1e-4")),
            loss=LossSpec(_reg_kind(get("REG", "NONE")), float(get("REG_ALPHA", "1")),
                          float(get("REG_LAMBDA", "0")), float(get("REG_ENTROPY", "1"))),
            two_stage=_yes_no(get("TST", "N"), "TST"),
            split_fraction=float(get("TST_SPLIT", "0.5")),
        )
        augment = AugmentFlags(
            flip=_yes_no(get("flip", "Y"), "flip"),
            crop=_yes_no(get("crop", "Y"), "crop"),
            normalize=_yes_no(get("normalize", "Y"), "normalize"),
            crop_padding=int(get("crop_padding", "4")),
        )
        seeds = tuple(int(s) for s in get("seeds", "1,2,3,4,5").replace(" ", "").split(",") if s)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if train.epochs < 1 or train.batch_size < 1:
        raise ConfigError("epochs and batch must be positive")
    return ExperimentConfig(get("name", "experiment"), model, train, seeds, get("dataset", ""),
                            get("dataset_kind", "IDX").upper(), augment, get("out", "runs"), tuple(pairs))


def parse_config(text: str) -> ExperimentConfig:
    return from_pairs(parse_pairs(text))


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def override(cfg: ExperimentConfig, *, seed: int | None = None, dataset: str | None = None,
             epochs: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Apply command-line flags on top of a parsed config."""
    values: dict[str, str] = {}
    if seed is not None:
        values["seeds"] = str(seed)
    if dataset is not None:
        values["dataset"] = dataset
    if epochs is not None:
        values["epochs"] = str(epochs)
    if out is not None:
        values["out"] = out
    return cfg.with_overrides(**values) if values else cfg


def parse_grid(text: str) -> list[tuple[str, list[str]]]:
    """A factor grid: one ``key = v1, v2, ...`` line per factor."""
    factors = []
    for key, value in parse_pairs(text):
        values = [v.strip() for v in value.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid factor {key} has no values")
        factors.append((key, values))
    return factors


def _effective(cfg: ExperimentConfig) -> tuple:
    return cfg.model, cfg.train, cfg.dataset, cfg.dataset_kind, cfg.augment


def config_difference(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    """Keys whose effective setting differs, ignoring seeds, name and out.

    Each key is judged by swapping in b's value, so ``2R = N`` versus an
    omitted ``2R`` (default N) is not a difference.
    """
    ignored = {"seeds", "name", "out"}
    da, db = dict(a.raw), dict(b.raw)
    base = _effective(a)
    diffs = []
    for key in sorted((set(da) | set(db)) - ignored):
        if da.get(key) == db.get(key):
            continue
        swapped = dict(da)
        if key in db:
            swapped[key] = db[key]
        else:
            swapped.pop(key)
        if _effective(from_pairs(list(swapped.items()))) != base:
            diffs.append(key)
    return diffs
