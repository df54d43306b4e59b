"""Seeded multi-run experiments, one-factor sweeps and their on-disk outputs.

Layout under the output directory::

    <name>/config.txt
    <name>/seed_<s>.csv        per-epoch metrics
    <name>/model_seed_<s>.npz  final parameters and buffers
    <name>/summary.json
"""
from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..blocks import ConfigError
from ..models import ResNet, build_model
from ..train import METRIC_FIELDS, FitResult, fit
from .augment import ChannelStats, augment
from .config import ExperimentConfig, config_difference
from .data import LabeledImages, load_dataset
from .report import RunSummary, comparison_rows

log = logging.getLogger(__name__)


class IsolationError(ConfigError):
    pass


@dataclass(frozen=True)
class DataBundle:
    train: LabeledImages
    test: LabeledImages
    stats: ChannelStats


@lru_cache(maxsize=4)
def _load(path: str, kind: str) -> DataBundle:
    train = load_dataset(path, kind, "train")
    test = load_dataset(path, kind, "test")
    return DataBundle(train, test, ChannelStats.of(train.images))


def load_data(cfg: ExperimentConfig) -> DataBundle:
    """Train/test splits plus training-split channel statistics (cached per path)."""
    if not cfg.dataset:
        raise ConfigError("no dataset path configured")
    return _load(str(Path(cfg.dataset).resolve()), cfg.dataset_kind)


def metrics_csv(history: list[dict[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def save_model(model: ResNet, path: str | Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **model.state_dict())


def load_model(cfg: ExperimentConfig, path: str | Path) -> ResNet:
    model = build_model(cfg.model, seed=0)
    with np.load(path) as data:
        model.load_state_dict({k: data[k] for k in data.files})
    return model


def train_seed(cfg: ExperimentConfig, seed: int, data: DataBundle) -> tuple[FitResult, ResNet]:
    model = build_model(cfg.model, seed)
    flags = cfg.augment
    test_x = augment(data.test.images, flags, None, data.stats, train=False)

    def transform(batch, rng):
        return augment(batch, flags, rng, data.stats)

    result = fit(model, (data.train.images, data.train.labels), (test_x, data.test.labels), cfg.train, seed,
                 transform=transform,
                 on_epoch=lambda row: log.info("%s seed %d epoch %d: loss %.4f test %.4f", cfg.name, seed,
                                               row["epoch"], row["train_loss"], row["test_acc"]))
    return result, model


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   data: DataBundle | None = None, save_models: bool = True) -> RunSummary:
    """Train every seed; failed seeds are recorded and the rest still run."""
    out = Path(out_dir if out_dir is not None else cfg.out) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    seeds, accs, failed = [], [], {}
    for seed in cfg.seeds:
        try:
            bundle = data if data is not None else load_data(cfg)
            result, model = train_seed(cfg, seed, bundle)
            (out / f"seed_{seed}.csv").write_text(metrics_csv(result.history))
            if result.failed:
                failed[seed] = result.error or "training failed"
                continue
            if save_models:
                save_model(model, out / f"model_seed_{seed}.npz")
        except (OSError, ValueError) as exc:
            failed[seed] = f"{type(exc).__name__}: {exc}"
            log.warning("%s seed %d failed: %s", cfg.name, seed, exc)
            continue
        acc = result.final_test_acc
        if math.isnan(acc):
            failed[seed] = "no test accuracy recorded"
            continue
        seeds.append(seed)
        accs.append(acc)
    summary = RunSummary(cfg.name, seeds, accs, failed)
    (out / "summary.json").write_text(summary.to_json())
    return summary


def sweep_configs(base: ExperimentConfig, factors: list[tuple[str, list[str]]],
                  one_factor: bool = True) -> list[ExperimentConfig]:
    """The baseline followed by one variant per (factor, value).

    With ``one_factor`` every variant must differ from the baseline in
    exactly that factor; values equal to the baseline's are skipped.
    """
    configs = [base]
    for key, values in factors:
        for value in values:
            label = re.sub(r"[^A-Za-z0-9_.-]", "_", f"{key}-{value}")
            variant = base.with_overrides(**{key: value, "name": f"{base.name}__{label}"})
            diff = config_difference(base, variant)
            if not diff:
                continue
            if one_factor and len(diff) != 1:
                raise IsolationError(f"{key}={value} changes {diff}, not exactly one factor")
            configs.append(variant)
    return configs


def run_sweep(base: ExperimentConfig, factors: list[tuple[str, list[str]]], out_dir: str | Path | None = None,
              one_factor: bool = True, save_models: bool = False) -> tuple[list[RunSummary], list[dict]]:
    configs = sweep_configs(base, factors, one_factor)
    data = None
    try:
        data = load_data(base)
    except (OSError, ValueError) as exc:
        log.warning("dataset could not be loaded: %s", exc)
    summaries = [run_experiment(c, out_dir, data, save_models) for c in configs]
    return summaries, comparison_rows(summaries[0], summaries[1:])
