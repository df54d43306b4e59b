"""Build the digits IDX set if needed, then train the baseline and double-residual configs."""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from make_digits_idx import build

from bnnkit.harness.config import load_config, override
from bnnkit.harness.experiment import run_experiment
from bnnkit.harness.report import summarize

HERE = Path(__file__).resolve().parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="data/digits28")
    ap.add_argument("--out", default="runs/digits")
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()
    data = Path(args.data)
    if not (data / "train-images-idx3-ubyte").exists():
        build(data)
    base = override(load_config(HERE / "configs" / "digits_baseline.txt"),
                    dataset=str(data), out=args.out, epochs=args.epochs)
    summaries = []
    for cfg in (base, base.with_overrides(**{"2R": "Y", "name": "digits_2R"})):
        start = time.perf_counter()
        summaries.append(run_experiment(cfg, save_models=False))
        print(f"{cfg.name}: {time.perf_counter() - start:.0f} s")
    print(summarize(summaries).text())


if __name__ == "__main__":
    main()
