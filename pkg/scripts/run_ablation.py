#!/usr/bin/env python3
"""Sampling-strategy comparison on the synthetic dataset.

Trains all four strategies (random / gps / dss / gps_then_dss) on one
shared dataset across several seeds and prints median held-out retrieval
metrics per strategy. Equivalent to `crossview ablate --config
configs/ablate.cfg`, kept as a script for quick hacking on the recipe.
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from crossview.config import parse_config
from crossview.datasets import generate_synthetic
from crossview.sampler import SamplerConfig
from crossview.trainer import TrainConfig, train

STRATEGIES = ("random", "gps", "dss", "gps_then_dss")


def run(config_path, seeds):
    bundle = parse_config(config_path)
    records, queries, references = generate_synthetic(bundle.synth)
    print(f"dataset: {bundle.synth.n_pairs} pairs, noise {bundle.synth.noise_sigma}, "
          f"{bundle.synth.region_grid}x{bundle.synth.region_grid} regions")
    results = {}
    for strategy in STRATEGIES:
        finals = []
        for seed in range(seeds):
            sampler = SamplerConfig(
                batch_size=bundle.sampler.batch_size,
                pool_size=bundle.sampler.pool_size,
                picks_per_anchor=bundle.sampler.picks_per_anchor,
                refresh_every=bundle.sampler.refresh_every,
                gps_epochs=bundle.sampler.gps_epochs,
                strategy=strategy,
                seed=seed,
            )
            cfg = TrainConfig(
                epochs=bundle.train.epochs,
                warmup_epochs=bundle.train.warmup_epochs,
                lr_max=bundle.train.lr_max,
                hidden_dim=bundle.train.hidden_dim,
                embed_dim=bundle.train.embed_dim,
                loss=bundle.train.loss,
                sampler=sampler,
                seed=seed,
            )
            t0 = time.time()
            result = train(records, queries, references, cfg)
            finals.append(result.history[-1]["r1"])
            print(f"  {strategy:>12} seed {seed}: R@1={finals[-1]:.3f} ({time.time()-t0:.1f}s)")
        results[strategy] = finals

    print(f"\n{'strategy':>12}  {'median R@1':>10}  runs")
    for strategy in STRATEGIES:
        med = statistics.median(results[strategy])
        print(f"{strategy:>12}  {med:10.3f}  {[round(x, 3) for x in results[strategy]]}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(REPO / "configs" / "ablate.cfg"))
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()
    run(args.config, args.seeds)
