"""Epoch batch planning with geographic and visual hard-negative pools.

Training starts from GPS-based pools (geographic neighbours make good
negatives before the model has learned anything) and switches to dynamic
similarity pools built from the model's own embeddings. Each anchor
contributes k picks from its pool of size K: the k/2 nearest, plus k/2
drawn uniformly from the rest of the pool to keep batches diverse between
pool refreshes (every ``refresh_every`` epochs). A within-epoch lookup
prevents double entries, so every pair appears in exactly one batch per
epoch, and no batch holds two members of the same class.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import EmbeddingTable, SampleRecord
from .errors import ValidationError
from .geo import GeoConfig, geo_topk
from .simsearch import NeighborPool, visual_topk

STRATEGIES = ("random", "gps", "dss", "gps_then_dss")


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 128
    pool_size: int = 128
    picks_per_anchor: int = 64
    refresh_every: int = 4
    gps_epochs: int = 4
    strategy: str = "gps_then_dss"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy {self.strategy!r} not in {STRATEGIES}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.picks_per_anchor < 2:
            raise ValidationError("picks_per_anchor must be >= 2")
        if self.picks_per_anchor % 2 != 0:
            raise ValidationError("picks_per_anchor must be even")
        if self.picks_per_anchor > self.pool_size:
            raise ValidationError(
                f"picks_per_anchor={self.picks_per_anchor} exceeds pool_size={self.pool_size}"
            )
        if self.refresh_every < 1:
            raise ValidationError("refresh_every must be >= 1")
        if self.gps_epochs < 0:
            raise ValidationError("gps_epochs must be >= 0")


@dataclass(frozen=True)
class BatchPlan:
    """One epoch's batches: each pair_index appears exactly once overall."""

    epoch: int
    batches: tuple[tuple[int, ...], ...]
    strategy_used: str


def resolve_strategy(cfg: SamplerConfig, epoch: int) -> str:
    """Effective strategy at ``epoch``: gps_then_dss switches after gps_epochs."""
    if cfg.strategy == "gps_then_dss":
        return "gps" if epoch < cfg.gps_epochs else "dss"
    return cfg.strategy


def plan_rng(cfg: SamplerConfig, epoch: int) -> np.random.Generator:
    """The per-epoch planning stream; shared by the trainer and the plan CLI."""
    return np.random.default_rng([cfg.seed, epoch])


def should_refresh(epoch: int, cfg: SamplerConfig) -> bool:
    """Whether visual pools must be (re)built from fresh embeddings at ``epoch``."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if cfg.strategy in ("random", "gps"):
        return False
    if cfg.strategy == "dss":
        return epoch % cfg.refresh_every == 0
    return epoch >= cfg.gps_epochs and (epoch - cfg.gps_epochs) % cfg.refresh_every == 0


def build_geo_pools(
    records: list[SampleRecord], cfg: SamplerConfig, geo: GeoConfig = GeoConfig()
) -> list[NeighborPool]:
    """Geographic pools of size pool_size over the records' own coordinates."""
    coords = [r.coord for r in records]
    return geo_topk(coords, coords, cfg.pool_size, geo)


def build_sim_pools(
    queries: EmbeddingTable, references: EmbeddingTable, cfg: SamplerConfig
) -> list[NeighborPool]:
    """Visual pools of size pool_size from unit-normalised embedding tables."""
    return visual_topk(queries, references, cfg.pool_size)


def pick_from_pool(
    pool: NeighborPool, cfg: SamplerConfig, rng_state: np.random.Generator
) -> list[int]:
    """Select k pool members: the k/2 nearest plus k/2 random from the rest.

    Both halves are returned in pool order (nearest first), so with k
    equal to the pool size the output is the whole pool for any seed.
    The generator advances deterministically.
    """
    k = cfg.picks_per_anchor
    if len(pool) < k:
        raise ValidationError(
            f"pool for anchor {pool.anchor_index} has {len(pool)} entries, need {k}"
        )
    half = k // 2
    n_rest = len(pool) - half
    chosen = rng_state.choice(n_rest, size=k - half, replace=False)
    chosen.sort()
    picks = list(pool.neighbor_indices[:half])
    picks.extend(pool.neighbor_indices[half + int(c)] for c in chosen)
    return picks


def plan_epoch(
    records: list[SampleRecord],
    pools: list[NeighborPool] | None,
    cfg: SamplerConfig,
    epoch: int,
    rng_state: np.random.Generator,
) -> BatchPlan:
    """Greedily tile one epoch into batches of hard negatives.

    Anchors are visited in a seeded shuffle; each opens a batch and pulls
    its pool picks in, skipping pairs already used this epoch and pairs
    whose class is already in the batch, then the batch is topped up with
    the remaining shuffle order under the same constraints. A short final
    batch is kept so every pair trains each epoch.
    """
    n = len(records)
    if n == 0:
        raise ValidationError("cannot plan an epoch over zero records")
    strategy = resolve_strategy(cfg, epoch)
    if strategy != "random":
        expected_kind = "geographic" if strategy == "gps" else "visual"
        if pools is None:
            raise ValidationError(f"strategy {strategy!r} at epoch {epoch} requires pools")
        if len(pools) != n:
            raise ValidationError(f"{len(pools)} pools for {n} records")
        if pools[0].kind != expected_kind:
            raise ValidationError(
                f"strategy {strategy!r} needs {expected_kind} pools, got {pools[0].kind!r}"
            )

    class_of = [r.class_id for r in records]
    counts = Counter(class_of)
    n_batches = math.ceil(n / cfg.batch_size)
    worst_class, worst = counts.most_common(1)[0]
    if worst > n_batches:
        raise ValidationError(
            f"class {worst_class!r} has {worst} members but the epoch only has "
            f"{n_batches} batches; the class-uniqueness constraint is unsatisfiable"
        )

    order = [int(i) for i in rng_state.permutation(n)]
    used = [False] * n
    batches: list[tuple[int, ...]] = []
    for anchor in order:
        if used[anchor]:
            continue
        batch = [anchor]
        classes = {class_of[anchor]}
        used[anchor] = True
        if strategy != "random":
            for p in pick_from_pool(pools[anchor], cfg, rng_state):
                if len(batch) >= cfg.batch_size:
                    break
                if used[p] or class_of[p] in classes:
                    continue
                batch.append(p)
                classes.add(class_of[p])
                used[p] = True
        if len(batch) < cfg.batch_size:
            for cand in order:
                if len(batch) >= cfg.batch_size:
                    break
                if used[cand] or class_of[cand] in classes:
                    continue
                batch.append(cand)
                classes.add(class_of[cand])
                used[cand] = True
        batches.append(tuple(batch))
    return BatchPlan(epoch=epoch, batches=tuple(batches), strategy_used=strategy)


def validate_plan(plan: BatchPlan, records: list[SampleRecord], cfg: SamplerConfig) -> None:
    """Raise unless the plan satisfies exact cover, size, and class uniqueness."""
    seen: list[int] = []
    for batch in plan.batches:
        if len(batch) > cfg.batch_size:
            raise ValidationError(f"batch of {len(batch)} exceeds batch_size {cfg.batch_size}")
        classes = [records[i].class_id for i in batch]
        if len(set(classes)) != len(classes):
            raise ValidationError(f"duplicate class in batch {batch}")
        seen.extend(batch)
    if sorted(seen) != list(range(len(records))):
        raise ValidationError("plan does not cover every pair exactly once")


def write_plan(plan: BatchPlan, path: str | Path) -> None:
    """Serialise as JSON-lines, one batch per line as an array of pair indices."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for batch in plan.batches:
            fh.write(json.dumps(list(batch)) + "\n")


def read_plan(path: str | Path, epoch: int = 0, strategy_used: str = "random") -> BatchPlan:
    path = Path(path)
    batches = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                batch = json.loads(line)
                batches.append(tuple(int(i) for i in batch))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise ValidationError(f"plan line {lineno}: {exc}") from exc
    return BatchPlan(epoch=epoch, batches=tuple(batches), strategy_used=strategy_used)
