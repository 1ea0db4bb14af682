"""Geodesic and planar distances plus top-K geographic neighbour search.

The GPS sampling phase builds its negative pools here: haversine distance
for wgs84 coordinates, plain Euclidean distance for planar ones (UTM-style
data arrives already projected).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import Coordinate
from .errors import ValidationError
from .simsearch import NeighborPool

MEAN_EARTH_RADIUS_M = 6_371_008.8

_BLOCK = 256


@dataclass(frozen=True)
class GeoConfig:
    earth_radius_m: float = MEAN_EARTH_RADIUS_M

    def __post_init__(self):
        if self.earth_radius_m <= 0:
            raise ValidationError("earth_radius_m must be > 0")


def haversine_distance(p: Coordinate, q: Coordinate, cfg: GeoConfig = GeoConfig()) -> float:
    """Great-circle distance in metres between two wgs84 coordinates."""
    if p.crs != "wgs84" or q.crs != "wgs84":
        raise ValidationError(f"haversine needs wgs84 coordinates, got {p.crs!r}/{q.crs!r}")
    phi1, phi2 = math.radians(p.a), math.radians(q.a)
    dphi = math.radians(q.a - p.a)
    dlam = math.radians(q.b - p.b)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * cfg.earth_radius_m * math.asin(min(1.0, math.sqrt(h)))


def planar_distance(p: Coordinate, q: Coordinate) -> float:
    """Euclidean distance in metres between two planar coordinates."""
    if p.crs != "planar" or q.crs != "planar":
        raise ValidationError(f"planar distance needs planar coordinates, got {p.crs!r}/{q.crs!r}")
    return math.hypot(p.a - q.a, p.b - q.b)


def _coord_array(coords: list[Coordinate]) -> tuple[np.ndarray, str]:
    if not coords:
        raise ValidationError("empty coordinate list")
    crs = coords[0].crs
    if any(c.crs != crs for c in coords):
        raise ValidationError("coordinates mix CRS")
    return np.array([(c.a, c.b) for c in coords], dtype=np.float64), crs


def _haversine_block(a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    lat1 = np.radians(a[:, 0])[:, None]
    lat2 = np.radians(b[:, 0])[None, :]
    dlat = lat2 - lat1
    dlon = np.radians(b[:, 1])[None, :] - np.radians(a[:, 1])[:, None]
    h = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _planar_block(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def geo_topk(
    anchors: list[Coordinate],
    candidates: list[Coordinate],
    K: int,
    cfg: GeoConfig = GeoConfig(),
) -> list[NeighborPool]:
    """For each anchor, its K geographically nearest candidates.

    Candidate j == anchor position i is excluded (an anchor never pools
    its own paired candidate); ties break toward the lower candidate
    index. Exact brute force over distance blocks.
    """
    a, crs_a = _coord_array(anchors)
    c, crs_c = _coord_array(candidates)
    if crs_a != crs_c:
        raise ValidationError(f"anchors are {crs_a!r} but candidates are {crs_c!r}")
    n_c = len(candidates)
    if K < 1:
        raise ValidationError("K must be >= 1")
    if K > n_c - 1:
        raise ValidationError(f"K={K} exceeds candidate count - 1 = {n_c - 1}")

    pools: list[NeighborPool] = []
    for start in range(0, len(anchors), _BLOCK):
        stop = min(start + _BLOCK, len(anchors))
        if crs_a == "wgs84":
            dist = _haversine_block(a[start:stop], c, cfg.earth_radius_m)
        else:
            dist = _planar_block(a[start:stop], c)
        for row, i in enumerate(range(start, stop)):
            if i < n_c:
                dist[row, i] = np.inf
        order = np.argsort(dist, axis=1, kind="stable")[:, :K]
        for row, i in enumerate(range(start, stop)):
            idx = order[row]
            pools.append(
                NeighborPool(
                    anchor_index=i,
                    neighbor_indices=tuple(int(j) for j in idx),
                    scores=tuple(float(d) for d in dist[row, idx]),
                    kind="geographic",
                )
            )
    return pools
