"""Dataset manifests, EMB1 embedding file IO, and the synthetic two-view generator.

A manifest is a JSON-lines file with one query/reference pair per line.
Embedding tables travel as EMB1 binary files: a 4-byte magic ``EMB1``,
count and dim as little-endian u32, then count*dim float32 values in
row-major order, plus a ``<path>.ids`` sidecar holding one sample id per
line in row order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

EMB1_MAGIC = b"EMB1"
_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class Coordinate:
    """A location: wgs84 latitude/longitude in degrees, or planar x/y in metres."""

    a: float
    b: float
    crs: str = "wgs84"

    def __post_init__(self):
        if self.crs not in ("wgs84", "planar"):
            raise ValidationError(f"unknown crs {self.crs!r}, expected 'wgs84' or 'planar'")
        if self.crs == "wgs84":
            if not -90.0 <= self.a <= 90.0:
                raise ValidationError(f"latitude {self.a} outside [-90, 90]")
            if not -180.0 <= self.b <= 180.0:
                raise ValidationError(f"longitude {self.b} outside [-180, 180]")


@dataclass(frozen=True)
class SampleRecord:
    """One query/reference training pair.

    ``positives`` and ``semi_positives`` hold ids of other records whose
    reference view matches (exactly, or only partially for semi-positives)
    this record's query.
    """

    id: str
    pair_index: int
    class_id: str
    coord: Coordinate
    positives: tuple[str, ...]
    semi_positives: tuple[str, ...] = ()

    def __post_init__(self):
        if self.pair_index < 0:
            raise ValidationError(f"record {self.id!r}: pair_index must be >= 0")
        if not self.positives:
            raise ValidationError(f"record {self.id!r}: positives must be non-empty")
        overlap = set(self.positives) & set(self.semi_positives)
        if overlap:
            raise ValidationError(
                f"record {self.id!r}: semi_positives overlap positives: {sorted(overlap)}"
            )


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Dense row-major float32 matrix of embeddings, one row per sample id."""

    data: np.ndarray
    row_ids: tuple[str, ...]

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValidationError(f"embedding data must be 2-D, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if not self.data.flags["C_CONTIGUOUS"]:
            object.__setattr__(self, "data", np.ascontiguousarray(self.data))
        if len(self.row_ids) != self.data.shape[0]:
            raise ValidationError(
                f"{len(self.row_ids)} row ids for {self.data.shape[0]} rows"
            )
        if len(set(self.row_ids)) != len(self.row_ids):
            raise ValidationError("row ids must be unique")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.row_ids == other.row_ids
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic two-view dataset generator.

    Latents carry spatial structure: the map square is divided into a
    region_grid x region_grid grid, pairs falling in the same cell share
    a latent cluster center, and region_within in (0, 1] sets the
    within-region spread (1 recovers fully independent latents). Nearby
    locations thereby look alike, the premise hard-negative sampling
    relies on.
    """

    n_pairs: int = 2000
    latent_dim: int = 32
    view_dim: int = 64
    noise_sigma: float = 0.25
    map_extent_m: float = 10_000.0
    n_semi_positives: int = 3
    region_grid: int = 16
    region_within: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ValidationError("n_pairs must be >= 2")
        if self.latent_dim < 1 or self.view_dim < 1:
            raise ValidationError("latent_dim and view_dim must be >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.map_extent_m <= 0:
            raise ValidationError("map_extent_m must be > 0")
        if self.n_semi_positives < 0:
            raise ValidationError("n_semi_positives must be >= 0")
        if self.region_grid < 1:
            raise ValidationError("region_grid must be >= 1")
        if not 0.0 < self.region_within <= 1.0:
            raise ValidationError("region_within must be in (0, 1]")


def _record_from_json(obj: dict, pair_index: int) -> SampleRecord:
    crs = obj.get("crs", "wgs84")
    if crs == "planar":
        coord = Coordinate(float(obj["x"]), float(obj["y"]), "planar")
    else:
        coord = Coordinate(float(obj["lat"]), float(obj["lon"]), "wgs84")
    return SampleRecord(
        id=str(obj["id"]),
        pair_index=pair_index,
        class_id=str(obj["class_id"]),
        coord=coord,
        positives=tuple(str(p) for p in obj["positives"]),
        semi_positives=tuple(str(s) for s in obj.get("semi_positives", ())),
    )


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Read a JSON-lines manifest, assigning pair_index by line order.

    Raises ValidationError for malformed lines (with line number),
    duplicate ids, and positive/semi-positive ids that reference no
    record in the file.
    """
    path = Path(path)
    records: list[SampleRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                record = _record_from_json(obj, pair_index=len(records))
            except ValidationError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"manifest line {lineno}: {exc}") from exc
            records.append(record)

    seen: set[str] = set()
    for record in records:
        if record.id in seen:
            raise ValidationError(f"duplicate id {record.id!r} in manifest")
        seen.add(record.id)
    for record in records:
        for ref in (*record.positives, *record.semi_positives):
            if ref not in seen:
                raise ValidationError(
                    f"record {record.id!r} references unknown id {ref!r}"
                )
    return records


def record_to_json(record: SampleRecord) -> dict:
    """Canonical JSON object for one manifest line."""
    obj: dict = {"id": record.id, "class_id": record.class_id}
    if record.coord.crs == "planar":
        obj["x"] = record.coord.a
        obj["y"] = record.coord.b
    else:
        obj["lat"] = record.coord.a
        obj["lon"] = record.coord.b
    obj["crs"] = record.coord.crs
    obj["positives"] = list(record.positives)
    obj["semi_positives"] = list(record.semi_positives)
    return obj


def slice_manifest(records: list[SampleRecord], start: int, stop: int) -> list[SampleRecord]:
    """Records [start:stop] as a self-contained manifest.

    pair_index is renumbered densely and positive/semi-positive links are
    restricted to the kept ids; a record whose positives all fall outside
    the slice raises, since it could never be retrieved.
    """
    kept = records[start:stop]
    keep_ids = {r.id for r in kept}
    out = []
    for i, record in enumerate(kept):
        positives = tuple(p for p in record.positives if p in keep_ids)
        if not positives:
            raise ValidationError(
                f"record {record.id!r} has no positives inside the slice [{start}, {stop})"
            )
        out.append(
            SampleRecord(
                id=record.id,
                pair_index=i,
                class_id=record.class_id,
                coord=record.coord,
                positives=positives,
                semi_positives=tuple(
                    s for s in record.semi_positives if s in keep_ids
                ),
            )
        )
    return out


def write_manifest(records: list[SampleRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record), sort_keys=True) + "\n")


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write ``table`` in EMB1 format plus the ``<path>.ids`` sidecar."""
    path = Path(path)
    payload = np.ascontiguousarray(table.data, dtype="<f4").tobytes()
    with path.open("wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(_HEADER.pack(table.count, table.dim))
        fh.write(payload)
    sidecar = path.with_name(path.name + ".ids")
    sidecar.write_text("".join(f"{rid}\n" for rid in table.row_ids), encoding="utf-8")


def read_embeddings(path: str | Path) -> EmbeddingTable:
    """Inverse of write_embeddings.

    Falls back to stringified row numbers when the ids sidecar is absent.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != EMB1_MAGIC:
        raise ValidationError(f"{path}: bad magic, not an EMB1 file")
    if len(raw) < 4 + _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    count, dim = _HEADER.unpack_from(raw, 4)
    expected = count * dim * 4
    actual = len(raw) - 4 - _HEADER.size
    if actual != expected:
        raise ValidationError(
            f"{path}: payload size mismatch, expected {expected} bytes for "
            f"{count}x{dim} float32, found {actual}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=4 + _HEADER.size).reshape(count, dim)
    sidecar = path.with_name(path.name + ".ids")
    if sidecar.exists():
        row_ids = tuple(sidecar.read_text(encoding="utf-8").splitlines())
        if len(row_ids) != count:
            raise ValidationError(
                f"{sidecar}: {len(row_ids)} ids for {count} rows"
            )
    else:
        row_ids = tuple(str(i) for i in range(count))
    return EmbeddingTable(data=data.copy(), row_ids=row_ids)


def generate_synthetic(
    cfg: SynthConfig,
    view_maps: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[list[SampleRecord], EmbeddingTable, EmbeddingTable]:
    """Generate a synthetic two-view dataset.

    Each pair shares a latent vector z; the query view is A_q @ z plus
    isotropic noise and the reference view A_r @ z plus independent noise,
    with A_q, A_r fixed random linear maps (overridable via ``view_maps``
    as (latent_dim, view_dim) matrices, e.g. identities for tests).
    Coordinates are uniform in a map_extent_m square (planar CRS); the
    latent of each pair mixes its map region's cluster center with an
    individual component (see SynthConfig), keeping unit variance. Each
    record's semi_positives are its n_semi_positives geographically
    nearest other references. Pure function of cfg: the same config
    yields bit-identical outputs.
    """
    if cfg.n_semi_positives >= cfg.n_pairs:
        raise ValidationError(
            f"n_semi_positives={cfg.n_semi_positives} must be < n_pairs={cfg.n_pairs}"
        )
    rng = np.random.default_rng(cfg.seed)
    n, d_latent, d_view = cfg.n_pairs, cfg.latent_dim, cfg.view_dim

    coords = rng.uniform(0.0, cfg.map_extent_m, size=(n, 2))
    g = cfg.region_grid
    cell = np.minimum((coords / cfg.map_extent_m * g).astype(int), g - 1)
    region = cell[:, 0] * g + cell[:, 1]
    centers = rng.standard_normal((g * g, d_latent))
    w = cfg.region_within
    latents = math.sqrt(1.0 - w * w) * centers[region] + w * rng.standard_normal((n, d_latent))
    if view_maps is None:
        # 1/sqrt(latent_dim) keeps per-component feature variance at 1
        map_q = rng.standard_normal((d_latent, d_view)) / math.sqrt(d_latent)
        map_r = rng.standard_normal((d_latent, d_view)) / math.sqrt(d_latent)
    else:
        map_q, map_r = view_maps
        if map_q.shape != (d_latent, d_view) or map_r.shape != (d_latent, d_view):
            raise ValidationError(
                f"view maps must have shape ({d_latent}, {d_view})"
            )
    query = latents @ map_q + cfg.noise_sigma * rng.standard_normal((n, d_view))
    reference = latents @ map_r + cfg.noise_sigma * rng.standard_normal((n, d_view))

    ids = [f"p{i:06d}" for i in range(n)]
    semi_sets = _nearest_other_indices(coords, cfg.n_semi_positives)
    records = [
        SampleRecord(
            id=ids[i],
            pair_index=i,
            class_id=ids[i],
            coord=Coordinate(float(coords[i, 0]), float(coords[i, 1]), "planar"),
            positives=(ids[i],),
            semi_positives=tuple(ids[j] for j in semi_sets[i]),
        )
        for i in range(n)
    ]
    query_table = EmbeddingTable(query.astype(np.float32), tuple(ids))
    reference_table = EmbeddingTable(reference.astype(np.float32), tuple(ids))
    return records, query_table, reference_table


def _nearest_other_indices(coords: np.ndarray, k: int) -> list[list[int]]:
    """For each row, indices of the k nearest other rows (ties by lower index)."""
    n = coords.shape[0]
    if k == 0:
        return [[] for _ in range(n)]
    out: list[list[int]] = []
    block = 512
    for start in range(0, n, block):
        stop = min(start + block, n)
        diff = coords[start:stop, None, :] - coords[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        for row, i in enumerate(range(start, stop)):
            dist[row, i] = np.inf
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        out.extend(order[row].tolist() for row in range(stop - start))
    return out
