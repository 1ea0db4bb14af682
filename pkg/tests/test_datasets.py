import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossview.datasets import (
    Coordinate,
    EmbeddingTable,
    SampleRecord,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    read_embeddings,
    slice_manifest,
    write_embeddings,
    write_manifest,
)
from crossview.errors import ValidationError

from oracles import brute_nearest


def make_table(data, ids=None):
    data = np.asarray(data, dtype=np.float32)
    if ids is None:
        ids = tuple(str(i) for i in range(data.shape[0]))
    return EmbeddingTable(data, tuple(ids))


class TestCoordinate:
    def test_wgs84_range_checked(self):
        Coordinate(45.0, 120.0, "wgs84")
        with pytest.raises(ValidationError):
            Coordinate(95.0, 0.0, "wgs84")
        with pytest.raises(ValidationError):
            Coordinate(0.0, 181.0, "wgs84")

    def test_planar_unbounded(self):
        Coordinate(1e9, -1e9, "planar")

    def test_unknown_crs(self):
        with pytest.raises(ValidationError):
            Coordinate(0.0, 0.0, "utm")


class TestSampleRecord:
    def test_positives_required(self):
        with pytest.raises(ValidationError):
            SampleRecord("a", 0, "c", Coordinate(0, 0, "planar"), positives=())

    def test_semi_positives_disjoint(self):
        with pytest.raises(ValidationError, match="overlap"):
            SampleRecord(
                "a", 0, "c", Coordinate(0, 0, "planar"),
                positives=("a",), semi_positives=("a", "b"),
            )


class TestManifest:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        assert load_manifest(path) == []

    def test_two_lines_indexed_in_order(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"id": "a", "class_id": "a", "x": 0, "y": 0, "crs": "planar", "positives": ["a"]}\n'
            '{"id": "b", "class_id": "b", "lat": 1, "lon": 2, "crs": "wgs84", "positives": ["a"]}\n'
        )
        records = load_manifest(path)
        assert [r.id for r in records] == ["a", "b"]
        assert [r.pair_index for r in records] == [0, 1]
        assert records[1].coord.crs == "wgs84"

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"id": "a", "class_id": "a", "x": 0, "y": 0, "crs": "planar", "positives": ["a"]}\n'
            "not json\n"
        )
        with pytest.raises(ValidationError, match="line 2"):
            load_manifest(path)

    def test_duplicate_id_named(self, tmp_path):
        line = '{"id": "dup", "class_id": "c", "x": 0, "y": 0, "crs": "planar", "positives": ["dup"]}\n'
        path = tmp_path / "m.jsonl"
        path.write_text(line + line)
        with pytest.raises(ValidationError, match="dup"):
            load_manifest(path)

    def test_unknown_positive_reference(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(
            '{"id": "a", "class_id": "a", "x": 0, "y": 0, "crs": "planar", "positives": ["ghost"]}\n'
        )
        with pytest.raises(ValidationError, match="ghost"):
            load_manifest(path)

    def test_write_read_round_trip(self, tmp_path):
        records, _, _ = generate_synthetic(SynthConfig(n_pairs=6, seed=3))
        path = tmp_path / "m.jsonl"
        write_manifest(records, path)
        assert load_manifest(path) == records


class TestEmb1:
    def test_minimal_table_layout(self, tmp_path):
        path = tmp_path / "t.emb"
        write_embeddings(make_table([[0.5]]), path)
        raw = path.read_bytes()
        assert len(raw) == 16  # 4 magic + 4 count + 4 dim + one float32
        assert raw[:4] == b"EMB1"
        assert struct.unpack("<II", raw[4:12]) == (1, 1)
        assert struct.unpack("<f", raw[12:]) == (0.5,)

    def test_empty_table_header_only(self, tmp_path):
        path = tmp_path / "t.emb"
        write_embeddings(make_table(np.zeros((0, 3), dtype=np.float32)), path)
        assert len(path.read_bytes()) == 12
        table = read_embeddings(path)
        assert table.count == 0 and table.dim == 3

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        table = make_table(rng.standard_normal((8, 4)).astype(np.float32))
        path = tmp_path / "t.emb"
        write_embeddings(table, path)
        assert read_embeddings(path) == table

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.emb"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(ValidationError, match="bad magic"):
            read_embeddings(path)

    def test_truncated_payload_reports_counts(self, tmp_path):
        path = tmp_path / "t.emb"
        write_embeddings(make_table(np.ones((2, 3), dtype=np.float32)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])  # one float short
        with pytest.raises(ValidationError, match="expected 24 bytes.*found 20"):
            read_embeddings(path)

    def test_ids_sidecar(self, tmp_path):
        table = make_table(np.ones((2, 2), dtype=np.float32), ids=("x", "y"))
        path = tmp_path / "t.emb"
        write_embeddings(table, path)
        assert (tmp_path / "t.emb.ids").read_text().splitlines() == ["x", "y"]
        assert read_embeddings(path).row_ids == ("x", "y")

    @given(
        rows=st.integers(0, 20),
        cols=st.integers(1, 16),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_is_identity(self, rows, cols, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        scale = 10.0 ** float(rng.integers(-3, 4))
        table = make_table((rng.standard_normal((rows, cols)) * scale).astype(np.float32))
        path = tmp_path_factory.mktemp("emb") / "t.emb"
        write_embeddings(table, path)
        assert read_embeddings(path) == table


class TestGenerateSynthetic:
    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(n_pairs=12, seed=99)
        r1, q1, t1 = generate_synthetic(cfg)
        r2, q2, t2 = generate_synthetic(cfg)
        assert r1 == r2 and q1 == q2 and t1 == t2

    def test_identity_maps_zero_noise(self):
        cfg = SynthConfig(n_pairs=8, latent_dim=5, view_dim=5, noise_sigma=0.0, seed=2)
        eye = np.eye(5)
        _, queries, references = generate_synthetic(cfg, view_maps=(eye, eye))
        np.testing.assert_array_equal(queries.data, references.data)

    def test_semi_positives_match_brute_force(self):
        cfg = SynthConfig(n_pairs=10, n_semi_positives=3, seed=5)
        records, _, _ = generate_synthetic(cfg)
        points = [(r.coord.a, r.coord.b) for r in records]
        dist = lambda p, q: ((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) ** 0.5
        expected = brute_nearest(points, dist, 3)
        for i, record in enumerate(records):
            assert record.semi_positives == tuple(records[j].id for j in expected[i])

    def test_semi_positives_exclude_positive(self):
        records, _, _ = generate_synthetic(SynthConfig(n_pairs=30, seed=1))
        for record in records:
            assert len(record.semi_positives) == 3
            assert record.id not in record.semi_positives

    def test_too_many_semi_positives(self):
        with pytest.raises(ValidationError, match="n_semi_positives"):
            generate_synthetic(SynthConfig(n_pairs=3, n_semi_positives=3))

    def test_coordinates_planar_in_extent(self):
        cfg = SynthConfig(n_pairs=50, map_extent_m=123.0, seed=8)
        records, _, _ = generate_synthetic(cfg)
        for r in records:
            assert r.coord.crs == "planar"
            assert 0.0 <= r.coord.a <= 123.0 and 0.0 <= r.coord.b <= 123.0


class TestSliceManifest:
    def test_renumbers_and_filters(self):
        records, _, _ = generate_synthetic(SynthConfig(n_pairs=20, seed=4))
        sub = slice_manifest(records, 10, 20)
        assert [r.pair_index for r in sub] == list(range(10))
        keep = {r.id for r in sub}
        for r in sub:
            assert set(r.positives) <= keep
            assert set(r.semi_positives) <= keep
