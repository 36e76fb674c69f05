"""Gallery store: formats, normalization, round trips."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from cirloop.errors import GalleryError, GalleryFormatError
from cirloop.gallery import (
    EmbeddingGallery,
    GalleryEntry,
    load_gallery,
    normalize,
    write_gallery,
)
from cirloop.rand import stream
from cirloop.synthetic import make_random_gallery


def test_normalize_three_four_five():
    out = normalize(np.array([3.0, 4.0]))
    assert np.allclose(out, [0.6, 0.8], atol=1e-7)


def test_normalize_unit_vector_is_identity():
    v = normalize(np.array([0.3, -0.4, 0.5, 1.1]))
    again = normalize(v)
    assert np.allclose(v, again, atol=1e-7)


def test_normalize_zero_vector_rejected():
    with pytest.raises(GalleryError):
        normalize(np.zeros(4))


def test_normalize_rejects_non_finite():
    with pytest.raises(GalleryError):
        normalize(np.array([1.0, np.nan]))


def test_well_formed_load(tmp_path):
    gallery = make_random_gallery(3, 4, seed=1, gallery_id="g")
    path = tmp_path / "g.cirv"
    write_gallery(gallery, path)
    loaded = load_gallery(path)
    assert len(loaded) == 3
    assert loaded.d == 4


def test_dimension_mismatch_header_vs_row(tmp_path):
    # header declares d=4 but the vector block only carries 3 floats per row
    path = tmp_path / "bad.cirv"
    ids = b"\x02\x00aa"
    vectors = struct.pack("<3f", 1.0, 0.0, 0.0)
    path.write_bytes(b"CIRV" + struct.pack("<IIQ", 1, 4, 1) + ids + vectors)
    with pytest.raises(GalleryFormatError):
        load_gallery(path)


def test_duplicate_image_id_rejected():
    v = normalize(np.array([1.0, 0.0]))
    with pytest.raises(GalleryError, match="duplicate"):
        EmbeddingGallery("g", 2, [GalleryEntry("a", v), GalleryEntry("a", v)])


def test_empty_gallery_rejected(tmp_path):
    with pytest.raises(GalleryError):
        EmbeddingGallery("g", 2, [])


def test_zero_vector_rejected_on_load(tmp_path):
    path = tmp_path / "zero.jsonl"
    path.write_text('{"image_id": "a", "vector": [0.0, 0.0]}\n')
    with pytest.raises(GalleryError):
        load_gallery(path, format="jsonl")


def test_non_finite_rejected_on_load(tmp_path):
    path = tmp_path / "nan.jsonl"
    path.write_text('{"image_id": "a", "vector": [1.0, NaN]}\n')
    with pytest.raises(GalleryError):
        load_gallery(path, format="jsonl")


def test_binary_size_formula(tmp_path):
    # N=1, no URIs: header (20) + id block (2 + len) + 4*d, no trailing section
    gallery = make_random_gallery(1, 6, seed=3, gallery_id="one")
    path = tmp_path / "one.cirv"
    write_gallery(gallery, path)
    id_len = len(gallery.entries[0].image_id.encode("utf-8"))
    assert path.stat().st_size == 20 + 2 + id_len + 4 * 6


def test_binary_round_trip_bit_exact_100_random_galleries(tmp_path):
    # oracle: write(load(f)) must reproduce f byte-identical for canonical files
    rng = stream("gallery_roundtrip")
    for trial in range(100):
        n = int(rng.integers(1, 30))
        d = int(rng.integers(1, 17))
        with_uris = bool(rng.integers(0, 2))
        gallery = make_random_gallery(
            n, d, seed=trial, gallery_id=f"rt{trial}", with_uris=with_uris
        )
        path = tmp_path / f"rt{trial}.cirv"
        write_gallery(gallery, path)
        original = path.read_bytes()
        reloaded = load_gallery(path)
        path2 = tmp_path / f"rt{trial}b.cirv"
        write_gallery(reloaded, path2)
        assert path2.read_bytes() == original


def test_binary_round_trip_ids_order_600(tmp_path):
    gallery = make_random_gallery(600, 8, seed=11, gallery_id="big")
    path = tmp_path / "big.cirv"
    write_gallery(gallery, path)
    reloaded = load_gallery(path)
    assert reloaded.ids == gallery.ids
    for a, b in zip(gallery.entries, reloaded.entries):
        assert a.vector.tobytes() == b.vector.tobytes()


def test_jsonl_round_trip_value_exact(tmp_path):
    gallery = make_random_gallery(10, 5, seed=4, gallery_id="j", with_uris=True)
    gallery.entries[0].caption = "a dog on grass"
    path = tmp_path / "g.jsonl"
    write_gallery(gallery, path, format="jsonl")
    reloaded = load_gallery(path, format="jsonl")
    assert reloaded.ids == gallery.ids
    assert reloaded.entries[0].caption == "a dog on grass"
    assert reloaded.entries[3].uri == gallery.entries[3].uri
    for a, b in zip(gallery.entries, reloaded.entries):
        assert a.vector.tobytes() == b.vector.tobytes()


def test_load_renormalizes_out_of_tolerance_rows(tmp_path):
    path = tmp_path / "denorm.jsonl"
    path.write_text(
        '{"image_id": "a", "vector": [3.0, 4.0]}\n{"image_id": "b", "vector": [0.0, 1.0]}\n'
    )
    gallery = load_gallery(path, format="jsonl")
    for entry in gallery.entries:
        assert abs(np.linalg.norm(entry.vector.astype(np.float64)) - 1.0) <= 1e-5
    assert np.allclose(gallery.vector("a"), [0.6, 0.8], atol=1e-7)


def test_unit_norm_invariant_after_load(tmp_path):
    gallery = make_random_gallery(50, 12, seed=9, gallery_id="norm")
    path = tmp_path / "n.cirv"
    write_gallery(gallery, path)
    for entry in load_gallery(path).entries:
        assert abs(np.linalg.norm(entry.vector.astype(np.float64)) - 1.0) <= 1e-5


def test_lookup_total_and_injective(small_gallery):
    seen = set()
    for image_id in small_gallery.ids:
        pos = small_gallery.position(image_id)
        assert pos not in seen
        seen.add(pos)
        assert small_gallery.entry(image_id).image_id == image_id
    with pytest.raises(GalleryError):
        small_gallery.entry("nope")


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.cirv"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(GalleryFormatError):
        load_gallery(path)


def test_unknown_format_rejected(tmp_path, small_gallery):
    with pytest.raises(GalleryFormatError):
        write_gallery(small_gallery, tmp_path / "x", format="csv")
