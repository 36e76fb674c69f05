"""Image-feature gallery: load, validate, normalize, and serve embedding rows.

Two on-disk formats are supported:

* Binary (little-endian): magic ``CIRV``, u32 version (=1), u32 d, u64 N;
  then N id records (u16 byte length + UTF-8 bytes); then N*d float32
  values row-major in id-record order; then an optional trailing URI
  section (u8 flag, then N u16-length-prefixed UTF-8 strings). The URI
  section is omitted entirely when no entry carries a URI, so a minimal
  file is exactly ``20 + sum(2 + len(id)) + 4*N*d`` bytes.
* JSONL: one object per line with fields ``image_id``, ``vector`` and
  optional ``uri`` / ``caption``.

Vectors are stored as float32 and unit-normalized at load. Normalization
is conditional: a row whose L2 norm is already within 1e-5 of 1 passes
through byte-identical, so binary write/load round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GalleryError, GalleryFormatError

MAGIC = b"CIRV"
FORMAT_VERSION = 1
UNIT_NORM_TOL = 1e-5

GalleryFormat = str  # "binary" | "jsonl"


def normalize(v: np.ndarray) -> np.ndarray:
    """Return ``v`` scaled to unit L2 norm (float32 out, float64 math).

    Raises:
        GalleryError: if ``v`` is the zero vector or contains non-finite
            values.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise GalleryError(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GalleryError("vector contains non-finite values")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise GalleryError("cannot normalize the zero vector")
    return (arr / norm).astype(np.float32)


def ensure_unit(v: np.ndarray) -> np.ndarray:
    """Normalize only when the norm deviates from 1 by more than the tolerance.

    Keeps already-normalized float32 data byte-identical, which the binary
    round-trip guarantee depends on.
    """
    arr = np.ascontiguousarray(v, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise GalleryError("vector contains non-finite values")
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if norm == 0.0:
        raise GalleryError("cannot normalize the zero vector")
    if abs(norm - 1.0) <= UNIT_NORM_TOL:
        return arr
    return normalize(arr)


@dataclass
class GalleryEntry:
    """One image in the database: id, unit feature vector, optional URI/caption."""

    image_id: str
    vector: np.ndarray
    uri: str | None = None
    caption: str | None = None

    def __post_init__(self) -> None:
        if not self.image_id:
            raise GalleryError("image_id must be non-empty")


@dataclass
class EmbeddingGallery:
    """An ordered, immutable-after-load image feature database.

    Attributes:
        gallery_id: name of this gallery (defaults to the file stem on load).
        d: feature dimension shared by every entry.
        entries: entries in stable file order.
        subset_tag: optional semantic-subset label for per-category benchmarks.
    """

    gallery_id: str
    d: int
    entries: list[GalleryEntry]
    subset_tag: str | None = None

    _index: dict[str, int] = field(init=False, repr=False)
    _matrix64: np.ndarray | None = field(default=None, init=False, repr=False)
    _id_rank: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.d < 1:
            raise GalleryError("feature dimension must be >= 1")
        if not self.entries:
            raise GalleryError("a gallery must contain at least one entry")
        index: dict[str, int] = {}
        for pos, entry in enumerate(self.entries):
            if entry.vector.shape != (self.d,):
                raise GalleryError(
                    f"entry {entry.image_id!r} has dimension "
                    f"{entry.vector.shape[0] if entry.vector.ndim == 1 else entry.vector.shape}, "
                    f"gallery declares d={self.d}"
                )
            if entry.image_id in index:
                raise GalleryError(f"duplicate image_id {entry.image_id!r}")
            index[entry.image_id] = pos
        self._index = index

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def entry(self, image_id: str) -> GalleryEntry:
        try:
            return self.entries[self._index[image_id]]
        except KeyError:
            raise GalleryError(f"unknown image_id {image_id!r}") from None

    def vector(self, image_id: str) -> np.ndarray:
        return self.entry(image_id).vector

    def position(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise GalleryError(f"unknown image_id {image_id!r}") from None

    def matrix64(self) -> np.ndarray:
        """Row-major float64 view of all vectors, cached (scores accumulate in 64-bit)."""
        if self._matrix64 is None:
            self._matrix64 = np.stack([e.vector for e in self.entries]).astype(np.float64)
        return self._matrix64

    def id_rank(self) -> np.ndarray:
        """Per-entry lexicographic rank of image_id, cached (ranking tie-break key)."""
        if self._id_rank is None:
            order = np.argsort(np.asarray(self.ids))
            rank = np.empty(len(self.entries), dtype=np.int64)
            rank[order] = np.arange(len(self.entries))
            self._id_rank = rank
        return self._id_rank


def _validated_entries(
    rows: list[tuple[str, np.ndarray, str | None, str | None]], d: int
) -> list[GalleryEntry]:
    entries = []
    for image_id, vec, uri, caption in rows:
        if vec.shape != (d,):
            raise GalleryFormatError(
                f"row {image_id!r} has length {vec.shape[0]}, header declares d={d}"
            )
        entries.append(GalleryEntry(image_id, ensure_unit(vec), uri=uri, caption=caption))
    return entries


def load_gallery(
    path: str | Path,
    format: GalleryFormat = "binary",
    gallery_id: str | None = None,
    subset_tag: str | None = None,
) -> EmbeddingGallery:
    """Load a gallery file, validate invariants, and unit-normalize rows.

    Args:
        path: gallery file.
        format: "binary" or "jsonl".
        gallery_id: override the gallery name (defaults to the file stem).
        subset_tag: optional semantic-subset label to attach.

    Raises:
        GalleryFormatError: file does not parse under the declared format.
        GalleryError: dimension mismatch, duplicate id, non-finite or zero vector.
    """
    path = Path(path)
    name = gallery_id if gallery_id is not None else path.stem
    if format == "binary":
        rows, d = _read_binary(path)
    elif format == "jsonl":
        rows, d = _read_jsonl(path)
    else:
        raise GalleryFormatError(f"unknown gallery format {format!r}")
    return EmbeddingGallery(name, d, _validated_entries(rows, d), subset_tag=subset_tag)


def write_gallery(gallery: EmbeddingGallery, path: str | Path, format: GalleryFormat = "binary") -> None:
    """Serialize a gallery; binary output reloads bit-exact, JSONL value-exact."""
    path = Path(path)
    if format == "binary":
        _write_binary(gallery, path)
    elif format == "jsonl":
        _write_jsonl(gallery, path)
    else:
        raise GalleryFormatError(f"unknown gallery format {format!r}")


def _read_binary(path: Path) -> tuple[list[tuple[str, np.ndarray, str | None, str | None]], int]:
    data = path.read_bytes()
    if len(data) < 20 or data[:4] != MAGIC:
        raise GalleryFormatError(f"{path}: not a gallery file (bad magic)")
    version, d = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise GalleryFormatError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack_from("<Q", data, 12)
    if d < 1 or n < 1:
        raise GalleryFormatError(f"{path}: invalid header (d={d}, N={n})")
    off = 20
    ids: list[str] = []
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            ids.append(data[off : off + ln].decode("utf-8"))
            off += ln
        vec_bytes = 4 * d * n
        if off + vec_bytes > len(data):
            raise GalleryFormatError(f"{path}: truncated vector block")
        vectors = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
        off += vec_bytes
        uris: list[str | None] = [None] * n
        if off < len(data):
            flag = data[off]
            off += 1
            if flag == 1:
                for i in range(n):
                    (ln,) = struct.unpack_from("<H", data, off)
                    off += 2
                    text = data[off : off + ln].decode("utf-8")
                    off += ln
                    uris[i] = text or None
            elif flag != 0:
                raise GalleryFormatError(f"{path}: bad URI-table flag {flag}")
    except (struct.error, UnicodeDecodeError) as exc:
        raise GalleryFormatError(f"{path}: truncated or corrupt file ({exc})") from exc
    rows = [(ids[i], np.array(vectors[i]), uris[i], None) for i in range(n)]
    return rows, int(d)


def _write_binary(gallery: EmbeddingGallery, path: Path) -> None:
    parts = [MAGIC, struct.pack("<IIQ", FORMAT_VERSION, gallery.d, len(gallery))]
    for e in gallery.entries:
        raw = e.image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise GalleryError(f"image_id too long to encode: {e.image_id[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    for e in gallery.entries:
        parts.append(np.ascontiguousarray(e.vector, dtype="<f4").tobytes())
    if any(e.uri is not None for e in gallery.entries):
        parts.append(b"\x01")
        for e in gallery.entries:
            raw = (e.uri or "").encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
    path.write_bytes(b"".join(parts))


def _read_jsonl(path: Path) -> tuple[list[tuple[str, np.ndarray, str | None, str | None]], int]:
    rows: list[tuple[str, np.ndarray, str | None, str | None]] = []
    d: int | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GalleryFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict) or "image_id" not in obj or "vector" not in obj:
                raise GalleryFormatError(f"{path}:{lineno}: missing image_id/vector")
            values = obj["vector"]
            if not isinstance(values, list) or not values:
                raise GalleryFormatError(f"{path}:{lineno}: vector must be a non-empty array")
            if any(not isinstance(x, (int, float)) or isinstance(x, bool) or not math.isfinite(x) for x in values):
                raise GalleryError(f"{path}:{lineno}: non-finite or non-numeric vector value")
            vec = np.asarray(values, dtype=np.float32)
            if d is None:
                d = len(values)
            rows.append((str(obj["image_id"]), vec, obj.get("uri"), obj.get("caption")))
    if not rows or d is None:
        raise GalleryFormatError(f"{path}: empty gallery file")
    return rows, d


def _write_jsonl(gallery: EmbeddingGallery, path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for e in gallery.entries:
            obj: dict[str, object] = {
                "image_id": e.image_id,
                # float() of a float32 is exact; json round-trips the double exactly
                "vector": [float(x) for x in e.vector],
            }
            if e.uri is not None:
                obj["uri"] = e.uri
            if e.caption is not None:
                obj["caption"] = e.caption
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
