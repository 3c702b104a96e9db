"""
PTES embedding container: a bit-exact binary store for embedding matrices,
labels and checkpoints.

Layout (all integers little-endian):
    bytes 0-3    magic "PTES"
    bytes 4-7    version (u32) = 1
    bytes 8-11   header length H (u32)
    bytes 12..   UTF-8 JSON header of H bytes
    payload      row-major IEEE-754 binary32 matrices at the header's offsets
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from errors import FormatError, IoError

MAGIC = b"PTES"
VERSION = 1
PREFIX = struct.Struct("<4sII")
FLOAT = np.dtype("<f4")

EMBEDDING = "embedding"
PARAMETER = "parameter"
MATRIX_KINDS = (EMBEDDING, PARAMETER)


def _as_matrix(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FormatError(f"matrix {name!r} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"matrix {name!r} has non-finite entries")
    return np.ascontiguousarray(arr, dtype=FLOAT)


@dataclass
class EmbeddingStore:
    """Named binary32 matrices sharing one embedding dimension."""

    dim: int
    class_names: List[str] = field(default_factory=list)
    matrices: Dict[str, np.ndarray] = field(default_factory=dict)
    kinds: Dict[str, str] = field(default_factory=dict)
    labels: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.matrices = {name: _as_matrix(name, m) for name, m in self.matrices.items()}
        self.kinds = {name: self.kinds.get(name, EMBEDDING) for name in self.matrices}
        if self.labels is not None:
            self.labels = _as_matrix("labels", self.labels)
        self.validate()

    def add_matrix(self, name: str, values, kind: str = EMBEDDING) -> None:
        """Add (or replace) a matrix; vectors are stored as single rows."""
        self.matrices[name] = _as_matrix(name, values)
        self.kinds[name] = kind
        self.validate()

    def matrix(self, name: str) -> np.ndarray:
        """A stored matrix widened to float64."""
        try:
            return self.matrices[name].astype(np.float64)
        except KeyError:
            raise FormatError(f"store has no matrix named {name!r}") from None

    def has(self, name: str) -> bool:
        return name in self.matrices

    def validate(self) -> None:
        """Check the container invariants."""
        if not isinstance(self.dim, int) or self.dim < 1:
            raise FormatError(f"dim must be a positive integer, got {self.dim!r}")
        for name, m in self.matrices.items():
            kind = self.kinds.get(name, EMBEDDING)
            if kind not in MATRIX_KINDS:
                raise FormatError(f"matrix {name!r} has unknown kind {kind!r}")
            if kind == EMBEDDING and m.shape[1] != self.dim:
                raise FormatError(f"matrix {name!r} has {m.shape[1]} columns, store dim is {self.dim}")
        if self.labels is not None:
            sums = self.labels.astype(np.float64).sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(self.labels < 0):
                raise FormatError("every label vector must be nonnegative and sum to 1")

    # ========== Encoding ==========

    def to_bytes(self) -> bytes:
        """Serialize to the PTES byte layout."""
        self.validate()
        payload = bytearray()
        descriptors = []
        for name, m in self.matrices.items():
            descriptors.append({
                "name": name,
                "rows": int(m.shape[0]),
                "cols": int(m.shape[1]),
                "offset": len(payload),
                "kind": self.kinds[name],
            })
            payload += m.astype(FLOAT).tobytes(order="C")
        header: Dict[str, Any] = {
            "dim": self.dim,
            "classes": list(self.class_names),
            "matrices": descriptors,
        }
        if self.labels is not None:
            header["labels"] = {
                "rows": int(self.labels.shape[0]),
                "cols": int(self.labels.shape[1]),
                "offset": len(payload),
            }
            payload += self.labels.astype(FLOAT).tobytes(order="C")
        if self.meta:
            header["meta"] = self.meta
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + bytes(payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        """Parse the PTES byte layout, validating every field."""
        if len(data) < PREFIX.size:
            raise FormatError("truncated container: missing fixed prefix")
        magic, version, header_len = PREFIX.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if len(data) < PREFIX.size + header_len:
            raise FormatError("truncated container: header shorter than declared")
        try:
            header = json.loads(data[PREFIX.size:PREFIX.size + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"header is not valid UTF-8 JSON: {e}") from e
        if not isinstance(header, dict) or "dim" not in header or "matrices" not in header:
            raise FormatError("header must carry 'dim' and 'matrices'")
        _check_header_fields(header)
        payload = memoryview(data)[PREFIX.size + header_len:]

        matrices, kinds = {}, {}
        for desc in header["matrices"]:
            name = desc.get("name")
            matrices[name] = _read_block(payload, desc, str(name))
            kinds[name] = desc.get("kind", EMBEDDING)
        labels = None
        if "labels" in header:
            labels = _read_block(payload, header["labels"], "labels")

        dim = header["dim"]
        for name, m in matrices.items():
            if kinds[name] == EMBEDDING and m.shape[1] != dim:
                raise FormatError(f"dim mismatch: matrix {name!r} has {m.shape[1]} columns, header dim {dim}")
        return cls(
            dim=dim,
            class_names=list(header.get("classes", [])),
            matrices=matrices,
            kinds=kinds,
            labels=labels,
            meta=header.get("meta", {}),
        )


def _check_header_fields(header: Dict[str, Any]) -> None:
    dim = header["dim"]
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
        raise FormatError(f"header dim must be a positive integer, got {dim!r}")
    matrices = header["matrices"]
    if not isinstance(matrices, list) or not all(isinstance(d, dict) for d in matrices):
        raise FormatError("header 'matrices' must be a list of descriptor objects")
    for desc in matrices:
        if not isinstance(desc.get("name"), str):
            raise FormatError(f"matrix descriptor without a string name: {desc!r}")
    classes = header.get("classes", [])
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise FormatError("header 'classes' must be a list of strings")
    if "labels" in header and not isinstance(header["labels"], dict):
        raise FormatError("header 'labels' must be a descriptor object")
    if not isinstance(header.get("meta", {}), dict):
        raise FormatError("header 'meta' must be an object")


def _read_block(payload: memoryview, desc: Dict[str, Any], name: str) -> np.ndarray:
    try:
        rows, cols, offset = int(desc["rows"]), int(desc["cols"]), int(desc["offset"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"descriptor for {name!r} needs integer rows/cols/offset") from None
    if rows < 1 or cols < 1 or offset < 0:
        raise FormatError(f"descriptor for {name!r} has invalid extents")
    nbytes = rows * cols * FLOAT.itemsize
    if offset + nbytes > len(payload):
        raise FormatError(f"truncated payload: {name!r} needs bytes {offset}..{offset + nbytes}")
    block = np.frombuffer(payload, dtype=FLOAT, count=rows * cols, offset=offset)
    return block.reshape(rows, cols).copy()


def save_embedding_store(store: EmbeddingStore, path: Union[str, Path]) -> Path:
    """
    Write a store to disk.

    Args:
        store: Store to serialize (invariants are checked first)
        path: Destination file

    Returns:
        Path written
    """
    path = Path(path)
    data = store.to_bytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return path


def load_embedding_store(path: Union[str, Path]) -> EmbeddingStore:
    """Read and validate a store from disk."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    return EmbeddingStore.from_bytes(data)
