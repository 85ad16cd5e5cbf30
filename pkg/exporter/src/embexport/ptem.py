"""PTEM container: the binary embedding format consumed by the training side.

Layout (all integers little-endian u32):
    magic "PTEM" | version=1 | doc_count
    per doc: id_len | id bytes (utf-8) | rows | cols | rows*cols float32 (LE)
The manifest is a JSON file at <ptem path>.manifest.json mapping doc id to
{"tokens": [...], "char_offsets": [[start, end], ...]}.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTEM"
VERSION = 1

META_KEY = "__meta__"


class PTEMError(Exception):
    pass


def write_embeddings(doc_matrices, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(doc_matrices)))
        for doc_id, matrix in doc_matrices.items():
            matrix = np.ascontiguousarray(matrix, dtype="<f4")
            id_bytes = doc_id.encode("utf-8")
            f.write(struct.pack("<I", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
            f.write(matrix.tobytes())


def read_embeddings(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise PTEMError(f"{path}: bad magic {data[:4]!r}")
    version, doc_count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise PTEMError(f"{path}: unsupported version {version}")
    out = {}
    pos = 12
    for _ in range(doc_count):
        try:
            (id_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            doc_id = data[pos:pos + id_len].decode("utf-8")
            pos += id_len
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = rows * cols * 4
            payload = data[pos:pos + nbytes]
            if len(payload) != nbytes:
                raise struct.error
            pos += nbytes
        except (struct.error, UnicodeDecodeError) as exc:
            raise PTEMError(f"{path}: truncated payload") from exc
        out[doc_id] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return out


def manifest_path_for(ptem_path):
    return Path(str(ptem_path) + ".manifest.json")


def write_manifest(manifest, ptem_path):
    manifest_path_for(ptem_path).write_text(
        json.dumps(manifest, sort_keys=True), encoding="utf-8")


def read_manifest(manifest_path):
    return json.loads(Path(manifest_path).read_text(encoding="utf-8"))


def verify(ptem_path, manifest_path):
    """Structural consistency report for a PTEM + manifest pair.

    Checks the container magic and counts, per-document row agreement with the
    manifest token lists, and offset monotonicity.  Returns (ok, problems).
    """
    problems = []
    try:
        matrices = read_embeddings(ptem_path)
    except PTEMError as exc:
        return False, [str(exc)]
    try:
        manifest = read_manifest(manifest_path)
    except (OSError, json.JSONDecodeError) as exc:
        return False, [f"manifest unreadable: {exc}"]

    dims = {m.shape[1] for m in matrices.values()}
    if len(dims) > 1:
        problems.append(f"inconsistent embedding dims {sorted(dims)}")
    for doc_id, matrix in matrices.items():
        entry = manifest.get(doc_id)
        if entry is None:
            problems.append(f"doc {doc_id!r}: missing from manifest")
            continue
        tokens = entry.get("tokens", [])
        offsets = entry.get("char_offsets", [])
        if len(tokens) != matrix.shape[0]:
            problems.append(
                f"doc {doc_id!r}: payload has {matrix.shape[0]} rows but "
                f"manifest lists {len(tokens)} tokens")
        if len(offsets) != len(tokens):
            problems.append(f"doc {doc_id!r}: token/offset count mismatch")
            continue
        prev_start, prev_end = -1, -1
        for start, end in offsets:
            if end < start or start <= prev_start or start < prev_end:
                problems.append(
                    f"doc {doc_id!r}: offsets not strictly increasing and "
                    f"non-overlapping")
                break
            prev_start, prev_end = start, end
    for doc_id in manifest:
        if doc_id != META_KEY and doc_id not in matrices:
            problems.append(f"doc {doc_id!r}: in manifest but not in payload")
    return not problems, problems
