"""ERF1 binary model container.

Layout (little endian)::

    "ERF1" u32 version
    chunk*  where chunk = tag[4] u64 length payload[length]

Chunks, in order: ``HEAD`` (root centre and side, max depth, SH bands,
cube-map resolution, node count, AABB, border row), ``NODE`` (breadth-first
node records: one child-bitmask byte then the float32 parameter row),
``BGND`` (float32 cube-map texels, face-major) and an empty ``END`` chunk.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .scene import Aabb, CubeMap, SceneModel, Svo, row_size

MAGIC = b"ERF1"
VERSION = 1
_HEAD = struct.Struct("<4d3IQ6d")
_CHUNK = struct.Struct("<4sQ")


class ModelFormatError(ValueError):
    """The file is not a readable ERF1 model."""


def node_record_size(sh_bands: int) -> int:
    return 1 + 4 * row_size(sh_bands)


def _child_masks(svo: Svo) -> np.ndarray:
    return np.where(svo.children >= 0, 0xFF, 0).astype(np.uint8)


def encode_model(model: SceneModel) -> bytes:
    svo = model.svo
    center = svo.root_min + 0.5 * svo.root_side
    head = _HEAD.pack(*center, svo.root_side, svo.max_depth, svo.sh_bands,
                      model.background.resolution, svo.n_nodes,
                      *model.aabb.min, *model.aabb.max)
    head += svo.border.astype("<f4").tobytes()
    rec = np.zeros(svo.n_nodes, dtype=np.dtype([("mask", "u1"),
                                                ("row", "<f4", (svo.row_size,))]))
    rec["mask"] = _child_masks(svo)
    rec["row"] = svo.params
    texels = model.background.texels.astype("<f4").tobytes()
    out = [MAGIC, struct.pack("<I", VERSION)]
    for tag, payload in ((b"HEAD", head), (b"NODE", rec.tobytes()), (b"BGND", texels),
                         (b"END ", b"")):
        out += [_CHUNK.pack(tag, len(payload)), payload]
    return b"".join(out)


def save_model(model: SceneModel, path: str | Path) -> None:
    """Write the model; parameters are stored as float32."""
    Path(path).write_bytes(encode_model(model))


def _chunks(data: bytes):
    if len(data) < 8 or data[:4] != MAGIC:
        raise ModelFormatError("bad magic: not an ERF1 model file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported ERF1 version {version} (expected {VERSION})")
    pos = 8
    chunks = {}
    while True:
        if pos + _CHUNK.size > len(data):
            raise ModelFormatError("truncated file: missing END chunk")
        tag, length = _CHUNK.unpack_from(data, pos)
        pos += _CHUNK.size
        if pos + length > len(data):
            raise ModelFormatError(f"truncated {tag.decode(errors='replace')} chunk")
        if tag == b"END ":
            break
        chunks[tag] = data[pos:pos + length]
        pos += length
    for tag in (b"HEAD", b"NODE", b"BGND"):
        if tag not in chunks:
            raise ModelFormatError(f"missing {tag.decode()} chunk")
    return chunks


def decode_model(data: bytes) -> SceneModel:
    chunks = _chunks(data)
    head = chunks[b"HEAD"]
    if len(head) < _HEAD.size:
        raise ModelFormatError("HEAD chunk too short")
    vals = _HEAD.unpack_from(head)
    center, side = np.array(vals[0:3]), vals[3]
    max_depth, bands, res, n_nodes = vals[4:8]
    box = np.array(vals[8:14])
    if not 1 <= bands <= 4 or res < 1 or n_nodes < 1 or not side > 0:
        raise ModelFormatError("HEAD chunk holds invalid sizes")
    width = row_size(bands)
    if len(head) != _HEAD.size + 4 * width:
        raise ModelFormatError("HEAD chunk has the wrong length")
    border = np.frombuffer(head, dtype="<f4", offset=_HEAD.size).astype(np.float32)
    nodes = chunks[b"NODE"]
    if len(nodes) != n_nodes * node_record_size(bands):
        raise ModelFormatError("NODE chunk length does not match the node count")
    rec = np.frombuffer(nodes, dtype=np.dtype([("mask", "u1"), ("row", "<f4", (width,))]))
    texels = chunks[b"BGND"]
    if len(texels) != 4 * 6 * res * res * 3:
        raise ModelFormatError("BGND chunk length does not match the cube-map resolution")
    depth, coords = _topology(rec["mask"])
    if int(depth.max()) != max_depth:
        raise ModelFormatError("node records disagree with the stored max depth")
    svo = Svo(center - 0.5 * side, side, bands, depth, coords,
              rec["row"].astype(np.float32), border)
    cube = CubeMap(res, np.frombuffer(texels, dtype="<f4").astype(np.float32)
                   .reshape(6, res, res, 3))
    return SceneModel(svo, cube, Aabb(box[:3], box[3:]))


def _topology(masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Depth and integer coords of breadth-first records from their child masks."""
    n = masks.shape[0]
    if np.any((masks != 0) & (masks != 0xFF)):
        raise ModelFormatError("node with a partial child set")
    depth = np.zeros(n, dtype=np.int64)
    coords = np.zeros((n, 3), dtype=np.int64)
    octant = np.array([(i & 1, (i >> 1) & 1, (i >> 2) & 1) for i in range(8)], dtype=np.int64)
    parents = np.nonzero(masks)[0]
    if 1 + 8 * parents.size != n:
        raise ModelFormatError("child masks do not match the node count")
    # children of the k-th inner node (in breadth-first order) are records 1+8k..8+8k
    for k, p in enumerate(parents):
        first = 1 + 8 * k
        if first <= p:
            raise ModelFormatError("node records are not in breadth-first order")
        depth[first:first + 8] = depth[p] + 1
        coords[first:first + 8] = 2 * coords[p] + octant
    return depth, coords


def load_model(path: str | Path) -> SceneModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read {path}: {exc}") from exc
    return decode_model(data)
