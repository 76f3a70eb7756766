"""VOL1 container: the bit-exact on-disk format for volumes and masks.

Layout:
    magic   b"VOL1"
    version u16 little-endian (currently 1)
    header  u32 little-endian length + UTF-8 JSON
            {dims, spacing_mm, dataset_id, subject_id, seed, kind}
    payload intensity: little-endian float32, x-fastest order
            mask: packed bits (LSB-first within each byte), x-fastest order,
            padded to a byte boundary
    digest  SHA-256 of every preceding byte

The JSON header is serialized with sorted keys and compact separators so a
write is byte-reproducible from the same in-memory object.
"""

import hashlib
import json
import struct

import numpy as np

from .volume import Mask, Volume

MAGIC = b"VOL1"
FORMAT_VERSION = 1

KIND_INTENSITY = "intensity"
KIND_MASK = "mask"


class VolumeIOError(Exception):
    """Base class for VOL1 read failures."""


class VolumeFormatError(VolumeIOError):
    """Bad magic, unsupported version, or malformed header/metadata."""


class VolumeTruncatedError(VolumeIOError):
    """File ends before the declared content does."""


class VolumeChecksumError(VolumeIOError):
    """Trailing SHA-256 does not match the file content."""


def _encode_header(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _encode(meta: dict, payload: bytes) -> bytes:
    header = _encode_header(meta)
    body = MAGIC + struct.pack("<H", FORMAT_VERSION) + struct.pack("<I", len(header)) + header + payload
    return body + hashlib.sha256(body).digest()


def encode_volume(v: Volume) -> bytes:
    meta = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "dataset_id": v.dataset_id,
        "subject_id": v.subject_id,
        "seed": v.seed,
        "kind": KIND_INTENSITY,
    }
    payload = v.voxels.ravel(order="F").astype("<f4").tobytes()
    return _encode(meta, payload)


def encode_mask(m: Mask) -> bytes:
    meta = {
        "dims": list(m.dims),
        "spacing_mm": list(m.spacing_mm),
        "dataset_id": None,
        "subject_id": None,
        "seed": None,
        "kind": KIND_MASK,
    }
    bits = m.labels.ravel(order="F")
    payload = np.packbits(bits, bitorder="little").tobytes()
    return _encode(meta, payload)


def write_volume(path, v: Volume) -> None:
    with open(path, "wb") as f:
        f.write(encode_volume(v))


def write_mask(path, m: Mask) -> None:
    with open(path, "wb") as f:
        f.write(encode_mask(m))


def _decode(blob: bytes):
    """Split a VOL1 byte string into (metadata, payload) after full validation."""
    if len(blob) < len(MAGIC):
        raise VolumeTruncatedError("file shorter than the magic prefix")
    if blob[:4] != MAGIC:
        raise VolumeFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 10:
        raise VolumeTruncatedError("file ends inside the fixed header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 6)
    header_end = 10 + hlen
    if len(blob) < header_end + 32:
        raise VolumeTruncatedError("file ends inside header or digest")
    digest = blob[-32:]
    body = blob[:-32]
    if hashlib.sha256(body).digest() != digest:
        raise VolumeChecksumError("SHA-256 mismatch")
    try:
        meta = json.loads(blob[10:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"malformed metadata header: {e}") from e
    for key in ("dims", "spacing_mm", "kind"):
        if key not in meta:
            raise VolumeFormatError(f"metadata missing required key {key!r}")
    payload = body[header_end:]
    return meta, payload


def _read_file(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def decode_volume(blob: bytes) -> Volume:
    meta, payload = _decode(blob)
    if meta["kind"] != KIND_INTENSITY:
        raise VolumeFormatError(f"expected intensity payload, found {meta['kind']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    n = int(np.prod(dims))
    if len(payload) != 4 * n:
        raise VolumeTruncatedError(f"payload holds {len(payload)} bytes, expected {4 * n}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return Volume(voxels.copy(), tuple(meta["spacing_mm"]),
                  meta.get("dataset_id") or "", meta.get("subject_id") or "",
                  meta.get("seed"))


def decode_mask(blob: bytes) -> Mask:
    meta, payload = _decode(blob)
    if meta["kind"] != KIND_MASK:
        raise VolumeFormatError(f"expected mask payload, found {meta['kind']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    n = int(np.prod(dims))
    expected = (n + 7) // 8
    if len(payload) != expected:
        raise VolumeTruncatedError(f"payload holds {len(payload)} bytes, expected {expected}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=n, bitorder="little")
    return Mask(bits.reshape(dims, order="F").astype(np.uint8), tuple(meta["spacing_mm"]))


def read_volume(path) -> Volume:
    return decode_volume(_read_file(path))


def read_mask(path) -> Mask:
    return decode_mask(_read_file(path))
