"""Append-only, hash-chained model registry persisted one record per file.

Record layout (REG1):
    magic   b"REG1"
    version u16 little-endian
    meta    u32 length + UTF-8 JSON
            {region, version, parent_hash, checksum, created_at, reference_dice}
    payload u64 length + canonical bundle bytes
    digest  SHA-256 of every preceding byte

parent_hash chains each record to the SHA-256 of the previous record's full
file content (64 zeros for the genesis record); checksum is the SHA-256 of
the bundle payload alone.
"""

import hashlib
import json
import re
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from ..segmenter import ModelBundle, decode_bundle, encode_bundle

MAGIC = b"REG1"
FORMAT_VERSION = 1
GENESIS_HASH = "0" * 64

_RECORD_RE = re.compile(r"^(\d{6})\.rec$")


class UnknownRegionError(KeyError):
    """No model chain exists for the requested region."""


class RegistryLoadError(Exception):
    """A persisted chain failed verification."""

    def __init__(self, message: str, region: str = "", version: Optional[int] = None):
        super().__init__(message)
        self.region = region
        self.version = version


@dataclass(frozen=True)
class ModelVersion:
    region: str
    version: int
    bundle: ModelBundle
    parent_hash: str      # SHA-256 of the parent record's bytes
    checksum: str         # SHA-256 of the canonical bundle serialization
    created_at: str
    reference_dice: float
    record_hash: str      # SHA-256 of this record's bytes


def _encode_record(region: str, version: int, parent_hash: str, checksum: str,
                   created_at: str, reference_dice: float, payload: bytes) -> bytes:
    meta = {
        "region": region,
        "version": version,
        "parent_hash": parent_hash,
        "checksum": checksum,
        "created_at": created_at,
        "reference_dice": reference_dice,
    }
    mjson = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (MAGIC + struct.pack("<H", FORMAT_VERSION)
            + struct.pack("<I", len(mjson)) + mjson
            + struct.pack("<Q", len(payload)) + payload)
    return body + hashlib.sha256(body).digest()


def _decode_record(blob: bytes, region: str, expect_version: int) -> tuple[dict, bytes]:
    def fail(msg):
        raise RegistryLoadError(f"{region} v{expect_version}: {msg}",
                                region=region, version=expect_version)

    if len(blob) < 10 or blob[:4] != MAGIC:
        fail("bad record magic")
    (fmt,) = struct.unpack_from("<H", blob, 4)
    if fmt != FORMAT_VERSION:
        fail(f"unsupported record format {fmt}")
    (mlen,) = struct.unpack_from("<I", blob, 6)
    off = 10 + mlen
    if len(blob) < off + 8 + 32:
        fail("record truncated")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        fail("record digest mismatch")
    try:
        meta = json.loads(blob[10:off].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        fail(f"malformed record metadata: {e}")
    (plen,) = struct.unpack_from("<Q", blob, off)
    payload = blob[off + 8:off + 8 + plen]
    if len(payload) != plen or off + 8 + plen != len(blob) - 32:
        fail("payload length mismatch")
    if hashlib.sha256(payload).hexdigest() != meta.get("checksum"):
        fail("bundle checksum mismatch")
    return meta, payload


class Registry:
    """Disk-backed append-only registry; every append is persisted eagerly."""

    def __init__(self, base_dir):
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self._chains: dict[str, list[ModelVersion]] = {}

    def regions(self) -> list[str]:
        return sorted(self._chains)

    def head(self, region: str) -> ModelVersion:
        if region not in self._chains or not self._chains[region]:
            raise UnknownRegionError(region)
        return self._chains[region][-1]

    def chain(self, region: str) -> list[ModelVersion]:
        if region not in self._chains:
            raise UnknownRegionError(region)
        return list(self._chains[region])

    def has_region(self, region: str) -> bool:
        return region in self._chains and bool(self._chains[region])

    def append(self, region: str, bundle: ModelBundle, reference_dice: float,
               created_at: Optional[str] = None) -> ModelVersion:
        chain = self._chains.setdefault(region, [])
        version = chain[-1].version + 1 if chain else 1
        parent_hash = chain[-1].record_hash if chain else GENESIS_HASH
        payload = encode_bundle(bundle)
        checksum = hashlib.sha256(payload).hexdigest()
        stamp = created_at or datetime.now(timezone.utc).isoformat()
        record = _encode_record(region, version, parent_hash, checksum, stamp,
                                float(reference_dice), payload)
        region_dir = self.base_dir / region
        region_dir.mkdir(parents=True, exist_ok=True)
        (region_dir / f"{version:06d}.rec").write_bytes(record)
        mv = ModelVersion(region=region, version=version, bundle=bundle,
                          parent_hash=parent_hash, checksum=checksum,
                          created_at=stamp, reference_dice=float(reference_dice),
                          record_hash=hashlib.sha256(record).hexdigest())
        chain.append(mv)
        return mv


def load_registry(base_dir) -> Registry:
    """Rebuild a registry from disk, re-verifying every record and the chain.

    Raises RegistryLoadError naming the first bad version.
    """
    base = Path(base_dir)
    reg = Registry(base)
    if not base.exists():
        return reg
    for region_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        region = region_dir.name
        entries = []
        for f in region_dir.iterdir():
            m = _RECORD_RE.match(f.name)
            if m:
                entries.append((int(m.group(1)), f))
        entries.sort()
        chain: list[ModelVersion] = []
        prev_hash = GENESIS_HASH
        for version, path in entries:
            blob = path.read_bytes()
            meta, payload = _decode_record(blob, region, version)
            if meta["version"] != version:
                raise RegistryLoadError(
                    f"{region} v{version}: file name and metadata version disagree "
                    f"({meta['version']})", region=region, version=version)
            if chain and meta["version"] != chain[-1].version + 1:
                raise RegistryLoadError(
                    f"{region} v{version}: versions must increase by 1 "
                    f"(previous {chain[-1].version})", region=region, version=version)
            if meta["parent_hash"] != prev_hash:
                raise RegistryLoadError(
                    f"{region} v{version}: broken hash chain", region=region,
                    version=version)
            bundle = decode_bundle(payload)
            mv = ModelVersion(region=region, version=version, bundle=bundle,
                              parent_hash=meta["parent_hash"], checksum=meta["checksum"],
                              created_at=meta["created_at"],
                              reference_dice=float(meta["reference_dice"]),
                              record_hash=hashlib.sha256(blob).hexdigest())
            chain.append(mv)
            prev_hash = mv.record_hash
        if chain:
            reg._chains[region] = chain
    return reg
