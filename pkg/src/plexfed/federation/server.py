"""The model-registry server: REST-style endpoints over the registry.

Routes (JSON bodies):
    GET  /v1/models/{region}/latest
        200 {version, checksum_hex, created_at, reference_dice, payload_b64}
        404 {error: "unknown_region"}
    POST /v1/models/{region}/updates   (header X-Api-Key)
        200 {accepted: true, version, reference_dice}
        422 {accepted: false, reason, candidate_dice, current_dice}
        401/400/404 {error, detail}
    GET  /v1/models/{region}/log
        200 {decisions: [...]}  (audit trail of submit decisions)

Reads are concurrent; submissions for a region are serialized, and a merge +
gate + append is atomic with respect to readers.
"""

import base64
import hashlib
import hmac
import json
import os
import re
import threading
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from ..pipeline import IL_MIN_VOLUMES
from ..segmenter import BundleDecodeError, ModelBundle, decode_bundle
from .. import volio
from .merge import (MergePolicy, MergeStructureError, ReferenceSet, merge,
                    reference_dice, validate_candidate)
from .registry import Registry, UnknownRegionError, load_registry

DEFAULT_ADDR = "127.0.0.1:8421"
DEFAULT_API_KEY = "dev-key"


def _digest(key: str) -> str:
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ServerConfig:
    addr: str = DEFAULT_ADDR
    registry_dir: str = "registry"
    reference_set_dir: str = ""
    alpha: float = 0.5
    epsilon_gate: float = 0.02
    api_keys: tuple[str, ...] = (DEFAULT_API_KEY,)

    @classmethod
    def from_file(cls, path) -> "ServerConfig":
        with open(path) as f:
            raw = json.load(f)
        cfg = cls(
            addr=raw.get("addr", DEFAULT_ADDR),
            registry_dir=raw.get("registry_dir", "registry"),
            reference_set_dir=raw.get("reference_set_dir", ""),
            alpha=float(raw.get("alpha", 0.5)),
            epsilon_gate=float(raw.get("epsilon_gate", 0.02)),
            api_keys=tuple(raw.get("api_keys", [DEFAULT_API_KEY])),
        )
        return cfg.with_env_overrides()

    def with_env_overrides(self) -> "ServerConfig":
        cfg = self
        if os.environ.get("PLEXFED_ADDR"):
            cfg = replace(cfg, addr=os.environ["PLEXFED_ADDR"])
        if os.environ.get("PLEXFED_REGISTRY_DIR"):
            cfg = replace(cfg, registry_dir=os.environ["PLEXFED_REGISTRY_DIR"])
        if os.environ.get("PLEXFED_API_KEY"):
            cfg = replace(cfg, api_keys=(os.environ["PLEXFED_API_KEY"],))
        return cfg

    def policy(self) -> MergePolicy:
        return MergePolicy(alpha=self.alpha, epsilon_gate=self.epsilon_gate)


def load_reference_dir(path) -> ReferenceSet:
    """Load a directory of paired ``<name>_img.vol1`` / ``<name>_msk.vol1`` files."""
    base = Path(path)
    pairs = []
    for img in sorted(base.glob("*_img.vol1")):
        msk = img.with_name(img.name.replace("_img.vol1", "_msk.vol1"))
        if not msk.exists():
            raise FileNotFoundError(f"mask file missing for {img.name}")
        pairs.append((volio.read_volume(img), volio.read_mask(msk)))
    return ReferenceSet(tuple(pairs))


@dataclass
class FederationServer:
    """Application core behind the HTTP layer; usable in-process as well."""

    registry: Registry
    reference: ReferenceSet
    policy: MergePolicy = field(default_factory=MergePolicy)
    api_key_digests: tuple[str, ...] = (_digest(DEFAULT_API_KEY),)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._region_locks: dict[str, threading.Lock] = {}
        self.decision_log: list[dict] = []

    @classmethod
    def from_config(cls, config: ServerConfig) -> "FederationServer":
        registry = load_registry(config.registry_dir)
        reference = load_reference_dir(config.reference_set_dir)
        return cls(registry=registry, reference=reference, policy=config.policy(),
                   api_key_digests=tuple(_digest(k) for k in config.api_keys))

    def _region_lock(self, region: str) -> threading.Lock:
        with self._lock:
            return self._region_locks.setdefault(region, threading.Lock())

    def seed_model(self, region: str, bundle: ModelBundle) -> dict:
        """Install the first model for a region (no-op if one exists)."""
        with self._region_lock(region):
            if self.registry.has_region(region):
                return self._head_response(region)
            ref = reference_dice(bundle, self.reference)
            self.registry.append(region, bundle, ref)
            return self._head_response(region)

    def _head_response(self, region: str) -> dict:
        head = self.registry.head(region)
        from ..segmenter import encode_bundle
        return {
            "version": head.version,
            "checksum_hex": head.checksum,
            "created_at": head.created_at,
            "reference_dice": head.reference_dice,
            "payload_b64": base64.b64encode(encode_bundle(head.bundle)).decode("ascii"),
        }

    # -- endpoint bodies ----------------------------------------------------
    def get_latest(self, region: str) -> tuple[int, dict]:
        with self._region_lock(region):
            if not self.registry.has_region(region):
                return 404, {"error": "unknown_region", "region": region}
            return 200, self._head_response(region)

    def get_log(self, region: str) -> tuple[int, dict]:
        with self._lock:
            entries = [d for d in self.decision_log if d["region"] == region]
        return 200, {"decisions": entries}

    def submit_update(self, region: str, body: dict, api_key: str) -> tuple[int, dict]:
        supplied = _digest(api_key or "")
        if not any(hmac.compare_digest(supplied, d) for d in self.api_key_digests):
            return 401, {"error": "unauthorized"}

        required = ("client_id", "base_version", "volume_count", "iterations",
                    "seed", "payload_b64", "payload_checksum_hex")
        missing = [k for k in required if k not in body]
        if missing:
            return 400, {"error": "bad_request", "detail": f"missing fields {missing}"}

        try:
            payload = base64.b64decode(body["payload_b64"], validate=True)
        except (ValueError, TypeError):
            return 400, {"error": "bad_request", "detail": "payload_b64 is not valid base64"}
        if hashlib.sha256(payload).hexdigest() != body["payload_checksum_hex"]:
            return 400, {"error": "integrity", "detail": "payload checksum mismatch"}

        try:
            incoming = decode_bundle(payload)
        except BundleDecodeError as e:
            return 400, {"error": "structural", "detail": str(e)}

        with self._region_lock(region):
            if not self.registry.has_region(region):
                return 404, {"error": "unknown_region", "region": region}
            head = self.registry.head(region)
            entry = {
                "region": region,
                "client_id": body["client_id"],
                "base_version": body["base_version"],
                "head_version": head.version,
                "stale_base": body["base_version"] != head.version,
                "volume_count": body["volume_count"],
            }

            if int(body["volume_count"]) < IL_MIN_VOLUMES:
                entry.update(decision="rejected", reason="insufficient_volumes",
                             candidate_dice=None, current_dice=head.reference_dice)
                self._log(entry)
                return 422, {"accepted": False, "reason": "insufficient_volumes",
                             "candidate_dice": None, "current_dice": head.reference_dice}

            try:
                merged = merge(head.bundle, incoming, self.policy)
            except MergeStructureError as e:
                entry.update(decision="rejected", reason="structural",
                             candidate_dice=None, current_dice=head.reference_dice)
                self._log(entry)
                return 400, {"error": "structural", "detail": str(e)}

            decision = validate_candidate(merged, self.reference,
                                          head.reference_dice, self.policy)
            if not decision.accepted:
                entry.update(decision="rejected", reason=decision.reason,
                             candidate_dice=decision.candidate_dice,
                             current_dice=decision.current_dice)
                self._log(entry)
                return 422, {"accepted": False, "reason": decision.reason,
                             "candidate_dice": decision.candidate_dice,
                             "current_dice": decision.current_dice}

            merged = merged.with_event({
                "kind": "accepted_update",
                "client_id": body["client_id"],
                "base_version": body["base_version"],
                "volume_count": body["volume_count"],
                "iterations": body["iterations"],
                "seed": body["seed"],
            })
            mv = self.registry.append(region, merged, decision.candidate_dice)
            entry.update(decision="accepted", reason="accepted",
                         candidate_dice=decision.candidate_dice,
                         current_dice=decision.current_dice, version=mv.version)
            self._log(entry)
            return 200, {"accepted": True, "version": mv.version,
                         "reference_dice": mv.reference_dice}

    def _log(self, entry: dict) -> None:
        with self._lock:
            self.decision_log.append(entry)


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------
_LATEST_RE = re.compile(r"^/v1/models/([^/]+)/latest$")
_UPDATES_RE = re.compile(r"^/v1/models/([^/]+)/updates$")
_LOG_RE = re.compile(r"^/v1/models/([^/]+)/log$")


class _Handler(BaseHTTPRequestHandler):
    app: FederationServer = None  # set by make_http_server

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _send(self, status: int, payload: dict):
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self):
        m = _LATEST_RE.match(self.path)
        if m:
            status, payload = self.app.get_latest(m.group(1))
            self._send(status, payload)
            return
        m = _LOG_RE.match(self.path)
        if m:
            status, payload = self.app.get_log(m.group(1))
            self._send(status, payload)
            return
        self._send(404, {"error": "not_found", "detail": self.path})

    def do_POST(self):
        m = _UPDATES_RE.match(self.path)
        if not m:
            self._send(404, {"error": "not_found", "detail": self.path})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, json.JSONDecodeError):
            self._send(400, {"error": "bad_request", "detail": "body is not valid JSON"})
            return
        api_key = self.headers.get("X-Api-Key", "")
        status, payload = self.app.submit_update(m.group(1), body, api_key)
        self._send(status, payload)


def make_http_server(app: FederationServer, addr: str = DEFAULT_ADDR) -> ThreadingHTTPServer:
    host, _, port = addr.partition(":")
    handler = type("BoundHandler", (_Handler,), {"app": app})
    return ThreadingHTTPServer((host, int(port or 0)), handler)


def start_in_thread(app: FederationServer,
                    addr: str = "127.0.0.1:0") -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Run the HTTP server on a daemon thread; returns (server, thread).

    Use server.server_address for the bound (host, port); shut down with
    server.shutdown().
    """
    httpd = make_http_server(app, addr)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    return httpd, thread
