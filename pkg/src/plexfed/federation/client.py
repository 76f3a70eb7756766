"""Client-side download/train/submit flow for one incremental-learning round."""

import base64
import hashlib
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import requests

from ..metrics import dice
from ..pipeline import (DEFAULT_IL_ITER_CAP, IL_EPOCHS, local_incremental_learn)
from ..segmenter import (ModelBundle, TRAIN_LR, decode_bundle, encode_bundle,
                         ensemble_predict)
from ..volume import Mask, Volume, normalize_intensity

DEFAULT_RETRIES = 3
RETRY_DELAY_S = 0.2
REQUEST_TIMEOUT_S = 60.0


class ClientError(Exception):
    """Base class for client-side federation failures."""


class ServerUnreachableError(ClientError):
    """All connection attempts failed."""


class IntegrityError(ClientError):
    """Downloaded payload does not match its advertised checksum."""


def _request(method: str, url: str, retries: int, **kwargs):
    last = None
    for attempt in range(retries):
        try:
            return requests.request(method, url, timeout=REQUEST_TIMEOUT_S, **kwargs)
        except requests.exceptions.ConnectionError as e:
            last = e
            if attempt + 1 < retries:
                time.sleep(RETRY_DELAY_S * (attempt + 1))
    raise ServerUnreachableError(f"{method} {url} failed after {retries} attempts: {last}")


def download_latest(server_url: str, region: str,
                    retries: int = DEFAULT_RETRIES) -> tuple[dict, ModelBundle]:
    """Fetch and checksum-verify the head model for a region."""
    resp = _request("GET", f"{server_url}/v1/models/{region}/latest", retries)
    if resp.status_code == 404:
        raise ClientError(f"region {region!r} unknown to the server")
    if resp.status_code != 200:
        raise ClientError(f"unexpected status {resp.status_code}: {resp.text}")
    meta = resp.json()
    payload = base64.b64decode(meta["payload_b64"])
    if hashlib.sha256(payload).hexdigest() != meta["checksum_hex"]:
        raise IntegrityError("downloaded payload fails checksum verification")
    return meta, decode_bundle(payload)


def submit_update(server_url: str, region: str, api_key: str, bundle: ModelBundle,
                  base_version: int, client_id: str, volume_count: int,
                  iterations: int, seed: int,
                  retries: int = DEFAULT_RETRIES) -> tuple[int, dict]:
    payload = encode_bundle(bundle)
    body = {
        "client_id": client_id,
        "base_version": base_version,
        "volume_count": volume_count,
        "iterations": iterations,
        "seed": seed,
        "payload_b64": base64.b64encode(payload).decode("ascii"),
        "payload_checksum_hex": hashlib.sha256(payload).hexdigest(),
    }
    resp = _request("POST", f"{server_url}/v1/models/{region}/updates", retries,
                    json=body, headers={"X-Api-Key": api_key})
    try:
        return resp.status_code, resp.json()
    except ValueError as e:
        raise ClientError(f"server returned non-JSON body ({resp.status_code})") from e


@dataclass(frozen=True)
class RoundReport:
    region: str
    client_id: str
    base_version: int
    decision: str                  # "accepted" | "rejected"
    reason: str
    new_version: Optional[int]
    reference_dice: Optional[float]
    candidate_dice: Optional[float]
    current_dice: Optional[float]
    local_dice_before: float
    local_dice_after: float
    iterations: int


def _median_local_dice(bundle: ModelBundle, pairs) -> float:
    scores = []
    for vol, msk in pairs:
        scores.append(dice(ensemble_predict(bundle, normalize_intensity(vol)), msk))
    return float(np.median(scores))


def run_il_round(server_url: str, region: str, api_key: str,
                 local_pairs: list[tuple[Volume, Mask]],
                 seed: int = 0,
                 iteration_cap: int = DEFAULT_IL_ITER_CAP,
                 epochs: int = IL_EPOCHS,
                 augment_on: bool = True,
                 lr: float = TRAIN_LR,
                 client_id: str = "client",
                 retries: int = DEFAULT_RETRIES) -> RoundReport:
    """One full federation round: download head, learn locally, submit back.

    Returns the server's decision plus local before/after median Dice. Raises
    InsufficientVolumesError before any network submission when fewer than
    ten labeled volumes are supplied.
    """
    meta, head = download_latest(server_url, region, retries)
    before = _median_local_dice(head, local_pairs)

    updated = local_incremental_learn(head, local_pairs, iteration_cap=iteration_cap,
                                      seed=seed, epochs=epochs,
                                      augment_on=augment_on, lr=lr)
    after = _median_local_dice(updated, local_pairs)
    iterations = updated.provenance[-1]["iterations"]

    status, resp = submit_update(server_url, region, api_key, updated,
                                 base_version=meta["version"], client_id=client_id,
                                 volume_count=len(local_pairs),
                                 iterations=iterations, seed=seed, retries=retries)
    if status == 200 and resp.get("accepted"):
        return RoundReport(region, client_id, meta["version"], "accepted", "accepted",
                           resp["version"], resp["reference_dice"], None, None,
                           before, after, iterations)
    if status == 422:
        return RoundReport(region, client_id, meta["version"], "rejected",
                           resp.get("reason", "rejected"), None, None,
                           resp.get("candidate_dice"), resp.get("current_dice"),
                           before, after, iterations)
    raise ClientError(f"update submission failed with status {status}: {resp}")
