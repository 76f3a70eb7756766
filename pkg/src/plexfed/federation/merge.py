"""Weighted model merging and the reference-set acceptance gate."""

import hashlib
from dataclasses import dataclass

import numpy as np

from ..metrics import dice
from ..segmenter import (ModelBundle, SegmenterParams, encode_bundle,
                         ensemble_predict)
from ..volume import Mask, Volume, normalize_intensity


class MergeStructureError(ValueError):
    """Slot configurations disagree between the two bundles."""


@dataclass(frozen=True)
class MergePolicy:
    """alpha weights the pre-existing global model; epsilon_gate bounds the
    allowed reference-Dice regression of an accepted update."""

    alpha: float = 0.5
    epsilon_gate: float = 0.02

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon_gate < 0.0:
            raise ValueError(f"epsilon_gate must be >= 0, got {self.epsilon_gate}")


@dataclass(frozen=True)
class ReferenceSet:
    """Labeled pairs held privately server-side; never sent to clients."""

    pairs: tuple[tuple[Volume, Mask], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise ValueError("reference set must be non-empty")


def bundle_checksum(b: ModelBundle) -> str:
    return hashlib.sha256(encode_bundle(b)).hexdigest()


def merge(global_bundle: ModelBundle, incoming: ModelBundle,
          policy: MergePolicy) -> ModelBundle:
    """Entrywise weighted average: alpha * global + (1 - alpha) * incoming.

    Slot i merges with slot i; any configuration mismatch rejects the merge.
    """
    slots = []
    for i, (g, c) in enumerate(zip(global_bundle.slots, incoming.slots)):
        if g.config != c.config:
            raise MergeStructureError(
                f"slot {i} config mismatch: {g.config.config_id!r} with features "
                f"{g.config.features} vs {c.config.config_id!r} with features "
                f"{c.config.features}")
        w = policy.alpha * g.weights + (1.0 - policy.alpha) * c.weights
        slots.append(SegmenterParams(g.config, w, init_seed=g.init_seed))
    event = {
        "kind": "merge",
        "alpha": policy.alpha,
        "parent_global": bundle_checksum(global_bundle),
        "parent_incoming": bundle_checksum(incoming),
        "global_version": global_bundle.version,
        "incoming_version": incoming.version,
    }
    return ModelBundle(
        slots=tuple(slots),
        version=f"merge({global_bundle.version},{incoming.version})",
        parent_hash=bundle_checksum(global_bundle),
        region_tag=global_bundle.region_tag,
        provenance=global_bundle.provenance + (event,),
    )


def reference_dice(b: ModelBundle, ref: ReferenceSet) -> float:
    """Median ensemble Dice of a bundle over the reference pairs."""
    scores = []
    for vol, msk in ref.pairs:
        pred = ensemble_predict(b, normalize_intensity(vol))
        scores.append(dice(pred, msk))
    return float(np.median(scores))


@dataclass(frozen=True)
class GateDecision:
    accepted: bool
    reason: str
    candidate_dice: float
    current_dice: float


def validate_candidate(candidate: ModelBundle, ref: ReferenceSet,
                       current_reference_dice: float,
                       policy: MergePolicy) -> GateDecision:
    """Accept iff the candidate's median reference Dice does not regress more
    than epsilon_gate below the current value."""
    cand = reference_dice(candidate, ref)
    if cand >= current_reference_dice - policy.epsilon_gate:
        return GateDecision(True, "accepted", cand, current_reference_dice)
    return GateDecision(False, "reference_dice_regression", cand, current_reference_dice)
