"""Server-mediated model exchange: weighted merging, Dice-gated validation,
an append-only hash-chained registry, and the HTTP server/client pair."""

from .merge import (GateDecision, MergePolicy, MergeStructureError, ReferenceSet,
                    merge, reference_dice, validate_candidate)
from .registry import (ModelVersion, Registry, RegistryLoadError,
                       UnknownRegionError, load_registry)
from .server import FederationServer, ServerConfig, load_reference_dir
from .client import (ClientError, IntegrityError, RoundReport,
                     ServerUnreachableError, download_latest, run_il_round,
                     submit_update)

__all__ = [
    "GateDecision", "MergePolicy", "MergeStructureError", "ReferenceSet",
    "merge", "reference_dice", "validate_candidate",
    "ModelVersion", "Registry", "RegistryLoadError", "UnknownRegionError",
    "load_registry",
    "FederationServer", "ServerConfig", "load_reference_dir",
    "ClientError", "IntegrityError", "RoundReport", "ServerUnreachableError",
    "download_latest", "run_il_round", "submit_update",
]
