"""The trainable per-voxel segmenter and its five-slot ensemble bundle.

A segmenter is a linear classifier over per-voxel features: probability =
sigmoid(w . f + b). Training minimizes mean binary cross-entropy plus a soft
overlap (Dice) loss with analytic gradients, stepping with a hand-rolled
decoupled-weight-decay Adam. Five independently configured segmenters form a
ModelBundle whose prediction is a per-voxel majority vote.
"""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .augment import augment
from .features import FeatureConfig, extract_features
from .volume import Mask, Volume, normalize_intensity

REGION_TAG = "choroid_plexus"

# Loss constants: soft-Dice stabilizer and the probability clamp used inside
# the cross-entropy term.
DICE_EPS = 1e-5
CE_CLAMP = 1e-7

INIT_WEIGHT_RANGE = 0.1

# Default step size for training runs. The iteration budgets here are two to
# three orders of magnitude below what the conventional 1e-4 Adam rate needs
# to traverse this loss surface (the background-suppression plateau alone
# costs thousands of unit steps), so training uses a proportionally larger
# rate by default. Configurable per call.
TRAIN_LR = 2e-2
TRAIN_WEIGHT_DECAY = 1e-5


@dataclass(frozen=True)
class SegmenterParams:
    """Weights of one segmenter: one weight per feature plus a trailing bias."""

    config: FeatureConfig
    weights: np.ndarray
    init_seed: int = 0

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        expected = self.config.n_features + 1
        if w.shape != (expected,):
            raise ValueError(f"weights must have length {expected}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")


def init_params(config: FeatureConfig, init_seed: int) -> SegmenterParams:
    """Fresh parameters: uniform weights in +-INIT_WEIGHT_RANGE, zero bias."""
    rng = np.random.default_rng(init_seed)
    w = np.concatenate([
        rng.uniform(-INIT_WEIGHT_RANGE, INIT_WEIGHT_RANGE, config.n_features),
        [0.0],
    ])
    return SegmenterParams(config, w, init_seed=init_seed)


@dataclass(frozen=True)
class OptimizerState:
    """Adam state with decoupled weight decay."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "m", np.ascontiguousarray(self.m, dtype=np.float64))
        object.__setattr__(self, "v", np.ascontiguousarray(self.v, dtype=np.float64))
        if self.m.shape != self.v.shape:
            raise ValueError("m and v must have the same shape")
        if np.any(self.v < 0):
            raise ValueError("second-moment entries must be >= 0")
        if self.t < 0:
            raise ValueError("step count must be >= 0")


def init_optimizer(n_weights: int, lr: float = 1e-4, weight_decay: float = 1e-5) -> OptimizerState:
    return OptimizerState(np.zeros(n_weights), np.zeros(n_weights),
                          lr=lr, weight_decay=weight_decay)


def adamw_step(state: OptimizerState, weights: np.ndarray,
               grad: np.ndarray) -> tuple[OptimizerState, np.ndarray]:
    """One bias-corrected Adam update plus additive decoupled decay.

    Both the moment estimate step and lr * wd * w are subtracted from the
    incoming weights.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains non-finite entries")
    if grad.shape != weights.shape or grad.shape != state.m.shape:
        raise ValueError("gradient, weights and optimizer state shapes disagree")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_w = weights - state.lr * (m_hat / (np.sqrt(v_hat) + state.epsilon)) \
        - state.lr * state.weight_decay * weights
    new_state = replace(state, m=m, v=v, t=t)
    return new_state, new_w


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------
def predict_probs(p: SegmenterParams, v: Volume) -> np.ndarray:
    """Per-voxel foreground probabilities, shaped like the volume.

    Expects a normalized volume.
    """
    if not np.all(np.isfinite(p.weights)):
        raise ValueError("weights must be finite")
    F = extract_features(v, p.config)
    z = F @ p.weights[:-1] + p.weights[-1]
    return expit(z).reshape(v.dims)


def binarize(probs: np.ndarray, threshold: float = 0.5,
             spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Mask:
    """Label 1 iff probability strictly exceeds the threshold."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    labels = (np.asarray(probs) > threshold).astype(np.uint8)
    if labels.ndim != 3:
        raise ValueError("binarize expects a 3D probability map")
    return Mask(labels, spacing_mm)


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------
def _loss_terms(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean cross-entropy, soft-Dice loss) for flat prob/label arrays."""
    p = np.clip(probs, CE_CLAMP, 1.0 - CE_CLAMP)
    g = labels
    ce = float(-np.mean(g * np.log(p) + (1.0 - g) * np.log(1.0 - p)))
    a = float(np.dot(probs, g))
    b = float(probs.sum())
    tot = float(g.sum())
    dice_loss = 1.0 - (2.0 * a + DICE_EPS) / (b + tot + DICE_EPS)
    return ce, dice_loss


def loss(probs: np.ndarray, gt: Mask, lambda_dice: float = 1.0,
         lambda_ce: float = 1.0) -> float:
    """Weighted sum of mean cross-entropy and soft-Dice loss."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    g = gt.labels.ravel().astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"probability map ({p.shape}) and mask ({g.shape}) are misaligned")
    ce, dice_loss = _loss_terms(p, g)
    return lambda_ce * ce + lambda_dice * dice_loss


def _grad_from_features(weights: np.ndarray, F: np.ndarray, g: np.ndarray,
                        lambda_dice: float, lambda_ce: float) -> np.ndarray:
    """Analytic gradient of loss() wrt (weights, bias) given a feature matrix."""
    z = F @ weights[:-1] + weights[-1]
    p = expit(z)
    n = p.size

    unclipped = (p > CE_CLAMP) & (p < 1.0 - CE_CLAMP)
    dz_ce = np.where(unclipped, (p - g) / n, 0.0)

    a = float(np.dot(p, g))
    b = float(p.sum())
    tot = float(g.sum())
    denom = b + tot + DICE_EPS
    d_dice_dp = -(2.0 * g * denom - (2.0 * a + DICE_EPS)) / (denom * denom)
    dz_dice = d_dice_dp * p * (1.0 - p)

    dz = lambda_ce * dz_ce + lambda_dice * dz_dice
    return np.concatenate([F.T @ dz, [dz.sum()]])


def grad_loss(p: SegmenterParams, v: Volume, gt: Mask,
              lambda_dice: float = 1.0, lambda_ce: float = 1.0) -> np.ndarray:
    """Exact gradient of loss(predict_probs(p, v), gt) wrt weights and bias."""
    F = extract_features(v, p.config)
    g = gt.labels.ravel().astype(np.float64)
    return _grad_from_features(p.weights, F, g, lambda_dice, lambda_ce)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
def _dice_binary(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.count_nonzero(a & b))
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    return 1.0 if total == 0 else 2.0 * inter / total


@dataclass(frozen=True)
class TrainResult:
    params: SegmenterParams
    best_val_dice: float
    history: tuple[tuple[int, float], ...]  # (iteration, median val dice)


def _val_dice(weights: np.ndarray, val_feats, val_labels, threshold: float = 0.5) -> float:
    scores = []
    for F, g in zip(val_feats, val_labels):
        p = expit(F @ weights[:-1] + weights[-1])
        scores.append(_dice_binary(p > threshold, g))
    return float(np.median(scores))


def train(p: SegmenterParams, train_pairs: list[tuple[Volume, Mask]],
          val_pairs: list[tuple[Volume, Mask]], max_iters: int,
          augment_on: bool = True, seed: int = 0,
          lr: float = TRAIN_LR, weight_decay: float = TRAIN_WEIGHT_DECAY,
          eval_every: int | None = None) -> TrainResult:
    """Single-pair-per-step training with best-validation-snapshot selection.

    Steps cycle through the training pairs in seeded shuffled order, one
    (volume, mask) pair per step. With augment_on, each step draws a fresh
    augmentation seed; steps where nothing fires reuse cached clean features.
    Validation Dice (median over val_pairs) is recorded before the first step
    and every eval_every steps; the returned parameters are the snapshot with
    the best recorded value (earliest on ties).
    """
    if not train_pairs:
        raise ValueError("training set must be non-empty")
    if not val_pairs:
        raise ValueError("validation set must be non-empty")
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")

    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFF, 0x7261696E])
    cfg = p.config

    clean_feats = []
    clean_labels = []
    for vol, msk in train_pairs:
        if vol.dims != msk.dims:
            raise ValueError("training volume/mask dims disagree")
        clean_feats.append(extract_features(normalize_intensity(vol), cfg))
        clean_labels.append(msk.labels.ravel().astype(np.float64))

    val_feats = []
    val_labels = []
    for vol, msk in val_pairs:
        val_feats.append(extract_features(normalize_intensity(vol), cfg))
        val_labels.append(msk.labels.ravel().astype(np.uint8))

    ev = eval_every if eval_every is not None else max(1, max_iters // 50)

    weights = p.weights.copy()
    state = init_optimizer(weights.size, lr=lr, weight_decay=weight_decay)

    best = _val_dice(weights, val_feats, val_labels)
    best_w = weights.copy()
    history = [(0, best)]

    order = rng.permutation(len(train_pairs))
    pos = 0
    for it in range(1, max_iters + 1):
        if pos >= len(order):
            order = rng.permutation(len(train_pairs))
            pos = 0
        idx = int(order[pos])
        pos += 1

        F = clean_feats[idx]
        g = clean_labels[idx]
        if augment_on:
            step_seed = int(rng.integers(0, 2 ** 63 - 1))
            vol, msk = train_pairs[idx]
            av, am = augment(vol, msk, step_seed)
            if av is not vol:
                F = extract_features(normalize_intensity(av), cfg)
                g = am.labels.ravel().astype(np.float64)

        grad = _grad_from_features(weights, F, g, 1.0, 1.0)
        state, weights = adamw_step(state, weights, grad)

        if it % ev == 0 or it == max_iters:
            score = _val_dice(weights, val_feats, val_labels)
            history.append((it, score))
            if score > best:
                best = score
                best_w = weights.copy()

    result_params = SegmenterParams(cfg, best_w, init_seed=p.init_seed)
    return TrainResult(result_params, best, tuple(history))


# ---------------------------------------------------------------------------
# The five-slot bundle
# ---------------------------------------------------------------------------
BUNDLE_MAGIC = b"MBL1"
BUNDLE_FORMAT_VERSION = 1
N_SLOTS = 5
MAJORITY = 3


@dataclass(frozen=True)
class ModelBundle:
    """Exactly five segmenters plus lineage metadata; the unit of exchange."""

    slots: tuple[SegmenterParams, ...]
    version: str = "unversioned"
    parent_hash: str = ""
    region_tag: str = REGION_TAG
    provenance: tuple[dict, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if len(self.slots) != N_SLOTS:
            raise ValueError(f"a bundle holds exactly {N_SLOTS} slots, got {len(self.slots)}")

    def with_event(self, event: dict) -> "ModelBundle":
        return replace(self, provenance=self.provenance + (event,))


def ensemble_predict(b: ModelBundle, v: Volume, threshold: float = 0.5) -> Mask:
    """Per-voxel majority vote: label 1 iff >= 3 of 5 slots predict 1."""
    votes = np.zeros(v.dims, dtype=np.int32)
    for params in b.slots:
        votes += binarize(predict_probs(params, v), threshold, v.spacing_mm).labels
    return Mask((votes >= MAJORITY).astype(np.uint8), v.spacing_mm)


# ---------------------------------------------------------------------------
# Canonical serialization (wire format and registry payload)
# ---------------------------------------------------------------------------
def encode_bundle(b: ModelBundle) -> bytes:
    """Canonical bytes: JSON metadata header + per-slot float64 LE weights."""
    header = {
        "region_tag": b.region_tag,
        "version": b.version,
        "parent_hash": b.parent_hash,
        "provenance": list(b.provenance),
        "slots": [
            {
                "config_id": s.config.config_id,
                "features": list(s.config.features),
                "radius": s.config.radius,
                "init_seed": s.init_seed,
            }
            for s in b.slots
        ],
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [BUNDLE_MAGIC, struct.pack("<H", BUNDLE_FORMAT_VERSION),
           struct.pack("<I", len(hjson)), hjson]
    for s in b.slots:
        w = s.weights.astype("<f8").tobytes()
        out.append(struct.pack("<I", s.weights.size))
        out.append(w)
    return b"".join(out)


class BundleDecodeError(ValueError):
    """Raised when bundle bytes are structurally invalid."""


def decode_bundle(blob: bytes) -> ModelBundle:
    if len(blob) < 10 or blob[:4] != BUNDLE_MAGIC:
        raise BundleDecodeError("bad bundle magic")
    (fmt,) = struct.unpack_from("<H", blob, 4)
    if fmt != BUNDLE_FORMAT_VERSION:
        raise BundleDecodeError(f"unsupported bundle format version {fmt}")
    (hlen,) = struct.unpack_from("<I", blob, 6)
    off = 10 + hlen
    if len(blob) < off:
        raise BundleDecodeError("truncated bundle header")
    try:
        header = json.loads(blob[10:off].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BundleDecodeError(f"malformed bundle header: {e}") from e
    slots = []
    try:
        slot_meta = header["slots"]
        for meta in slot_meta:
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            end = off + 8 * count
            if len(blob) < end:
                raise BundleDecodeError("truncated slot weights")
            w = np.frombuffer(blob[off:end], dtype="<f8").copy()
            off = end
            cfg = FeatureConfig(meta["config_id"], tuple(meta["features"]),
                                int(meta["radius"]))
            slots.append(SegmenterParams(cfg, w, init_seed=int(meta["init_seed"])))
        bundle = ModelBundle(
            slots=tuple(slots),
            version=header["version"],
            parent_hash=header["parent_hash"],
            region_tag=header["region_tag"],
            provenance=tuple(header["provenance"]),
        )
    except (KeyError, TypeError, ValueError, struct.error) as e:
        if isinstance(e, BundleDecodeError):
            raise
        raise BundleDecodeError(f"invalid bundle structure: {e}") from e
    if off != len(blob):
        raise BundleDecodeError(f"{len(blob) - off} trailing bytes after last slot")
    return bundle


def bundles_equal(a: ModelBundle, b: ModelBundle) -> bool:
    return encode_bundle(a) == encode_bundle(b)
