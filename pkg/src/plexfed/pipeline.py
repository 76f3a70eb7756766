"""Training regimes: cross-validated initial training, per-dataset
fine-tuning, and the client-side half of incremental learning.

All regimes treat bundles as values: the input bundle is never mutated, and
every invocation appends exactly one provenance event to its output.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .features import FeatureConfig, default_config_pool
from .segmenter import (ModelBundle, SegmenterParams, TRAIN_LR, TrainResult,
                        init_params, train)
from .volume import Mask, Volume

N_FOLDS = 5

DEFAULT_INITIAL_ITERS = 3000
DEFAULT_FINETUNE_ITERS = DEFAULT_INITIAL_ITERS // 3          # 1000
DEFAULT_IL_ITER_CAP = DEFAULT_INITIAL_ITERS * 4 // 30        # 400
IL_EPOCHS = 5
IL_MIN_VOLUMES = 10
FT_MIN_SUBJECTS = 10


class InsufficientSubjectsError(ValueError):
    """Too few labeled subjects for the requested regime."""


class InsufficientVolumesError(ValueError):
    """Local incremental learning requires at least ten labeled volumes."""


class MaskAlignmentError(ValueError):
    """Prediction and reference masks live on different grids."""


@dataclass(frozen=True)
class SplitPlan:
    """Subject assignment for one regime invocation."""

    fold_of: dict[str, int] = field(default_factory=dict)   # cross-validation
    train_ids: tuple[str, ...] = ()                         # single-split regimes
    val_ids: tuple[str, ...] = ()
    stratify_keys: tuple[str, ...] = ()


@dataclass(frozen=True)
class TrainingEvent:
    kind: str                       # initial | finetune | incremental | merge
    dataset_ids: tuple[str, ...]
    iterations: int
    seed: int
    slot_val_dice: tuple[float, ...]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dataset_ids": list(self.dataset_ids),
            "iterations": self.iterations,
            "seed": self.seed,
            "slot_val_dice": list(self.slot_val_dice),
            "extra": self.extra,
        }


def _child_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _dataset_ids(pairs: Sequence[tuple[Volume, Mask]]) -> tuple[str, ...]:
    return tuple(sorted({v.dataset_id for v, _ in pairs}))


def select_fold_winner(candidate_dices: Sequence[float]) -> int:
    """Argmax over validation Dice; ties go to the lowest candidate index."""
    best = 0
    for i in range(1, len(candidate_dices)):
        if candidate_dices[i] > candidate_dices[best]:
            best = i
    return best


def initial_training(dataset: list[tuple[Volume, Mask]],
                     configs: Optional[Sequence[FeatureConfig]] = None,
                     max_iters: int = DEFAULT_INITIAL_ITERS,
                     seed: int = 0,
                     augment_on: bool = True,
                     lr: float = TRAIN_LR,
                     version: str = "model0") -> ModelBundle:
    """Five-fold cross-validated training over a candidate config pool.

    Each fold trains every candidate with that fold as validation; the best
    candidate instance per fold (by validation Dice) becomes one bundle slot.
    """
    if len(dataset) < 2 * N_FOLDS:
        raise InsufficientSubjectsError(
            f"initial training needs >= {2 * N_FOLDS} subjects, got {len(dataset)}")
    pool = tuple(configs) if configs is not None else default_config_pool()

    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x666F6C64])
    order = rng.permutation(len(dataset))
    fold_of_index = {int(order[i]): i % N_FOLDS for i in range(len(dataset))}

    slots: list[SegmenterParams] = []
    slot_dice: list[float] = []
    candidate_table: list[list[float]] = []
    for fold in range(N_FOLDS):
        train_pairs = [dataset[i] for i in range(len(dataset)) if fold_of_index[i] != fold]
        val_pairs = [dataset[i] for i in range(len(dataset)) if fold_of_index[i] == fold]
        results: list[TrainResult] = []
        for j, cfg in enumerate(pool):
            params0 = init_params(cfg, _child_seed(seed, fold, j, 1))
            results.append(train(params0, train_pairs, val_pairs, max_iters,
                                 augment_on=augment_on,
                                 seed=_child_seed(seed, fold, j, 2), lr=lr))
        dices = [r.best_val_dice for r in results]
        winner = select_fold_winner(dices)
        slots.append(results[winner].params)
        slot_dice.append(dices[winner])
        candidate_table.append(dices)

    plan_ids = {dataset[i][0].subject_id: fold_of_index[i] for i in range(len(dataset))}
    event = TrainingEvent(
        kind="initial",
        dataset_ids=_dataset_ids(dataset),
        iterations=max_iters,
        seed=seed,
        slot_val_dice=tuple(slot_dice),
        extra={
            "fold_candidate_dice": candidate_table,
            "winning_config_ids": [s.config.config_id for s in slots],
            "fold_of": plan_ids,
        },
    ).to_dict()
    return ModelBundle(slots=tuple(slots), version=version, parent_hash="",
                       provenance=(event,))


def _half_split(pairs: Sequence[tuple[Volume, Mask]], seed: int) -> tuple[list, list, SplitPlan]:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x73706C69])
    order = rng.permutation(len(pairs))
    cut = len(pairs) // 2
    train_idx = [int(i) for i in order[:cut]]
    val_idx = [int(i) for i in order[cut:]]
    train_pairs = [pairs[i] for i in train_idx]
    val_pairs = [pairs[i] for i in val_idx]
    plan = SplitPlan(train_ids=tuple(pairs[i][0].subject_id for i in train_idx),
                     val_ids=tuple(pairs[i][0].subject_id for i in val_idx))
    return train_pairs, val_pairs, plan


def _continue_slots(base: ModelBundle, train_pairs, val_pairs, max_iters: int,
                    seed: int, augment_on: bool, lr: float) -> tuple[list[SegmenterParams], list[float]]:
    slots = []
    dices = []
    for i, params in enumerate(base.slots):
        result = train(params, train_pairs, val_pairs, max_iters,
                       augment_on=augment_on, seed=_child_seed(seed, i, 3), lr=lr)
        slots.append(result.params)
        dices.append(result.best_val_dice)
    return slots, dices


def fine_tune(base: ModelBundle, subjects: list[tuple[Volume, Mask]],
              max_iters: int = DEFAULT_FINETUNE_ITERS,
              seed: int = 0,
              augment_on: bool = True,
              lr: float = TRAIN_LR,
              version: Optional[str] = None) -> ModelBundle:
    """Continue training every slot on a 50/50 train/validation split.

    Each slot keeps its best-validation-Dice snapshot (the pre-fine-tune
    weights count as the iteration-0 candidate).
    """
    if len(subjects) < FT_MIN_SUBJECTS:
        raise InsufficientSubjectsError(
            f"fine-tuning needs >= {FT_MIN_SUBJECTS} labeled subjects, got {len(subjects)}")
    train_pairs, val_pairs, plan = _half_split(subjects, seed)
    slots, dices = _continue_slots(base, train_pairs, val_pairs, max_iters,
                                   seed, augment_on, lr)
    event = TrainingEvent(
        kind="finetune",
        dataset_ids=_dataset_ids(subjects),
        iterations=max_iters,
        seed=seed,
        slot_val_dice=tuple(dices),
        extra={"train_ids": list(plan.train_ids), "val_ids": list(plan.val_ids)},
    ).to_dict()
    new_version = version if version is not None else f"{base.version}+ft"
    return ModelBundle(slots=tuple(slots), version=new_version,
                       parent_hash=base.parent_hash, region_tag=base.region_tag,
                       provenance=base.provenance + (event,))


def local_incremental_learn(base: ModelBundle, volumes: list[tuple[Volume, Mask]],
                            iteration_cap: int = DEFAULT_IL_ITER_CAP,
                            seed: int = 0,
                            epochs: int = IL_EPOCHS,
                            augment_on: bool = True,
                            lr: float = TRAIN_LR,
                            version: Optional[str] = None) -> ModelBundle:
    """Client-side incremental learning round.

    Requires at least ten labeled volumes. The step budget is the smaller of
    the iteration cap and epochs * |train split| (both limits enforced).
    """
    if len(volumes) < IL_MIN_VOLUMES:
        raise InsufficientVolumesError(
            f"insufficient volumes: incremental learning needs >= {IL_MIN_VOLUMES}, "
            f"got {len(volumes)}")
    train_pairs, val_pairs, plan = _half_split(volumes, seed)
    budget = min(int(iteration_cap), int(epochs) * len(train_pairs))
    slots, dices = _continue_slots(base, train_pairs, val_pairs, budget,
                                   seed, augment_on, lr)
    event = TrainingEvent(
        kind="incremental",
        dataset_ids=_dataset_ids(volumes),
        iterations=budget,
        seed=seed,
        slot_val_dice=tuple(dices),
        extra={"iteration_cap": int(iteration_cap), "epochs": int(epochs),
               "train_ids": list(plan.train_ids), "val_ids": list(plan.val_ids)},
    ).to_dict()
    new_version = version if version is not None else f"{base.version}+il"
    return ModelBundle(slots=tuple(slots), version=new_version,
                       parent_hash=base.parent_hash, region_tag=base.region_tag,
                       provenance=base.provenance + (event,))


_CONN6 = ndimage.generate_binary_structure(3, 1)


def boundary_voxels(m: Mask) -> np.ndarray:
    """Boolean grid of the 6-connected interface band around the foreground.

    Covers foreground voxels touching background and background voxels
    touching foreground.
    """
    fg = m.labels.astype(bool)
    inner = fg & ~ndimage.binary_erosion(fg, structure=_CONN6, border_value=1)
    outer = ndimage.binary_dilation(fg, structure=_CONN6) & ~fg
    return inner | outer


def oracle_annotate(pred: Mask, gt: Mask, corruption_rate: float = 0.0,
                    seed: int = 0) -> Mask:
    """Simulated expert correction: the reference mask with a seeded fraction
    of its boundary voxels flipped.

    corruption_rate 0 returns the reference labels exactly.
    """
    if not pred.same_grid(gt):
        raise MaskAlignmentError(
            f"prediction grid {pred.dims} does not match reference grid {gt.dims}")
    if not (0.0 <= corruption_rate < 1.0):
        raise ValueError(f"corruption_rate must lie in [0, 1), got {corruption_rate}")
    labels = gt.labels.copy()
    if corruption_rate > 0.0:
        band = boundary_voxels(gt)
        coords = np.argwhere(band)
        n_flip = int(np.floor(corruption_rate * len(coords) + 0.5))
        if n_flip:
            rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6F7261])
            picks = rng.choice(len(coords), size=n_flip, replace=False)
            for i in picks:
                x, y, z = coords[i]
                labels[x, y, z] = 1 - labels[x, y, z]
    return Mask(labels, gt.spacing_mm)
