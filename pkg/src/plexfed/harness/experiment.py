"""End-to-end experiment flow on the synthetic domains.

Artifacts live under the configured output directory:

    data/{domain}/{stem}_img.vol1 + _msk.vol1    generated cohorts
    reference/                                   server-private reference pairs
    manifest.json                                splits, QC exclusions, checksums
    bundles/{model_id}.mbl                       canonical bundle bytes
    registry/                                    the federation hash chain
    reports/*.csv, reports/il_rounds.json        evaluation outputs
"""

import base64
import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import requests
from scipy.special import expit

from .. import volio
from ..features import extract_features
from ..federation.client import download_latest, run_il_round
from ..federation.registry import load_registry
from ..federation.server import (FederationServer, _digest, load_reference_dir,
                                 start_in_thread)
from ..metrics import (MetricsReport, SubjectRow, dice, general_sample,
                       median_iqr, ols_fit, volume_mm3)
from ..pipeline import fine_tune, initial_training, oracle_annotate
from ..qc import qc_screen
from ..segmenter import (MAJORITY, ModelBundle, REGION_TAG, decode_bundle,
                         encode_bundle, ensemble_predict)
from ..volume import Mask, Volume, generate_phantom, normalize_intensity
from .config import ExperimentConfig

FT_MODELS = ("model0", "ft1", "ft2", "ft3", "ft4", "ftall")
IL_MODELS = ("il1", "il2", "il3", "il4")


class OutputExistsError(RuntimeError):
    """Refusing to overwrite an existing non-empty data tree without --force."""


class MissingArtifactError(RuntimeError):
    """A required upstream artifact has not been produced yet."""


class MissingCellError(RuntimeError):
    """An evaluation cell has no per-subject rows."""


class QCExclusionError(RuntimeError):
    """Quality screening left a training split too small to proceed."""


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
               .generate_state(1)[0])


@dataclasses.dataclass(frozen=True)
class Paths:
    out: Path

    @property
    def data(self) -> Path:
        return self.out / "data"

    @property
    def reference(self) -> Path:
        return self.out / "reference"

    @property
    def bundles(self) -> Path:
        return self.out / "bundles"

    @property
    def registry(self) -> Path:
        return self.out / "registry"

    @property
    def reports(self) -> Path:
        return self.out / "reports"

    @property
    def manifest(self) -> Path:
        return self.out / "manifest.json"

    def bundle_file(self, model_id: str) -> Path:
        return self.bundles / f"{model_id}.mbl"


def paths_for(config: ExperimentConfig) -> Paths:
    return Paths(Path(config.out_dir))


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------
def cmd_gen_data(config: ExperimentConfig, force: bool = False) -> dict:
    """Generate all cohorts, run the quality screen, write the dataset tree."""
    p = paths_for(config)
    if p.data.exists() and any(p.data.iterdir()):
        if not force:
            raise OutputExistsError(
                f"{p.data} already holds data; pass --force to regenerate")
        for child in sorted(p.data.rglob("*"), reverse=True):
            child.unlink() if child.is_file() else child.rmdir()
    p.data.mkdir(parents=True, exist_ok=True)
    p.reference.mkdir(parents=True, exist_ok=True)

    manifest: dict = {"domains": {}, "files": {}}
    for d_idx, domain in enumerate(config.domains):
        n_train, n_test = config.counts(domain.domain_id)
        stems: list[str] = []
        roles: dict[str, str] = {}
        volumes: dict[str, Volume] = {}
        masks: dict[str, Mask] = {}

        for i in range(n_train + n_test):
            stem = f"{domain.domain_id}_{i:03d}"
            vol, msk = generate_phantom(domain, _child_seed(config.seed, d_idx, i))
            vol = dataclasses.replace(vol, subject_id=stem)
            stems.append(stem)
            roles[stem] = "train" if i < n_train else "test"
            volumes[stem] = vol
            masks[stem] = msk

        for j, inj in enumerate(o for o in config.qc_outliers
                                if o.domain_id == domain.domain_id):
            stem = f"{domain.domain_id}_{inj.label}"
            corrupted = dataclasses.replace(domain, noise_sigma=inj.noise_sigma)
            vol, msk = generate_phantom(corrupted, _child_seed(config.seed, d_idx, 1000 + j))
            vol = dataclasses.replace(vol, subject_id=stem)
            stems.append(stem)
            roles[stem] = "train"
            volumes[stem] = vol
            masks[stem] = msk

        report = qc_screen([volumes[s] for s in stems], config.qc_z_threshold)
        excluded = [s for s in stems if report.is_flagged(s)]

        train_stems = [s for s in stems if roles[s] == "train" and s not in excluded]
        test_stems = [s for s in stems if roles[s] == "test" and s not in excluded]
        min_train = 10
        if len(train_stems) < min_train:
            raise QCExclusionError(
                f"domain {domain.domain_id}: only {len(train_stems)} training subjects "
                f"survived quality screening (need {min_train})")

        ddir = p.data / domain.domain_id
        ddir.mkdir(parents=True, exist_ok=True)
        for stem in stems:
            img_bytes = volio.encode_volume(volumes[stem])
            msk_bytes = volio.encode_mask(masks[stem])
            (ddir / f"{stem}_img.vol1").write_bytes(img_bytes)
            (ddir / f"{stem}_msk.vol1").write_bytes(msk_bytes)
            manifest["files"][stem] = {
                "img_sha256": hashlib.sha256(img_bytes).hexdigest(),
                "msk_sha256": hashlib.sha256(msk_bytes).hexdigest(),
            }

        manifest["domains"][domain.domain_id] = {
            "train": train_stems,
            "test": test_stems,
            "excluded": sorted(excluded),
            "qc_threshold": config.qc_z_threshold,
        }

    # The second domain's test split doubles as the server's private reference set.
    ref_id = config.reference_domain.domain_id
    for stem in manifest["domains"][ref_id]["test"]:
        for suffix in ("_img.vol1", "_msk.vol1"):
            src = p.data / ref_id / f"{stem}{suffix}"
            (p.reference / f"{stem}{suffix}").write_bytes(src.read_bytes())

    p.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(config: ExperimentConfig) -> dict:
    p = paths_for(config)
    if not p.manifest.exists():
        raise MissingArtifactError(f"{p.manifest} not found; run gen-data first")
    return json.loads(p.manifest.read_text())


def load_split(config: ExperimentConfig, domain_id: str,
               split: str) -> list[tuple[str, Volume, Mask]]:
    manifest = load_manifest(config)
    p = paths_for(config)
    out = []
    for stem in manifest["domains"][domain_id][split]:
        ddir = p.data / domain_id
        out.append((stem, volio.read_volume(ddir / f"{stem}_img.vol1"),
                    volio.read_mask(ddir / f"{stem}_msk.vol1")))
    return out


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------
class _EvalCache:
    """Features per (subject, feature signature); shared across models."""

    def __init__(self):
        self._norm: dict[str, Volume] = {}
        self._feats: dict[tuple, np.ndarray] = {}

    def normalized(self, stem: str, vol: Volume) -> Volume:
        if stem not in self._norm:
            self._norm[stem] = normalize_intensity(vol)
        return self._norm[stem]

    def features(self, stem: str, vol: Volume, cfg) -> np.ndarray:
        key = (stem, cfg.features, cfg.radius)
        if key not in self._feats:
            self._feats[key] = extract_features(self.normalized(stem, vol), cfg)
        return self._feats[key]


def _cached_ensemble(bundle: ModelBundle, stem: str, vol: Volume,
                     cache: _EvalCache) -> Mask:
    votes = None
    for params in bundle.slots:
        F = cache.features(stem, vol, params.config)
        probs = expit(F @ params.weights[:-1] + params.weights[-1])
        vote = (probs > 0.5).astype(np.int32)
        votes = vote if votes is None else votes + vote
    labels = (votes >= MAJORITY).astype(np.uint8).reshape(vol.dims)
    return Mask(labels, vol.spacing_mm)


def evaluate_models(config: ExperimentConfig, models: dict[str, ModelBundle],
                    cache: _EvalCache | None = None) -> MetricsReport:
    """Every model on every domain's test split, one row per subject."""
    cache = cache or _EvalCache()
    report = MetricsReport()
    for domain_id in config.domain_ids:
        for stem, vol, gt in load_split(config, domain_id, "test"):
            for model_id, bundle in models.items():
                pred = _cached_ensemble(bundle, stem, vol, cache)
                report.add(SubjectRow(model_id, domain_id, stem,
                                      dice(pred, gt), volume_mm3(pred), volume_mm3(gt)))
    return report


def _save_bundle(p: Paths, model_id: str, bundle: ModelBundle) -> None:
    p.bundles.mkdir(parents=True, exist_ok=True)
    p.bundle_file(model_id).write_bytes(encode_bundle(bundle))


def load_bundle(path) -> ModelBundle:
    return decode_bundle(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# the fine-tuning arm
# ---------------------------------------------------------------------------
def cmd_run_ft_arm(config: ExperimentConfig) -> dict:
    """Train Model 0, the four per-domain fine-tunes, and the pooled fine-tune,
    then evaluate all six on every domain's test split."""
    p = paths_for(config)
    ids = config.domain_ids

    d0_pairs = [(v, m) for _, v, m in load_split(config, ids[0], "train")]
    model0 = initial_training(d0_pairs, max_iters=config.i0,
                              seed=_child_seed(config.seed, 101),
                              augment_on=config.augment_on, lr=config.lr,
                              version="model0")
    _save_bundle(p, "model0", model0)

    models: dict[str, ModelBundle] = {"model0": model0}
    pooled: list = []
    for k, domain_id in enumerate(ids[1:], start=1):
        pairs = [(v, m) for _, v, m in load_split(config, domain_id, "train")]
        pooled.extend(pairs)
        ftk = fine_tune(model0, pairs, max_iters=config.i_ft,
                        seed=_child_seed(config.seed, 110 + k),
                        augment_on=config.augment_on, lr=config.lr,
                        version=f"ft{k}")
        models[f"ft{k}"] = ftk
        _save_bundle(p, f"ft{k}", ftk)

    ftall = fine_tune(model0, pooled, max_iters=config.i_ft,
                      seed=_child_seed(config.seed, 120),
                      augment_on=config.augment_on, lr=config.lr,
                      version="ftall")
    models["ftall"] = ftall
    _save_bundle(p, "ftall", ftall)

    report = evaluate_models(config, models)
    p.reports.mkdir(parents=True, exist_ok=True)
    (p.reports / "per_subject_ft.csv").write_text(report.to_subject_csv())

    return {
        "models": sorted(models),
        "aggregates": {f"{m}|{d}": agg for (m, d), agg in report.aggregates().items()},
    }


# ---------------------------------------------------------------------------
# the incremental-learning arm
# ---------------------------------------------------------------------------
def build_server(config: ExperimentConfig, seed_model0: bool = True) -> FederationServer:
    """Assemble the federation server from the experiment's artifacts."""
    p = paths_for(config)
    registry = load_registry(p.registry)
    reference = load_reference_dir(p.reference)
    app = FederationServer(registry=registry, reference=reference,
                           policy=config.merge_policy(),
                           api_key_digests=(_digest(config.api_key),))
    if seed_model0 and not registry.has_region(REGION_TAG):
        m0_path = p.bundle_file("model0")
        if not m0_path.exists():
            raise MissingArtifactError(f"{m0_path} not found; run run-ft first")
        app.seed_model(REGION_TAG, load_bundle(m0_path))
    return app


def cmd_run_il_arm(config: ExperimentConfig, server_url: str | None = None) -> dict:
    """Run the four sequential federation rounds and evaluate each checkpoint.

    Boots an in-process server on config.server_addr unless server_url points
    at an external one. Rejected rounds are recorded and the sequence
    continues from the unchanged head.
    """
    p = paths_for(config)
    ids = config.domain_ids
    httpd = None
    try:
        if server_url is None:
            app = build_server(config)
            httpd, _ = start_in_thread(app, config.server_addr)
            host, port = httpd.server_address[:2]
            server_url = f"http://{host}:{port}"

        rounds = []
        models: dict[str, ModelBundle] = {}
        for k, domain_id in enumerate(ids[1:], start=1):
            meta, head = download_latest(server_url, REGION_TAG)
            local = []
            for i, (stem, vol, gt) in enumerate(load_split(config, domain_id, "train")):
                pred = ensemble_predict(head, normalize_intensity(vol))
                label = oracle_annotate(pred, gt, config.corruption_rate,
                                        seed=_child_seed(config.seed, 130 + k, i))
                local.append((vol, label))

            rep = run_il_round(server_url, REGION_TAG, config.api_key, local,
                               seed=_child_seed(config.seed, 140 + k),
                               iteration_cap=config.il_iteration_cap,
                               augment_on=config.augment_on, lr=config.lr,
                               client_id=f"client_{domain_id}")
            meta_after, head_after = download_latest(server_url, REGION_TAG)
            models[f"il{k}"] = head_after
            _save_bundle(p, f"il{k}", head_after)
            rounds.append({
                "round": k,
                "dataset_id": domain_id,
                "base_version": rep.base_version,
                "decision": rep.decision,
                "reason": rep.reason,
                "new_version": rep.new_version,
                "reference_dice": rep.reference_dice,
                "candidate_dice": rep.candidate_dice,
                "current_dice": rep.current_dice,
                "local_dice_before": rep.local_dice_before,
                "local_dice_after": rep.local_dice_after,
                "iterations": rep.iterations,
                "head_version_after": meta_after["version"],
                "head_checksum_after": meta_after["checksum_hex"],
            })

        log = requests.get(f"{server_url}/v1/models/{REGION_TAG}/log",
                           timeout=30).json()["decisions"]
    finally:
        if httpd is not None:
            httpd.shutdown()
            httpd.server_close()

    report = evaluate_models(config, models)
    p.reports.mkdir(parents=True, exist_ok=True)
    (p.reports / "per_subject_il.csv").write_text(report.to_subject_csv())
    (p.reports / "il_rounds.json").write_text(
        json.dumps({"rounds": rounds, "server_log": log}, indent=2, sort_keys=True))

    return {"rounds": rounds}


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------
def _require_cells(report: MetricsReport, models, datasets):
    for m in models:
        for d in datasets:
            if not report.cell(m, d):
                raise MissingCellError(f"no per-subject rows for model {m!r} on {d!r}")


def _table_csv(config: ExperimentConfig, report: MetricsReport, models) -> str:
    """Aggregate table: one row per model x (domain ... General)."""
    datasets = list(config.domain_ids)
    _require_cells(report, models, datasets)
    lines = ["model_id,dataset_id,n,median_dice,iqr_dice"]
    for m in models:
        per_dataset = {}
        for d in datasets:
            rows = report.cell(m, d)
            med, iqr = median_iqr([r.dice for r in rows])
            lines.append(f"{m},{d},{len(rows)},{med!r},{iqr!r}")
            per_dataset[d] = [(r.subject_id, r.dice) for r in rows]
        chosen = general_sample(per_dataset, config.k_general)
        picked = []
        for d in datasets:
            by_id = dict(per_dataset[d])
            picked.extend(by_id[sid] for sid in chosen[d])
        med, iqr = median_iqr(picked)
        lines.append(f"{m},General,{len(picked)},{med!r},{iqr!r}")
    return "\n".join(lines) + "\n"


def cmd_report(config: ExperimentConfig) -> dict:
    """Emit the two aggregate tables and the volume-regression CSVs."""
    p = paths_for(config)
    ft_csv = p.reports / "per_subject_ft.csv"
    il_csv = p.reports / "per_subject_il.csv"
    for f in (ft_csv, il_csv):
        if not f.exists():
            raise MissingArtifactError(f"{f} not found; run both arms first")
    ft = MetricsReport.from_subject_csv(ft_csv.read_text())
    il = MetricsReport.from_subject_csv(il_csv.read_text())

    table2 = _table_csv(config, ft, FT_MODELS)
    combined = MetricsReport(ft.rows + il.rows)
    table3 = _table_csv(config, combined, ("model0",) + IL_MODELS)

    vol_lines = ["model_id,dataset_id,subject_id,pred_vol_mm3,gt_vol_mm3"]
    fit_lines = ["model_id,dataset_id,slope,intercept,residual_variance,n"]
    for model_id in ("ftall", "il4"):
        source = ft if model_id == "ftall" else il
        for d in config.domain_ids:
            rows = source.cell(model_id, d)
            if not rows:
                raise MissingCellError(f"no per-subject rows for model {model_id!r} on {d!r}")
            for r in rows:
                vol_lines.append(f"{model_id},{d},{r.subject_id},"
                                 f"{r.pred_vol_mm3!r},{r.gt_vol_mm3!r}")
            fit = ols_fit([r.pred_vol_mm3 for r in rows], [r.gt_vol_mm3 for r in rows])
            fit_lines.append(f"{model_id},{d},{fit.slope!r},{fit.intercept!r},"
                             f"{fit.residual_variance!r},{fit.n}")

    p.reports.mkdir(parents=True, exist_ok=True)
    outputs = {
        "table2.csv": table2,
        "table3.csv": table3,
        "fig4_volumes.csv": "\n".join(vol_lines) + "\n",
        "fig4_fits.csv": "\n".join(fit_lines) + "\n",
    }
    for name, text in outputs.items():
        (p.reports / name).write_text(text)
    return {"written": sorted(outputs)}


def cmd_eval(config: ExperimentConfig, bundle_path, dataset_id: str) -> str:
    """Evaluate one bundle file on one domain's test split; returns CSV text."""
    if dataset_id not in config.domain_ids:
        raise KeyError(f"unknown dataset {dataset_id!r}; have {config.domain_ids}")
    bundle = load_bundle(bundle_path)
    report = MetricsReport()
    cache = _EvalCache()
    for stem, vol, gt in load_split(config, dataset_id, "test"):
        pred = _cached_ensemble(bundle, stem, vol, cache)
        report.add(SubjectRow(bundle.version, dataset_id, stem,
                              dice(pred, gt), volume_mm3(pred), volume_mm3(gt)))
    return report.to_subject_csv()
