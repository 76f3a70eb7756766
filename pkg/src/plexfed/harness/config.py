"""Experiment configuration: five domains, cohort sizes, budgets, seeds.

The JSON schema mirrors the dataclasses below; any omitted field falls back
to the default experiment. Environment overrides are honored for paths and
the server address only (PLEXFED_OUT_DIR, PLEXFED_ADDR, PLEXFED_API_KEY).
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace

from ..federation.merge import MergePolicy
from ..segmenter import TRAIN_LR
from ..volume import DomainSpec

N_DOMAINS = 5


@dataclass(frozen=True)
class OutlierInjection:
    """An extra, deliberately corrupted subject appended to a domain's
    training candidates; the quality screen is expected to exclude it."""

    domain_id: str
    noise_sigma: float
    label: str = "inj0"


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "out"
    seed: int = 1234
    i0: int = 3000
    k_general: int = 10
    lr: float = TRAIN_LR
    augment_on: bool = True
    corruption_rate: float = 0.0
    qc_z_threshold: float = 3.5
    alpha: float = 0.5
    epsilon_gate: float = 0.02
    api_key: str = "dev-key"
    server_addr: str = "127.0.0.1:0"
    domains: tuple[DomainSpec, ...] = ()
    cohort: dict = field(default_factory=dict)   # domain_id -> {"train": n, "test": n}
    qc_outliers: tuple[OutlierInjection, ...] = ()

    def __post_init__(self):
        if len(self.domains) != N_DOMAINS:
            raise ValueError(f"exactly {N_DOMAINS} domains required, got {len(self.domains)}")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"domain ids must be unique, got {ids}")
        for d in self.domains:
            if d.domain_id not in self.cohort:
                raise ValueError(f"cohort counts missing for domain {d.domain_id!r}")

    # Iteration budgets preserve the 1 : 1/3 : 2/15 ratio of the three regimes.
    @property
    def i_ft(self) -> int:
        return self.i0 // 3

    @property
    def il_iteration_cap(self) -> int:
        return self.i0 * 4 // 30

    @property
    def domain_ids(self) -> tuple[str, ...]:
        return tuple(d.domain_id for d in self.domains)

    @property
    def initial_domain(self) -> DomainSpec:
        return self.domains[0]

    @property
    def reference_domain(self) -> DomainSpec:
        """The second domain doubles as the server's private reference domain."""
        return self.domains[1]

    def merge_policy(self) -> MergePolicy:
        return MergePolicy(alpha=self.alpha, epsilon_gate=self.epsilon_gate)

    def domain(self, domain_id: str) -> DomainSpec:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(domain_id)

    def counts(self, domain_id: str) -> tuple[int, int]:
        c = self.cohort[domain_id]
        return int(c["train"]), int(c["test"])

    def to_json(self) -> str:
        raw = asdict(self)
        raw["domains"] = [asdict(d) for d in self.domains]
        raw["qc_outliers"] = [asdict(o) for o in self.qc_outliers]
        return json.dumps(raw, indent=2, sort_keys=True)


def default_domains() -> tuple[DomainSpec, ...]:
    """The five-domain default: one clean training domain, two noise-compressed
    domains with strong intensity-transfer shifts, and two milder shifts."""
    blob = (80, 160)
    return (
        DomainSpec("D0", gamma=1.0, bias_amplitude=0.09, noise_sigma=0.028,
                   blur_fwhm_mm=0.55, plexus_contrast=0.55,
                   plexus_voxels_range=blob, spacing_mm=(1.0, 1.0, 1.0)),
        DomainSpec("D1", gamma=0.8, bias_amplitude=0.12, noise_sigma=0.10,
                   blur_fwhm_mm=0.65, plexus_contrast=0.55,
                   plexus_voxels_range=blob, spacing_mm=(0.8, 0.8, 1.2)),
        DomainSpec("D2", gamma=1.5, bias_amplitude=0.15, noise_sigma=0.14,
                   blur_fwhm_mm=0.8, plexus_contrast=0.50,
                   plexus_voxels_range=blob, spacing_mm=(0.8, 0.8, 0.8)),
        DomainSpec("D3", gamma=0.85, bias_amplitude=0.10, noise_sigma=0.035,
                   blur_fwhm_mm=0.6, plexus_contrast=0.52,
                   plexus_voxels_range=blob, spacing_mm=(1.0, 1.0, 1.0)),
        DomainSpec("D4", gamma=1.4, bias_amplitude=0.12, noise_sigma=0.07,
                   blur_fwhm_mm=0.6, plexus_contrast=0.48,
                   plexus_voxels_range=blob, spacing_mm=(0.7, 0.7, 0.7)),
    )


def default_cohort() -> dict:
    return {
        "D0": {"train": 20, "test": 10},
        "D1": {"train": 10, "test": 9},
        "D2": {"train": 10, "test": 30},
        "D3": {"train": 10, "test": 30},
        "D4": {"train": 10, "test": 30},
    }


def default_config(out_dir: str = "out", seed: int = 1234) -> ExperimentConfig:
    return ExperimentConfig(out_dir=out_dir, seed=seed,
                            domains=default_domains(), cohort=default_cohort())


def _domain_from_dict(raw: dict) -> DomainSpec:
    return DomainSpec(
        domain_id=raw["domain_id"],
        gamma=float(raw["gamma"]),
        bias_amplitude=float(raw["bias_amplitude"]),
        noise_sigma=float(raw["noise_sigma"]),
        blur_fwhm_mm=float(raw["blur_fwhm_mm"]),
        plexus_contrast=float(raw["plexus_contrast"]),
        plexus_voxels_range=tuple(raw["plexus_voxels_range"]),
        dims=tuple(raw.get("dims", (32, 32, 32))),
        spacing_mm=tuple(raw.get("spacing_mm", (1.0, 1.0, 1.0))),
    )


def load_config(path) -> ExperimentConfig:
    """Read a config JSON; missing fields take the default experiment values."""
    with open(path) as f:
        raw = json.load(f)
    base = default_config()
    domains = (tuple(_domain_from_dict(d) for d in raw["domains"])
               if "domains" in raw else base.domains)
    outliers = tuple(OutlierInjection(o["domain_id"], float(o["noise_sigma"]),
                                      o.get("label", f"inj{i}"))
                     for i, o in enumerate(raw.get("qc_outliers", [])))
    cfg = ExperimentConfig(
        out_dir=raw.get("out_dir", base.out_dir),
        seed=int(raw.get("seed", base.seed)),
        i0=int(raw.get("i0", base.i0)),
        k_general=int(raw.get("k_general", base.k_general)),
        lr=float(raw.get("lr", base.lr)),
        augment_on=bool(raw.get("augment_on", base.augment_on)),
        corruption_rate=float(raw.get("corruption_rate", base.corruption_rate)),
        qc_z_threshold=float(raw.get("qc_z_threshold", base.qc_z_threshold)),
        alpha=float(raw.get("alpha", base.alpha)),
        epsilon_gate=float(raw.get("epsilon_gate", base.epsilon_gate)),
        api_key=raw.get("api_key", base.api_key),
        server_addr=raw.get("server_addr", base.server_addr),
        domains=domains,
        cohort=raw.get("cohort", default_cohort()),
        qc_outliers=outliers,
    )
    return apply_env_overrides(cfg)


def apply_env_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    if os.environ.get("PLEXFED_OUT_DIR"):
        cfg = replace(cfg, out_dir=os.environ["PLEXFED_OUT_DIR"])
    if os.environ.get("PLEXFED_ADDR"):
        cfg = replace(cfg, server_addr=os.environ["PLEXFED_ADDR"])
    if os.environ.get("PLEXFED_API_KEY"):
        cfg = replace(cfg, api_key=os.environ["PLEXFED_API_KEY"])
    return cfg
