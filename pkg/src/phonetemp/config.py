"""Experiment configuration: nested dataclasses with a JSON file loader,
deterministic per-stage seed derivation, and a config checksum embedded in
every emitted table."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass(frozen=True)
class SynthCorpusConfig:
    n_contributors: int = 6
    n_participants: int = 3
    ambient_low: float = 12.0
    ambient_high: float = 35.0
    grid_step: float = 0.5
    tick_seconds: float = 5.0
    session_seconds_min: float = 240.0
    session_seconds_max: float = 420.0
    sessions_per_phone: int = 47  # full grid coverage at the default step
    tau_min: float = 120.0
    tau_max: float = 600.0
    bias_min: float = -1.5
    bias_max: float = 1.5
    noise_min: float = 0.05
    noise_max: float = 0.3
    screen_heat_min: float = 0.5
    screen_heat_max: float = 3.0
    volt_coeff_min: float = 0.5
    volt_coeff_max: float = 2.0
    start_offset_min: float = 0.0
    start_offset_max: float = 4.0


@dataclass(frozen=True)
class EstimatorStageConfig:
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 20
    holdout_fraction: float = 0.2
    max_epochs: int = 600


@dataclass(frozen=True)
class CbtsStageConfig:
    lr: float = 1e-3
    patience: int = 20
    batch_groups: int = 64
    max_epochs: int = 400
    n_train_groups: int = 6000
    n_val_groups: int = 1500
    n_test_groups: int = 6000
    ds_bins: int = 20


@dataclass(frozen=True)
class FewshotStageConfig:
    alpha: float = 0.001
    beta: float = 0.01
    n_batch: int = 200
    s1: int = 5
    s2: int = 20
    meta_optimizer: str = "adam"
    k_spt: int = 5
    k_qry: int = 15
    max_epochs: int = 300
    patience: int = 20
    n_train_tasks: int = 4000
    n_val_tasks: int = 600
    repetitions: int = 100


@dataclass(frozen=True)
class FedStageConfig:
    n_clients: int = 3
    rounds: int = 3
    key_bits: int = 1024
    q: int = 40
    n_tasks_per_client: int = 8
    meta_optimizer: str = "sgd"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "out"
    train_fraction: float = 0.7
    csv_dir: str | None = None  # load an existing corpus instead of synthesizing
    contributors: tuple[str, ...] = ()  # role assignment for csv corpora
    participants: tuple[str, ...] = ()
    corpus: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    estimator: EstimatorStageConfig = field(default_factory=EstimatorStageConfig)
    cbts: CbtsStageConfig = field(default_factory=CbtsStageConfig)
    fewshot: FewshotStageConfig = field(default_factory=FewshotStageConfig)
    fed: FedStageConfig = field(default_factory=FedStageConfig)


_NESTED = {
    "corpus": SynthCorpusConfig,
    "estimator": EstimatorStageConfig,
    "cbts": CbtsStageConfig,
    "fewshot": FewshotStageConfig,
    "fed": FedStageConfig,
}


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            value = _build(_NESTED[key], value)
        elif key in ("contributors", "participants"):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Config file (JSON) plus flag overrides; both optional."""
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return _build(ExperimentConfig, data)


def config_checksum(config: ExperimentConfig) -> str:
    canonical = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def stage_seed(config: ExperimentConfig, stage: str) -> int:
    """Stable per-stage sub-seed derived from the global seed."""
    digest = hashlib.sha256(f"{config.seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")
