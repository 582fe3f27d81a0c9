"""Pipeline stages behind the CLI: corpus synthesis, estimator training, CBTS
training, the truth-inference benchmark, inferred-label generation, the
few-shot comparison, the federated rounds, and the combined report.

Every stage is a pure function of (config, corpus files, derived seeds):
splits and normalizer stats are re-derived deterministically wherever they
are needed, so stages only couple through files under the output directory.
All tables embed the config checksum and the seeds they consumed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn, paillier
from .config import ExperimentConfig, config_checksum, stage_seed
from .crowdsim import (
    build_group_set,
    answer_groups_for,
    infer_labels_for_participant,
    label_quality,
)
from .data import (
    NormStats,
    PhoneDataset,
    SynthPhoneParams,
    fit_normalizer,
    load_csv,
    save_csv,
    split,
    synth_generate,
)
from .estimator import (
    EstimatorModel,
    TrainConfig,
    evaluate_mae,
    load_model,
    save_model,
    train,
    uncertainty_bias_correlation,
)
from .fedagg import ClientState, client_tasks, federated_round, params_to_bytes
from .meta import (
    MetaConfig,
    build_task_set,
    direct_train_baseline,
    maml_adapt,
    maml_train,
    meta_batch_gradient,
    pretrain_baseline,
    query_mae,
)
from .svgplot import write_line_chart
from .truthinf import (
    AggregatorModel,
    CbtsTrainConfig,
    cbts_train,
    compute_wa_weights,
    ds_infer,
    fold_batch,
    load_aggregator,
    mean_infer,
    mv_infer,
    pm_infer,
    save_aggregator,
    weighted_average,
    zc_infer,
    _group_set_nll,
    _group_arrays,
)

STAGES = (
    "synth",
    "train-estimators",
    "train-cbts",
    "truthinf-bench",
    "gen-labels",
    "fewshot",
    "fed",
    "report",
)

BENCH_METHODS = ("cbts", "ds", "pm", "zc", "mv2", "mv3", "mean", "wa")


class StageError(RuntimeError):
    """A stage cannot run; the message names the stage and the remedy."""


@dataclass
class Report:
    """What one stage produced: table paths, scalar metrics, provenance."""

    stage: str
    tables: dict[str, Path] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)
    checksum: str = ""
    seeds: dict[str, int] = field(default_factory=dict)


def _fmt(value) -> str:
    return format(float(value), ".6f")


def _out(config: ExperimentConfig) -> Path:
    return Path(config.out_dir)


def write_table(path: Path, header, rows, config: ExperimentConfig, seeds: dict) -> None:
    """CSV with the config checksum and stage seeds embedded as comments."""
    lines = [
        f"# config_checksum={config_checksum(config)}",
        f"# seeds={json.dumps(seeds, sort_keys=True)}",
        ",".join(header),
    ]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _update_run_meta(config: ExperimentConfig, stage: str, seeds: dict, outputs) -> None:
    path = _out(config) / "run_meta.json"
    meta = json.loads(path.read_text()) if path.exists() else {}
    meta["config_checksum"] = config_checksum(config)
    meta.setdefault("stages", {})[stage] = {
        "seeds": seeds,
        "outputs": sorted(str(p) for p in outputs),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _require(path: Path, stage: str, produced_by: str) -> Path:
    if not path.exists():
        raise StageError(
            f"stage {stage}: missing {path}; run the {produced_by} stage first"
        )
    return path


# --- corpus access ----------------------------------------------------------


def _phone_params(rng: np.random.Generator, c) -> SynthPhoneParams:
    return SynthPhoneParams(
        thermal_time_constant=float(rng.uniform(c.tau_min, c.tau_max)),
        screen_heat=float(rng.uniform(c.screen_heat_min, c.screen_heat_max)),
        voltage_heat_coeff=float(rng.uniform(c.volt_coeff_min, c.volt_coeff_max)),
        sensor_bias=float(rng.uniform(c.bias_min, c.bias_max)),
        sensor_noise_std=float(rng.uniform(c.noise_min, c.noise_max)),
    )


def load_corpus(config: ExperimentConfig) -> tuple[list[PhoneDataset], list[PhoneDataset]]:
    """(contributors, participants) from the synth output or a csv_dir."""
    if config.csv_dir is not None:
        base = Path(config.csv_dir)
        roles = {pid: "contributor" for pid in config.contributors}
        roles.update({pid: "participant" for pid in config.participants})
    else:
        base = _out(config) / "corpus"
        roles_path = _require(base / "roles.json", "load-corpus", "synth")
        roles = json.loads(roles_path.read_text())
    datasets = []
    for path in sorted(base.glob("*.csv")):
        for ds in load_csv(path):
            if ds.phone_id not in roles:
                raise StageError(f"phone {ds.phone_id!r} has no role assignment")
            ds.role = roles[ds.phone_id]
            datasets.append(ds)
    if not datasets:
        raise StageError(f"no corpus files under {base}; run the synth stage first")
    contributors = [d for d in datasets if d.role == "contributor"]
    participants = [d for d in datasets if d.role == "participant"]
    return contributors, participants


def split_phone(config: ExperimentConfig, dataset: PhoneDataset):
    return split(dataset, config.train_fraction, stage_seed(config, f"split:{dataset.phone_id}"))


def contributor_splits(config: ExperimentConfig, contributors):
    trains, vals = {}, {}
    for ds in contributors:
        trains[ds.phone_id], vals[ds.phone_id] = split_phone(config, ds)
    return trains, vals


def shared_norm(config: ExperimentConfig, contributor_trains) -> NormStats:
    return fit_normalizer(list(contributor_trains.values()))


def _load_estimators(config: ExperimentConfig, stage: str, phone_ids) -> dict[str, EstimatorModel]:
    registry = {}
    for pid in phone_ids:
        path = _require(
            _out(config) / "models" / f"estimator_{pid}.json", stage, "train-estimators"
        )
        registry[pid] = load_model(path)
    return registry


def _load_cbts(config: ExperimentConfig, stage: str) -> AggregatorModel:
    return load_aggregator(_require(_out(config) / "models" / "cbts.json", stage, "train-cbts"))


# --- stages -----------------------------------------------------------------


def stage_synth(config: ExperimentConfig) -> Report:
    """Generate the per-phone corpus files plus the role map."""
    c = config.corpus
    seed = stage_seed(config, "synth")
    rng = np.random.default_rng(seed)
    base = _out(config) / "corpus"
    base.mkdir(parents=True, exist_ok=True)
    names = [f"C{i + 1}" for i in range(c.n_contributors)] + [
        f"P{i + 1}" for i in range(c.n_participants)
    ]
    roles = {}
    rows = []
    for pid in names:
        role = "contributor" if pid.startswith("C") else "participant"
        params = _phone_params(rng, c)
        session_length = float(rng.uniform(c.session_seconds_min, c.session_seconds_max))
        phone_seed = int(rng.integers(2**31))
        ds = synth_generate(
            params,
            c.sessions_per_phone,
            session_length,
            c.tick_seconds,
            (c.ambient_low, c.ambient_high),
            phone_seed,
            grid_step=c.grid_step,
            start_offset_range=(c.start_offset_min, c.start_offset_max),
            phone_id=pid,
            role=role,
        )
        save_csv(base / f"{pid}.csv", ds)
        roles[pid] = role
        rows.append((pid, role, len(ds)))
    (base / "roles.json").write_text(json.dumps(roles, indent=1, sort_keys=True) + "\n")

    table = _out(config) / "tables" / "corpus_summary.csv"
    seeds = {"synth": seed}
    write_table(table, ("phone", "role", "samples"), rows, config, seeds)
    _update_run_meta(config, "synth", seeds, [base, table])
    return Report(
        "synth",
        tables={"corpus_summary": table},
        scalars={"phones": len(names), "samples": float(sum(r[2] for r in rows))},
        checksum=config_checksum(config),
        seeds=seeds,
    )


def stage_train_estimators(config: ExperimentConfig) -> Report:
    """Train one estimator per contributor; report MAEs and sigma usefulness."""
    contributors, _ = load_corpus(config)
    trains, vals = contributor_splits(config, contributors)
    norm = shared_norm(config, trains)
    models_dir = _out(config) / "models"
    seeds = {}
    rows = []
    for ds in contributors:
        pid = ds.phone_id
        seed = stage_seed(config, f"estimator:{pid}")
        seeds[pid] = seed
        cfg = TrainConfig(
            lr=config.estimator.lr,
            batch_size=config.estimator.batch_size,
            patience=config.estimator.patience,
            holdout_fraction=config.estimator.holdout_fraction,
            max_epochs=config.estimator.max_epochs,
            seed=seed,
        )
        model = train(trains[pid], cfg, norm=norm)
        save_model(model, models_dir / f"estimator_{pid}.json")
        rho, flagged = uncertainty_bias_correlation(model, vals[pid])
        rows.append(
            (
                pid,
                _fmt(evaluate_mae(model, trains[pid])),
                _fmt(evaluate_mae(model, vals[pid])),
                _fmt(rho),
                int(flagged),
            )
        )
    table = _out(config) / "tables" / "estimators.csv"
    write_table(
        table,
        ("phone", "train_mae", "val_mae", "uncertainty_correlation", "degenerate"),
        rows,
        config,
        seeds,
    )
    _update_run_meta(config, "train-estimators", seeds, [models_dir, table])
    return Report(
        "train-estimators",
        tables={"estimators": table},
        scalars={"mean_val_mae": float(np.mean([float(r[2]) for r in rows]))},
        checksum=config_checksum(config),
        seeds=seeds,
    )


def stage_train_cbts(config: ExperimentConfig) -> Report:
    """Train the fold aggregator on crowd groups built from contributor data."""
    contributors, _ = load_corpus(config)
    trains, vals = contributor_splits(config, contributors)
    norm = shared_norm(config, trains)
    registry = _load_estimators(config, "train-cbts", [d.phone_id for d in contributors])

    seeds = {
        "groups_train": stage_seed(config, "groups:train"),
        "groups_val": stage_seed(config, "groups:val"),
        "cbts": stage_seed(config, "cbts"),
    }
    train_groups = build_group_set(
        list(trains.values()), config.cbts.n_train_groups, seeds["groups_train"]
    )
    val_groups = build_group_set(
        list(vals.values()), config.cbts.n_val_groups, seeds["groups_val"]
    )
    ag_train = answer_groups_for(train_groups, registry)
    ag_val = answer_groups_for(val_groups, registry)
    model = cbts_train(
        ag_train,
        ag_val,
        CbtsTrainConfig(
            lr=config.cbts.lr,
            patience=config.cbts.patience,
            batch_groups=config.cbts.batch_groups,
            max_epochs=config.cbts.max_epochs,
            seed=seeds["cbts"],
        ),
    )
    save_aggregator(model, _out(config) / "models" / "cbts.json")

    val_nll = _group_set_nll(model.params, _group_arrays(ag_val))
    truth = np.array([g.true_label for g in ag_val])
    val_mae = float(np.mean(np.abs(fold_batch(model, ag_val) - truth)))
    table = _out(config) / "tables" / "cbts_training.csv"
    rows = [
        (len(ag_train), len(ag_val), _fmt(val_nll), _fmt(val_mae)),
    ]
    write_table(
        table, ("train_groups", "val_groups", "val_nll", "val_mae"), rows, config, seeds
    )
    _update_run_meta(config, "train-cbts", seeds, [table])
    return Report(
        "train-cbts",
        tables={"cbts_training": table},
        scalars={"val_nll": val_nll, "val_mae": val_mae},
        checksum=config_checksum(config),
        seeds=seeds,
    )


def stage_truthinf_bench(config: ExperimentConfig) -> Report:
    """Benchmark CBTS against the classical baselines on fresh test groups."""
    contributors, _ = load_corpus(config)
    trains, vals = contributor_splits(config, contributors)
    registry = _load_estimators(config, "truthinf-bench", [d.phone_id for d in contributors])
    cbts = _load_cbts(config, "truthinf-bench")

    seeds = {"groups_test": stage_seed(config, "groups:test")}
    test_groups = build_group_set(
        list(vals.values()), config.cbts.n_test_groups, seeds["groups_test"]
    )
    groups = answer_groups_for(test_groups, registry)
    truth = np.array([g.true_label for g in groups])
    sizes = np.array([len(g) for g in groups])

    train_maes = {pid: evaluate_mae(registry[pid], trains[pid]) for pid in trains}
    wa_weights = compute_wa_weights(train_maes)

    estimates = {
        "cbts": fold_batch(cbts, groups),
        "ds": ds_infer(groups, config.cbts.ds_bins),
        "pm": pm_infer(groups),
        "zc": zc_infer(groups),
        "mv2": np.array([mv_infer(g.answers, 2) for g in groups]),
        "mv3": np.array([mv_infer(g.answers, 3) for g in groups]),
        "mean": np.array([mean_infer(g.answers) for g in groups]),
        "wa": np.array(
            [weighted_average(g.answers, g.phone_ids, wa_weights) for g in groups]
        ),
    }

    rows = []
    for label, mask in [(str(k), sizes == k) for k in range(2, 7)] + [("all", sizes > 0)]:
        if not np.any(mask):
            continue
        row = [label, int(mask.sum())]
        for method in BENCH_METHODS:
            row.append(_fmt(np.mean(np.abs(estimates[method][mask] - truth[mask]))))
        rows.append(tuple(row))
    table = _out(config) / "tables" / "truthinf_bench.csv"
    write_table(table, ("group_size", "groups") + BENCH_METHODS, rows, config, seeds)
    _update_run_meta(config, "truthinf-bench", seeds, [table])

    all_row = rows[-1]
    scalars = {m: float(all_row[2 + i]) for i, m in enumerate(BENCH_METHODS)}
    return Report(
        "truthinf-bench",
        tables={"truthinf_bench": table},
        scalars=scalars,
        checksum=config_checksum(config),
        seeds=seeds,
    )


def stage_gen_labels(config: ExperimentConfig) -> Report:
    """Crowd-label each participant's training split with the CBTS model."""
    contributors, participants = load_corpus(config)
    if not participants:
        raise StageError("stage gen-labels: the corpus has no participants")
    trains, _ = contributor_splits(config, contributors)
    registry = _load_estimators(config, "gen-labels", [d.phone_id for d in contributors])
    cbts = _load_cbts(config, "gen-labels")

    labels_dir = _out(config) / "labels"
    seeds = {}
    rows = []
    cbts_ref = None
    for ds in participants:
        pid = ds.phone_id
        seed = stage_seed(config, f"labels:{pid}")
        seeds[pid] = seed
        p_train, _ = split_phone(config, ds)
        labeled, skipped = infer_labels_for_participant(
            p_train, contributors, registry, cbts, seed
        )
        # sample_index refers to the participant's training-split ordering
        index_of = {id(s): i for i, s in enumerate(p_train.samples)}
        out_rows = [
            (
                index_of[id(lb.sample)],
                repr(lb.sample.label),
                repr(lb.inferred_label),
                repr(lb.inferred_sigma),
                lb.contributor_count,
            )
            for lb in labeled
        ]
        path = labels_dir / f"{pid}_inferred.csv"
        write_table(
            path,
            ("sample_index", "true_label", "inferred_label", "inferred_sigma", "k"),
            out_rows,
            config,
            {pid: seed},
        )
        mae = label_quality(labeled, [lb.sample.label for lb in labeled])
        rows.append((pid, len(labeled), skipped, _fmt(mae)))
    table = _out(config) / "tables" / "label_quality.csv"
    write_table(table, ("participant", "labeled", "skipped", "mae"), rows, config, seeds)
    _update_run_meta(config, "gen-labels", seeds, [labels_dir, table])
    return Report(
        "gen-labels",
        tables={"label_quality": table},
        scalars={"mean_mae": float(np.mean([float(r[3]) for r in rows]))},
        checksum=config_checksum(config),
        seeds=seeds,
    )


def _meta_config(config: ExperimentConfig, seed: int, meta_optimizer=None) -> MetaConfig:
    f = config.fewshot
    return MetaConfig(
        alpha=f.alpha,
        beta=f.beta,
        n_batch=f.n_batch,
        s1=f.s1,
        s2=f.s2,
        meta_optimizer=meta_optimizer or f.meta_optimizer,
        k_spt=f.k_spt,
        k_qry=f.k_qry,
        seed=seed,
        max_epochs=f.max_epochs,
        patience=f.patience,
    )


def _load_inferred_labels(config: ExperimentConfig, pid: str) -> dict[int, float]:
    path = _require(
        _out(config) / "labels" / f"{pid}_inferred.csv", "fewshot", "gen-labels"
    )
    labels = {}
    for line in path.read_text().splitlines():
        if line.startswith("#") or line.startswith("sample_index"):
            continue
        idx, _, inferred, _, _ = line.split(",")
        labels[int(idx)] = float(inferred)
    return labels


CURVE_STEPS = (0, 1, 2, 5, 10, 20)


def stage_fewshot(config: ExperimentConfig) -> Report:
    """Compare DT / PT / MAML five-shot adaptation with true and inferred labels."""
    contributors, participants = load_corpus(config)
    if not participants:
        raise StageError("stage fewshot: the corpus has no participants")
    trains, vals = contributor_splits(config, contributors)
    norm = shared_norm(config, trains)
    f = config.fewshot

    seeds = {
        "meta": stage_seed(config, "meta"),
        "tasks_train": stage_seed(config, "tasks:train"),
        "tasks_val": stage_seed(config, "tasks:val"),
        "pretrain": stage_seed(config, "pretrain"),
    }
    meta_cfg = _meta_config(config, seeds["meta"])
    train_tasks = build_task_set(
        list(trains.values()), f.k_spt, f.k_qry, f.n_train_tasks, seeds["tasks_train"]
    )
    val_tasks = build_task_set(
        list(vals.values()), f.k_spt, f.k_qry, f.n_val_tasks, seeds["tasks_val"]
    )
    theta0 = nn.init_params(nn.estimator_network(), seeds["meta"])
    theta = maml_train(train_tasks, theta0, meta_cfg, norm, val_tasks=val_tasks)
    models_dir = _out(config) / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    (models_dir / "meta_theta.bin").write_bytes(params_to_bytes(theta))

    pt_cfg = TrainConfig(
        lr=config.estimator.lr,
        batch_size=config.estimator.batch_size,
        patience=config.estimator.patience,
        holdout_fraction=config.estimator.holdout_fraction,
        max_epochs=config.estimator.max_epochs,
        seed=seeds["pretrain"],
    )
    pt_theta = pretrain_baseline(list(trains.values()), pt_cfg, norm)
    (models_dir / "pretrain_theta.bin").write_bytes(params_to_bytes(pt_theta))

    strategies = ("DT", "PT", "MAML")
    rows = []
    curve_acc: dict[str, dict[str, list]] = {}
    per_participant: dict[str, dict[tuple[str, str], float]] = {}
    for ds in participants:
        pid = ds.phone_id
        rep_seed = stage_seed(config, f"fewshot:{pid}")
        seeds[pid] = rep_seed
        p_train, p_val = split_phone(config, ds)
        inferred = _load_inferred_labels(config, pid)
        candidate_rows = sorted(inferred)
        if len(candidate_rows) < f.k_spt:
            raise StageError(f"stage fewshot: too few inferred labels for {pid}")
        rng = np.random.default_rng(rep_seed)
        maes: dict[tuple[str, str], list[float]] = {
            (s, lab): [] for s in strategies for lab in ("TL", "IL")
        }
        curves = {s: np.zeros(len(CURVE_STEPS)) for s in strategies}
        for rep in range(f.repetitions):
            picked = rng.choice(len(candidate_rows), size=f.k_spt, replace=False)
            idx = [candidate_rows[i] for i in picked]
            support_tl = [p_train.samples[i] for i in idx]
            support_il = [
                replace(p_train.samples[i], label=inferred[i]) for i in idx
            ]
            starts = {
                "DT": nn.init_params(nn.estimator_network(), rep_seed + rep),
                "PT": pt_theta,
                "MAML": theta,
            }
            for label_kind, support in (("TL", support_tl), ("IL", support_il)):
                for strat in strategies:
                    adapted = maml_adapt(starts[strat], support, f.alpha, f.s2, norm)
                    maes[(strat, label_kind)].append(query_mae(adapted, p_val.samples, norm))
            for strat in strategies:
                current = starts[strat]
                done = 0
                for ci, step in enumerate(CURVE_STEPS):
                    current = maml_adapt(current, support_tl, f.alpha, step - done, norm)
                    done = step
                    curves[strat][ci] += query_mae(current, p_val.samples, norm)
        per_participant[pid] = {key: float(np.mean(v)) for key, v in maes.items()}
        for strat in strategies:
            for lab in ("TL", "IL"):
                rows.append(
                    (
                        pid,
                        strat,
                        lab,
                        _fmt(per_participant[pid][(strat, lab)]),
                        _fmt(np.std(maes[(strat, lab)])),
                    )
                )
        curve_acc[pid] = {
            s: list(zip(CURVE_STEPS, curves[s] / f.repetitions)) for s in strategies
        }

    for strat in strategies:
        for lab in ("TL", "IL"):
            overall = float(
                np.mean([per_participant[p][(strat, lab)] for p in per_participant])
            )
            rows.append(("all", strat, lab, _fmt(overall), ""))

    table = _out(config) / "tables" / "fewshot.csv"
    write_table(
        table,
        ("participant", "strategy", "label_source", "mean_mae", "std_mae"),
        rows,
        config,
        seeds,
    )
    plots = []
    for pid, series in curve_acc.items():
        plot_path = _out(config) / "plots" / f"fewshot_{pid}.svg"
        write_line_chart(
            plot_path,
            series,
            f"{pid}: five-shot adaptation",
            "fine-tune steps",
            "validation MAE (degC)",
        )
        plots.append(plot_path)
    _update_run_meta(config, "fewshot", seeds, [table, *plots])

    scalars = {}
    for strat in strategies:
        scalars[f"{strat}_TL"] = float(
            np.mean([per_participant[p][(strat, "TL")] for p in per_participant])
        )
        scalars[f"{strat}_IL"] = float(
            np.mean([per_participant[p][(strat, "IL")] for p in per_participant])
        )
    return Report(
        "fewshot",
        tables={"fewshot": table},
        scalars=scalars,
        checksum=config_checksum(config),
        seeds=seeds,
    )


def stage_fed(config: ExperimentConfig) -> Report:
    """Run encrypted federated rounds and check them against the plaintext
    centralized update."""
    contributors, _ = load_corpus(config)
    trains, _ = contributor_splits(config, contributors)
    norm = shared_norm(config, trains)
    fcfg = config.fed
    seeds = {
        "keys": stage_seed(config, "fed:keys"),
        "theta": stage_seed(config, "fed:theta"),
    }
    chosen = list(trains.values())[: fcfg.n_clients]
    if not chosen:
        raise StageError("stage fed: no contributor data for clients")
    clients = []
    for i, ds in enumerate(chosen):
        seed = stage_seed(config, f"fed:client:{ds.phone_id}")
        seeds[f"client_{ds.phone_id}"] = seed
        clients.append(
            ClientState(
                client_id=i,
                dataset=ds,
                n_tasks=fcfg.n_tasks_per_client,
                config=_meta_config(config, seed, meta_optimizer=fcfg.meta_optimizer),
                norm=norm,
                seed=seed,
            )
        )

    keypair = paillier.keygen(fcfg.key_bits, seeds["keys"])
    theta = nn.init_params(nn.estimator_network(), seeds["theta"])
    if fcfg.meta_optimizer == "adam":
        enc_state = nn.make_adam(config.fewshot.beta, theta.layout)
        ora_state = nn.make_adam(config.fewshot.beta, theta.layout)
    else:
        enc_state = nn.make_sgd(config.fewshot.beta)
        ora_state = nn.make_sgd(config.fewshot.beta)

    fed_dir = _out(config) / "fed"
    fed_dir.mkdir(parents=True, exist_ok=True)
    transcript = fed_dir / "transcript.jsonl"
    if transcript.exists():
        transcript.unlink()

    oracle = theta
    rows = []
    for round_index in range(1, fcfg.rounds + 1):
        theta, enc_state = federated_round(
            theta, clients, enc_state, keypair, fcfg.q, round_index, transcript
        )
        union = []
        for client in clients:
            union.extend(client_tasks(client, round_index))
        grad = meta_batch_gradient(oracle, union, clients[0].config, norm)
        oracle, ora_state = nn.optimizer_step(ora_state, oracle, grad)
        diff = float(np.max(np.abs(theta.values - oracle.values)))
        rows.append((round_index, len(clients), f"{diff:.3e}"))

    table = _out(config) / "tables" / "fed_rounds.csv"
    write_table(
        table, ("round", "clients", "max_abs_param_diff"), rows, config, seeds
    )
    _update_run_meta(config, "fed", seeds, [table, transcript])
    return Report(
        "fed",
        tables={"fed_rounds": table},
        scalars={
            "rounds": float(fcfg.rounds),
            "decrypt_count": float(keypair.private.decrypt_count),
            "max_round_diff": float(max(float(r[2]) for r in rows)),
        },
        checksum=config_checksum(config),
        seeds=seeds,
    )


def stage_report(config: ExperimentConfig) -> Report:
    """Bundle every stage table into one markdown report; idempotent."""
    out = _out(config)
    meta_path = _require(out / "run_meta.json", "report", "synth")
    meta = json.loads(meta_path.read_text())
    expected = {
        "corpus_summary": out / "tables" / "corpus_summary.csv",
        "estimators": out / "tables" / "estimators.csv",
        "cbts_training": out / "tables" / "cbts_training.csv",
        "truthinf_bench": out / "tables" / "truthinf_bench.csv",
        "label_quality": out / "tables" / "label_quality.csv",
        "fewshot": out / "tables" / "fewshot.csv",
        "fed_rounds": out / "tables" / "fed_rounds.csv",
    }
    missing = [str(p) for p in expected.values() if not p.exists()]
    if missing:
        raise StageError(f"stage report: missing stage outputs: {missing}")

    lines = [
        "# Experiment report",
        "",
        f"- config checksum: `{meta.get('config_checksum', '')}`",
        f"- stages recorded: {', '.join(sorted(meta.get('stages', {})))}",
        "",
    ]
    for name, path in expected.items():
        lines.append(f"## {name}")
        lines.append("")
        lines.append("```")
        lines.append(path.read_text().rstrip())
        lines.append("```")
        lines.append("")
    report_path = out / "report.md"
    report_path.write_text("\n".join(lines))
    _update_run_meta(config, "report", {}, [report_path])
    return Report(
        "report",
        tables={"report": report_path},
        checksum=config_checksum(config),
        seeds={},
    )


def run_stage(name: str, config: ExperimentConfig) -> Report:
    runners = {
        "synth": stage_synth,
        "train-estimators": stage_train_estimators,
        "train-cbts": stage_train_cbts,
        "truthinf-bench": stage_truthinf_bench,
        "gen-labels": stage_gen_labels,
        "fewshot": stage_fewshot,
        "fed": stage_fed,
        "report": stage_report,
    }
    if name not in runners:
        raise StageError(f"unknown stage {name!r}; expected one of {STAGES}")
    return runners[name](config)
