"""End-to-end experiment orchestration shared by the CLI and sweeps.

Every run is a pure function of (config, input artifacts): no timestamps,
fixed float formatting, and CSVs with a header row and trailing newline,
so reruns produce byte-identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import multiprocessing
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import defense, metrics
from .config import (
    ROLE_CORPUS,
    ROLE_INIT,
    ROLE_POISON_UNLEARN,
    ROLE_SPLIT,
    ROLE_SUBSET,
    ExperimentConfig,
    derive_seed,
    run_id,
)
from .data import (
    LabeledSet,
    clean_subset,
    gen_synthetic,
    load_dataset,
    poison_dataset,
    poisoned_probe,
    save_dataset,
    train_test_split,
)
from .errors import ConfigError, MissingArtifactError
from .metrics import DefenseReport
from .nn import Network, load_checkpoint, save_checkpoint
from .training import init_network, train

REPORT_HEADER = ["run_id", "attack", "acc_before", "asr_before", "acc_after", "asr_after", "der"]
SWEEP_AXES = ("n_ratio", "m_ratio", "poisoning_ratio", "clean_fraction", "ft_lr")
COVERAGE_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 11))

ATTACK_FILES = ("dataset.tsds", "test.tsds", "backdoored.tsbd", "clean.tsbd")


def fmt(value) -> str:
    """Deterministic CSV field formatting."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config_raw: bytes, seed: int, files) -> None:
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config_raw).hexdigest(),
        "seed": seed,
        "artifacts": {name: file_sha256(out_dir / name) for name in sorted(files)},
    }
    path = out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class AttackArtifacts:
    train_set: LabeledSet       # poisoned training split
    test_set: LabeledSet        # held-out clean split
    backdoored: Network
    clean_model: Network
    bd_losses: list[float]
    clean_losses: list[float]
    acc_before: float
    asr_before: float


def run_attack(cfg: ExperimentConfig) -> AttackArtifacts:
    """Generate the corpus, poison it, and train backdoored + clean models."""
    corpus = gen_synthetic(
        derive_seed(cfg.seed, ROLE_CORPUS),
        cfg.classes,
        cfg.per_class,
        cfg.grid,
        cfg.noise_sigma,
    )
    train_clean, test_set = train_test_split(
        corpus, cfg.train_fraction, derive_seed(cfg.seed, ROLE_SPLIT)
    )
    train_poisoned = poison_dataset(train_clean, cfg.poison_config())

    init = init_network(derive_seed(cfg.seed, ROLE_INIT), cfg.layer_sizes())
    backdoored, bd_losses = train(init, train_poisoned, cfg.train_config())
    clean_model, clean_losses = train(init, train_clean, cfg.train_config())

    acc_before = metrics.accuracy(backdoored, test_set)
    asr_before = metrics.asr(backdoored, test_set, cfg.trigger(), cfg.target_label)
    return AttackArtifacts(
        train_poisoned,
        test_set,
        backdoored,
        clean_model,
        bd_losses,
        clean_losses,
        acc_before,
        asr_before,
    )


def write_attack(arts: AttackArtifacts, cfg: ExperimentConfig, config_raw: bytes, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(arts.train_set, out / "dataset.tsds")
    save_dataset(arts.test_set, out / "test.tsds")
    save_checkpoint(arts.backdoored, out / "backdoored.tsbd")
    save_checkpoint(arts.clean_model, out / "clean.tsbd")
    write_csv(
        out / "loss_backdoored.csv",
        ["epoch", "mean_loss"],
        [(i, loss) for i, loss in enumerate(arts.bd_losses)],
    )
    write_csv(
        out / "loss_clean.csv",
        ["epoch", "mean_loss"],
        [(i, loss) for i, loss in enumerate(arts.clean_losses)],
    )
    rid = run_id(config_raw, cfg.seed)
    write_csv(
        out / "baseline.csv",
        REPORT_HEADER,
        [(rid, cfg.trigger_kind, arts.acc_before, arts.asr_before, "", "", "")],
    )
    write_manifest(
        out,
        "attack",
        config_raw,
        cfg.seed,
        [*ATTACK_FILES, "loss_backdoored.csv", "loss_clean.csv", "baseline.csv"],
    )


def load_attack(out_dir) -> tuple[LabeledSet, LabeledSet, Network, Network]:
    """Load the four attack artifacts, failing clearly when any is absent."""
    out = Path(out_dir)
    for name in ATTACK_FILES:
        if not (out / name).exists():
            raise MissingArtifactError(f"missing attack artifact {out / name}")
    return (
        load_dataset(out / "dataset.tsds"),
        load_dataset(out / "test.tsds"),
        load_checkpoint(out / "backdoored.tsbd"),
        load_checkpoint(out / "clean.tsbd"),
    )


def defender_subset(cfg: ExperimentConfig, train_set: LabeledSet) -> LabeledSet:
    return clean_subset(train_set, cfg.clean_fraction, derive_seed(cfg.seed, ROLE_SUBSET))


@dataclass
class DefenseOutcome:
    run: defense.DefenseRun
    report: DefenseReport


def run_defense(
    cfg: ExperimentConfig,
    train_set: LabeledSet,
    test_set: LabeledSet,
    backdoored: Network,
    acc_before: float | None = None,
    asr_before: float | None = None,
    out_dir=None,
) -> DefenseOutcome:
    """Defense pipeline plus before/after evaluation on the test split."""
    trigger = cfg.trigger()
    clean_data = defender_subset(cfg, train_set)
    if acc_before is None:
        acc_before = metrics.accuracy(backdoored, test_set)
    if asr_before is None:
        asr_before = metrics.asr(backdoored, test_set, trigger, cfg.target_label)
    run = defense.tsbd_run(
        backdoored,
        clean_data,
        cfg.n_ratio,
        cfg.m_ratio,
        cfg.unlearn_config(),
        cfg.ft_config(),
        cfg.reinit_variant(),
        cfg.per_layer,
        out_dir=out_dir,
    )
    report = DefenseReport.from_rates(
        acc_before,
        asr_before,
        metrics.accuracy(run.finetuned, test_set),
        metrics.asr(run.finetuned, test_set, trigger, cfg.target_label),
    )
    return DefenseOutcome(run, report)


def report_row(rid: str, attack: str, report: DefenseReport) -> tuple:
    return (
        rid,
        attack,
        report.acc_before,
        report.asr_before,
        report.acc_after,
        report.asr_after,
        report.der,
    )


def write_defense(
    outcome: DefenseOutcome, cfg: ExperimentConfig, config_raw: bytes, out_dir
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = outcome.run
    defense.export_nwc_csv(run.nwc, out / "nwc.csv")
    defense.save_subweight_changes(run.nwc, out / "nwc_changes.tsnw")
    mask_stats = {
        "variant": cfg.variant,
        "n_ratio": cfg.n_ratio,
        "m_ratio": cfg.m_ratio,
        "per_layer": cfg.per_layer,
        "selected_neurons": len(run.mask.selected_neurons),
        "masked_entries": run.mask.true_count(),
        "masked_per_layer": {
            str(l): int(m.sum()) for l, m in zip(run.mask.layer_indices, run.mask.masks)
        },
        "unlearn_steps": run.unlearn_steps,
        "unlearn_final_accuracy": run.unlearn_trace[-1],
    }
    (out / "mask_stats.json").write_text(json.dumps(mask_stats, indent=2, sort_keys=True) + "\n")
    rid = run_id(config_raw, cfg.seed)
    write_csv(out / "report.csv", REPORT_HEADER, [report_row(rid, cfg.trigger_kind, outcome.report)])
    write_manifest(
        out,
        "defend",
        config_raw,
        cfg.seed,
        [
            "unlearned.tsbd",
            "reinit.tsbd",
            "final.tsbd",
            "nwc.csv",
            "nwc_changes.tsnw",
            "mask_stats.json",
            "report.csv",
        ],
    )


@dataclass
class AnalysisTables:
    observation1: list[tuple]          # layer, neuron, nwc_clean, nwc_poison
    observation1_summary: list[tuple]  # scope, pearson_r, neuron_count
    activeness: list[tuple]            # layer, neuron, backdoored, clean
    activeness_summary: list[tuple]    # mean_backdoored, mean_clean
    coverage: list[tuple]              # p, ratio
    profiles: list[tuple]              # per-neuron activations and rises


def run_analysis(
    cfg: ExperimentConfig,
    train_set: LabeledSet,
    test_set: LabeledSet,
    backdoored: Network,
    clean_model: Network,
) -> AnalysisTables:
    """Observation statistics: NWC correlation, activeness, coverage, profiles."""
    trigger = cfg.trigger()
    clean_data = defender_subset(cfg, train_set)
    poison_data = poisoned_probe(clean_data, trigger, cfg.target_label)

    ul_clean, _, _ = defense.unlearn(backdoored, clean_data, cfg.unlearn_config())
    ul_poison, _, _ = defense.unlearn(
        backdoored, poison_data, cfg.unlearn_config(ROLE_POISON_UNLEARN)
    )
    nwc_clean = defense.compute_nwc(backdoored, ul_clean)
    nwc_poison = defense.compute_nwc(backdoored, ul_poison)

    obs1_rows = [
        (l, k, float(vc), float(vp))
        for l, cvals, pvals in zip(nwc_clean.layer_indices, nwc_clean.nwc, nwc_poison.nwc)
        for k, (vc, vp) in enumerate(zip(cvals, pvals))
    ]
    summary = [
        (
            "all",
            metrics.pearson([r[2] for r in obs1_rows], [r[3] for r in obs1_rows]),
            len(obs1_rows),
        )
    ]
    for l, cvals, pvals in zip(nwc_clean.layer_indices, nwc_clean.nwc, nwc_poison.nwc):
        summary.append((f"layer_{l}", metrics.pearson(cvals, pvals), int(cvals.size)))

    act_bd = metrics.neuron_grad_activeness(backdoored, clean_data, cfg.unlearn_batch_size)
    act_clean = metrics.neuron_grad_activeness(clean_model, clean_data, cfg.unlearn_batch_size)
    activeness = [
        (l, k, float(b), float(c))
        for (l, k), b, c in zip(act_bd.neuron_ids(), act_bd.vector(), act_clean.vector())
    ]
    activeness_summary = [(act_bd.mean(), act_clean.mean())]

    tac_map = metrics.tac(backdoored, test_set, trigger)
    coverage = [
        (p, metrics.coverage_ratio(nwc_clean.ranking(), tac_map.ranking(), p))
        for p in COVERAGE_FRACTIONS
    ]

    prof_clean_bd = metrics.activation_profile(backdoored, test_set)
    prof_poison_bd = metrics.activation_profile(backdoored, test_set, trigger)
    prof_clean_ul = metrics.activation_profile(ul_clean, test_set)
    prof_poison_ul = metrics.activation_profile(ul_clean, test_set, trigger)
    rise_clean = metrics.activation_rise(prof_clean_ul, prof_clean_bd)
    rise_poison = metrics.activation_rise(prof_poison_ul, prof_poison_bd)
    profiles = [
        (l, k, float(cb), float(pb), float(cu), float(pu), float(rc), float(rp))
        for (l, k), cb, pb, cu, pu, rc, rp in zip(
            prof_clean_bd.neuron_ids(),
            prof_clean_bd.vector(),
            prof_poison_bd.vector(),
            prof_clean_ul.vector(),
            prof_poison_ul.vector(),
            rise_clean.vector(),
            rise_poison.vector(),
        )
    ]
    return AnalysisTables(obs1_rows, summary, activeness, activeness_summary, coverage, profiles)


def write_analysis(tables: AnalysisTables, cfg: ExperimentConfig, config_raw: bytes, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "observation1.csv", ["layer", "neuron", "nwc_clean", "nwc_poison"], tables.observation1)
    write_csv(out / "observation1_summary.csv", ["scope", "pearson_r", "neuron_count"], tables.observation1_summary)
    write_csv(out / "activeness.csv", ["layer", "neuron", "backdoored", "clean"], tables.activeness)
    write_csv(out / "activeness_summary.csv", ["mean_backdoored", "mean_clean"], tables.activeness_summary)
    write_csv(out / "coverage.csv", ["p", "ratio"], tables.coverage)
    write_csv(
        out / "activation_profiles.csv",
        ["layer", "neuron", "clean_bd", "poison_bd", "clean_unlearned", "poison_unlearned", "rise_clean", "rise_poison"],
        tables.profiles,
    )
    write_manifest(
        out,
        "analyze",
        config_raw,
        cfg.seed,
        [
            "observation1.csv",
            "observation1_summary.csv",
            "activeness.csv",
            "activeness_summary.csv",
            "coverage.csv",
            "activation_profiles.csv",
        ],
    )


_AXIS_FIELDS = {
    "n_ratio": "n_ratio",
    "m_ratio": "m_ratio",
    "poisoning_ratio": "poison_ratio",
    "clean_fraction": "clean_fraction",
    "ft_lr": "ft_lr",
}


def _sweep_job(job) -> tuple:
    cfg, config_raw, axis, value = job
    arts = run_attack(cfg)
    outcome = run_defense(
        cfg, arts.train_set, arts.test_set, arts.backdoored, arts.acc_before, arts.asr_before
    )
    rid = run_id(config_raw, cfg.seed)
    return (axis, value, *report_row(rid, cfg.trigger_kind, outcome.report))


def run_sweep(
    cfg: ExperimentConfig, config_raw: bytes, axis: str, values, workers: int | None = None
) -> list[tuple]:
    """One full attack+defense per axis value; rows sorted by value."""
    if axis not in _AXIS_FIELDS:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    jobs = [
        (cfg.with_overrides(**{_AXIS_FIELDS[axis]: v}), config_raw, axis, v)
        for v in sorted(values)
    ]
    if workers is None:
        raw = os.environ.get("TSBD_THREADS", "").strip()
        try:
            workers = int(raw, 10) if raw else 1
        except ValueError:
            raise ConfigError(f"TSBD_THREADS must be an integer, got {raw!r}") from None
    workers = max(1, min(workers, len(jobs)))
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            rows = pool.map(_sweep_job, jobs)
    else:
        rows = [_sweep_job(j) for j in jobs]
    return rows


def write_sweep(rows, cfg: ExperimentConfig, config_raw: bytes, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", ["axis", "value", *REPORT_HEADER], rows)
    write_manifest(out, "sweep", config_raw, cfg.seed, ["sweep.csv"])
