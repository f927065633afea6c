"""Command-line entry point: reproducible desk-scale experiment pipelines.

Every subcommand takes a JSON config (``--config``) with dotted ``--set``
overrides, writes its artifacts under one output directory, and drops a
manifest recording the config hash, seed, and library versions. ``repro-all``
chains the full study: simulate, train all models, importance, pruning,
transfer, gate trials, and the scaling study.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import dataset as ds
from . import gate as gt
from . import sim
from . import training as tr
from .models import MODEL_REGISTRY, build_model, load_checkpoint, save_checkpoint


class ConfigError(ValueError):
    """Invalid or unknown configuration; raised before any work starts."""


# --- configuration tree -----------------------------------------------------


@dataclass
class SimSection:
    sessions: int = 8
    samples: int = 4000
    test_sessions: int = 2
    rate_hz: float = 100.0
    kind: str = "mixed"
    L1: float = 0.30
    L2: float = 0.26
    noise_sigma: float = 5.0
    dead_channels: list[int] = field(default_factory=lambda: [13, 14])
    n_channels: int = 32


@dataclass
class DatasetSection:
    window: int = 128
    train_step: int = 0            # 0 means window // 2
    test_step: int = 1


@dataclass
class ModelSection:
    arch: str = "transformer"
    overrides: dict = field(default_factory=dict)


@dataclass
class TrainSection:
    lr: float = 1e-3
    weight_decay: float = 5e-5
    batch_size: int = 32
    max_epochs: int = 40
    patience: int = 8
    pretrain: bool = True
    pretrain_epochs: int = 8
    finetune_lr: float = 1e-5
    finetune_epochs: int = 30


@dataclass
class AnalysisSection:
    repeats: int = 3
    thresholds: list[float] = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 2.5])
    importance_test_step: int = 16
    retrain_max_epochs: int = 20


@dataclass
class TransferSection:
    perturb_scale: float = 0.25
    sessions: int = 2
    samples: int = 4000
    test_sessions: int = 1


@dataclass
class ScalingSection:
    k_values: list[int] = field(default_factory=lambda: [1, 4, 8])
    repeats: int = 2
    max_epochs: int = 20


@dataclass
class GateSection:
    clearance_m: float = 0.150
    hysteresis_m: float = 0.030
    resume_frames: int = 20
    r_arm_m: float = 0.05
    shoulder_m: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    stale_timeout_ms: int = 250
    trials_per_session: int = 12
    path_file: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = ""
    threads: int = 1
    sim: SimSection = field(default_factory=SimSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    scaling: ScalingSection = field(default_factory=ScalingSection)
    gate: GateSection = field(default_factory=GateSection)


def _merge_into(obj, data: dict, path: str = "") -> None:
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if not hasattr(obj, key):
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and not isinstance(current, type):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge_into(current, value, where)
        else:
            setattr(obj, key, value)


def _apply_set(cfg: RunConfig, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    obj = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    if not hasattr(obj, parts[-1]):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, parts[-1], value)


def load_config(config_path: str | None, sets: list[str]) -> RunConfig:
    cfg = RunConfig()
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        _merge_into(cfg, doc)
    for assignment in sets:
        _apply_set(cfg, assignment)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.model.arch not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model arch {cfg.model.arch!r}")
    try:
        _model_kwargs(cfg)  # raises on bad overrides
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad model overrides: {e}")
    if cfg.dataset.window < 2:
        raise ConfigError("dataset.window must be >= 2")
    if cfg.sim.sessions < 1 or cfg.sim.test_sessions < 1:
        raise ConfigError("sim.sessions and sim.test_sessions must be >= 1")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")


def _model_kwargs(cfg: RunConfig) -> dict:
    kwargs = dict(cfg.model.overrides)
    kwargs["arch"] = cfg.model.arch
    kwargs["n_channels"] = cfg.sim.n_channels
    kwargs["window"] = cfg.dataset.window
    build_model(seed=0, **kwargs)  # validation probe
    return kwargs


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def resolve_out_dir(cfg: RunConfig, cli_out: str | None, command: str) -> Path:
    root = cli_out or cfg.out_dir or os.environ.get("FMG_POSE_OUT", "runs")
    out = Path(root) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, cfg: RunConfig, command: str, artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "fmgpose": __version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__,
        },
        "artifacts": sorted(artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# --- shared pipeline pieces ----------------------------------------------------


def _make_world(cfg: RunConfig):
    user = sim.make_user_profile(
        cfg.seed, n_channels=cfg.sim.n_channels,
        noise_sigma=cfg.sim.noise_sigma,
        dead_channels=tuple(cfg.sim.dead_channels))
    geom = sim.ArmGeometry(L1=cfg.sim.L1, L2=cfg.sim.L2)
    return user, geom


def _simulate_sessions(cfg: RunConfig):
    user, geom = _make_world(cfg)
    train = sim.generate_sessions(cfg.sim.sessions, cfg.sim.samples, user, geom,
                                  base_seed=cfg.seed, kind=cfg.sim.kind,
                                  rate=cfg.sim.rate_hz, id_prefix="train")
    test = sim.generate_sessions(cfg.sim.test_sessions, cfg.sim.samples, user, geom,
                                 base_seed=cfg.seed + 500, kind=cfg.sim.kind,
                                 rate=cfg.sim.rate_hz, id_prefix="test")
    return user, geom, train, test


def _train_step(cfg: RunConfig) -> int:
    return cfg.dataset.train_step or cfg.dataset.window // 2


def _build_splits(cfg: RunConfig, train_sessions, test_sessions):
    normalizer = ds.fit_normalizer(train_sessions)
    train_samples = ds.build_sequences(train_sessions, H=cfg.dataset.window,
                                       step=_train_step(cfg), normalizer=normalizer)
    test_samples = ds.build_sequences(test_sessions, H=cfg.dataset.window,
                                      step=cfg.dataset.test_step, normalizer=normalizer)
    train_s, val_s = tr._split_validation(train_samples)
    return normalizer, train_s, val_s, test_samples


def _train_one(cfg: RunConfig, arch: str, train_s, val_s, seed_offset: int = 0):
    kwargs = _model_kwargs(cfg)
    kwargs["arch"] = arch
    model = build_model(seed=cfg.seed + seed_offset, **kwargs)
    sup_cfg = tr.TrainConfig(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
                             batch_size=cfg.train.batch_size,
                             max_epochs=cfg.train.max_epochs, patience=cfg.train.patience,
                             seed=cfg.seed + seed_offset, phase="supervised")
    if cfg.train.pretrain and arch == "transformer" and cfg.train.pretrain_epochs > 0:
        pre_cfg = dataclasses.replace(sup_cfg, phase="pretrain",
                                      max_epochs=cfg.train.pretrain_epochs)
        tr.pretrain(model, train_s, pre_cfg, val_s)
    info = tr.train_supervised(model, train_s, val_s, sup_cfg)
    return model, info


# --- subcommands ------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path) -> list[str]:
    _, _, train, test = _simulate_sessions(cfg)
    sess_dir = out / "sessions"
    sess_dir.mkdir(exist_ok=True)
    artifacts = []
    for s in train + test:
        p = sess_dir / f"{s.session_id}.jsonl"
        sim.save_session(s, p)
        artifacts.append(str(p.relative_to(out)))
    return artifacts


def cmd_build_dataset(cfg: RunConfig, out: Path) -> list[str]:
    _, _, train_sessions, _ = _simulate_sessions(cfg)
    normalizer = ds.fit_normalizer(train_sessions)
    samples = ds.build_sequences(train_sessions, H=cfg.dataset.window,
                                 step=_train_step(cfg), normalizer=normalizer)
    path = out / "train.fmgd"
    ds.save_dataset(samples, normalizer, path, H=cfg.dataset.window, step=_train_step(cfg))
    return [path.name]


def cmd_train(cfg: RunConfig, out: Path) -> list[str]:
    _, _, train_sessions, test_sessions = _simulate_sessions(cfg)
    normalizer, train_s, val_s, _ = _build_splits(cfg, train_sessions, test_sessions)
    model, info = _train_one(cfg, cfg.model.arch, train_s, val_s)
    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt, normalizer=normalizer)
    (out / "train_info.json").write_text(json.dumps(
        {"arch": model.arch, "n_params": model.n_params,
         "best_val_loss": info["best_val_loss"], "best_epoch": info["best_epoch"]},
        indent=2) + "\n")
    return [ckpt.name, "train_info.json"]


def cmd_eval(cfg: RunConfig, out: Path, ckpt: str | None) -> list[str]:
    if ckpt:
        model, normalizer = load_checkpoint(ckpt)
        _, _, train_sessions, test_sessions = _simulate_sessions(cfg)
        test_samples = ds.build_sequences(test_sessions, H=cfg.dataset.window,
                                          step=cfg.dataset.test_step, normalizer=normalizer)
    else:
        _, _, train_sessions, test_sessions = _simulate_sessions(cfg)
        normalizer, train_s, val_s, test_samples = _build_splits(cfg, train_sessions, test_sessions)
        model, _ = _train_one(cfg, cfg.model.arch, train_s, val_s)
    report = tr.evaluate(model, test_samples)
    tr.write_eval_json(report, out / "eval.json")
    tr.write_trace_csv(report, out / "trace.csv")
    with (out / "metrics.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "elbow_rmse_mm", "elbow_mean_mm", "elbow_std_mm",
                    "wrist_rmse_mm", "wrist_mean_mm", "wrist_std_mm"])
        w.writerow([model.arch] + [f"{v:.4f}" for v in (
            report.elbow_rmse_mm, report.elbow_mean_mm, report.elbow_std_mm,
            report.wrist_rmse_mm, report.wrist_mean_mm, report.wrist_std_mm)])
    return ["eval.json", "trace.csv", "metrics.csv"]


def cmd_scaling_study(cfg: RunConfig, out: Path) -> list[str]:
    _, _, train_sessions, test_sessions = _simulate_sessions(cfg)
    train_cfg = tr.TrainConfig(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
                               batch_size=cfg.train.batch_size,
                               max_epochs=cfg.scaling.max_epochs,
                               patience=cfg.train.patience, phase="supervised")
    rows = tr.scaling_study(train_sessions, test_sessions, cfg.scaling.k_values,
                            cfg.scaling.repeats, train_cfg, H=cfg.dataset.window,
                            train_step=_train_step(cfg), test_step=cfg.dataset.test_step,
                            model_kwargs=_model_kwargs(cfg), base_seed=cfg.seed,
                            threads=cfg.threads)
    tr.write_scaling_csv(rows, out / "fig5_scaling.csv")
    return ["fig5_scaling.csv"]


def _trained_with_test(cfg: RunConfig, out: Path):
    _, _, train_sessions, test_sessions = _simulate_sessions(cfg)
    normalizer, train_s, val_s, test_samples = _build_splits(cfg, train_sessions, test_sessions)
    model, _ = _train_one(cfg, cfg.model.arch, train_s, val_s)
    return model, normalizer, train_sessions, test_sessions, test_samples


def cmd_importance(cfg: RunConfig, out: Path, ckpt: str | None) -> list[str]:
    if ckpt:
        model, normalizer = load_checkpoint(ckpt)
        _, _, _, test_sessions = _simulate_sessions(cfg)
    else:
        model, normalizer, _, test_sessions, _ = _trained_with_test(cfg, out)
    samples = ds.build_sequences(test_sessions, H=cfg.dataset.window,
                                 step=cfg.analysis.importance_test_step,
                                 normalizer=normalizer)
    report = an.permutation_importance(model, samples, repeats=cfg.analysis.repeats,
                                       seed=cfg.seed)
    an.write_importance_csv(report, out / "table2_importance.csv")
    return ["table2_importance.csv"]


def cmd_prune(cfg: RunConfig, out: Path) -> list[str]:
    model, normalizer, train_sessions, test_sessions, _ = _trained_with_test(cfg, out)
    samples = ds.build_sequences(test_sessions, H=cfg.dataset.window,
                                 step=cfg.analysis.importance_test_step,
                                 normalizer=normalizer)
    report = an.permutation_importance(model, samples, repeats=cfg.analysis.repeats,
                                       seed=cfg.seed)
    an.write_importance_csv(report, out / "table2_importance.csv")
    retrain_cfg = tr.TrainConfig(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
                                 batch_size=cfg.train.batch_size,
                                 max_epochs=cfg.analysis.retrain_max_epochs,
                                 patience=cfg.train.patience, phase="supervised")
    results = []
    for threshold in cfg.analysis.thresholds:
        results.append(an.prune_and_retrain(
            train_sessions, test_sessions, report, threshold, retrain_cfg,
            H=cfg.dataset.window, train_step=_train_step(cfg),
            test_step=cfg.analysis.importance_test_step,
            model_kwargs={"arch": cfg.model.arch, **cfg.model.overrides},
            model_seed=cfg.seed))
    an.write_prune_csv(results, out / "table3_prune.csv")
    return ["table2_importance.csv", "table3_prune.csv"]


def cmd_finetune(cfg: RunConfig, out: Path, ckpt: str | None) -> list[str]:
    user, geom = _make_world(cfg)
    if ckpt:
        model, normalizer = load_checkpoint(ckpt)
    else:
        model, normalizer, _, _, _ = _trained_with_test(cfg, out)
    new_user = sim.perturb_user_profile(user, cfg.transfer.perturb_scale, cfg.seed + 9000)
    ft_sessions = sim.generate_sessions(cfg.transfer.sessions, cfg.transfer.samples,
                                        new_user, geom, base_seed=cfg.seed + 9100,
                                        kind=cfg.sim.kind, id_prefix="ft")
    ft_test_sessions = sim.generate_sessions(cfg.transfer.test_sessions, cfg.transfer.samples,
                                             new_user, geom, base_seed=cfg.seed + 9200,
                                             kind=cfg.sim.kind, id_prefix="ft-test")
    ft_samples = ds.build_sequences(ft_sessions, H=cfg.dataset.window,
                                    step=_train_step(cfg), normalizer=normalizer)
    ft_test = ds.build_sequences(ft_test_sessions, H=cfg.dataset.window,
                                 step=cfg.analysis.importance_test_step,
                                 normalizer=normalizer)
    zs = tr.evaluate(model, ft_test, timing_calls=0)
    ft_cfg = tr.TrainConfig(lr=cfg.train.finetune_lr, weight_decay=0.0,
                            batch_size=cfg.train.batch_size,
                            max_epochs=cfg.train.finetune_epochs,
                            patience=cfg.train.patience, seed=cfg.seed, phase="finetune")
    tr.fine_tune(model, ft_samples, ft_cfg)
    ft = tr.evaluate(model, ft_test, timing_calls=0)
    with (out / "table4_transfer.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["user", "elbow_zs_mm", "elbow_ft_mm", "wrist_zs_mm", "wrist_ft_mm"])
        w.writerow(["perturbed-1",
                    f"{zs.elbow_mean_mm:.4f}", f"{ft.elbow_mean_mm:.4f}",
                    f"{zs.wrist_mean_mm:.4f}", f"{ft.wrist_mean_mm:.4f}"])
    return ["table4_transfer.csv"]


def _gate_objects(cfg: RunConfig):
    gate_cfg = gt.GateConfig(clearance_m=cfg.gate.clearance_m,
                             hysteresis_m=cfg.gate.hysteresis_m,
                             resume_frames=cfg.gate.resume_frames,
                             shoulder_m=tuple(cfg.gate.shoulder_m),
                             r_arm_m=cfg.gate.r_arm_m)
    path = gt.RobotPath.load(cfg.gate.path_file) if cfg.gate.path_file else gt.RobotPath.default()
    stream_cfg = gt.StreamConfig(rate_hz=cfg.sim.rate_hz, window=cfg.dataset.window,
                                 stale_timeout_ms=cfg.gate.stale_timeout_ms)
    return gate_cfg, path, stream_cfg


def cmd_gate_replay(cfg: RunConfig, out: Path, ckpt: str, source: str) -> list[str]:
    model, normalizer = load_checkpoint(ckpt)
    if normalizer is None:
        raise ConfigError("checkpoint has no normalizer; cannot stream")
    gate_cfg, path, stream_cfg = _gate_objects(cfg)
    stats = gt.serve_stream(model, normalizer, path, stream_cfg, gate_cfg,
                            source=source, out_log=out / "decisions.jsonl")
    (out / "gate_stats.json").write_text(json.dumps({
        "frames": stats.frames, "malformed": stats.malformed,
        "latency_p50_ms": stats.percentile_ms(50), "latency_p99_ms": stats.percentile_ms(99),
    }, indent=2) + "\n")
    return ["decisions.jsonl", "gate_stats.json"]


def cmd_gate_serve(cfg: RunConfig, out: Path, ckpt: str, endpoint: str) -> list[str]:
    model, normalizer = load_checkpoint(ckpt)
    if normalizer is None:
        raise ConfigError("checkpoint has no normalizer; cannot stream")
    gate_cfg, path, stream_cfg = _gate_objects(cfg)
    stream_cfg.source = "byte-stream"
    gt.serve_stream(model, normalizer, path, stream_cfg, gate_cfg,
                    source=endpoint, out_log=out / "decisions.jsonl")
    return ["decisions.jsonl"]


def cmd_repro_all(cfg: RunConfig, out: Path) -> list[str]:
    artifacts: list[str] = []
    user, geom, train_sessions, test_sessions = _simulate_sessions(cfg)
    normalizer, train_s, val_s, test_samples = _build_splits(cfg, train_sessions, test_sessions)

    # model comparison (errors to table1, timing kept out of the metric CSVs)
    timing = {}
    reports = {}
    trained = {}
    for i, arch in enumerate(["fcnn", "cnn1d", "dlinear", "transformer"]):
        model, _ = _train_one(cfg, arch, train_s, val_s, seed_offset=i)
        report = tr.evaluate(model, test_samples, timing_calls=200)
        trained[arch] = model
        reports[arch] = report
        timing[arch] = report.inference_time_ms
    with (out / "table1_models.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "elbow_mean_mm", "elbow_std_mm", "wrist_mean_mm",
                    "wrist_std_mm", "elbow_rmse_mm", "wrist_rmse_mm"])
        for arch in ("fcnn", "cnn1d", "dlinear", "transformer"):
            r = reports[arch]
            w.writerow([arch] + [f"{v:.4f}" for v in (
                r.elbow_mean_mm, r.elbow_std_mm, r.wrist_mean_mm, r.wrist_std_mm,
                r.elbow_rmse_mm, r.wrist_rmse_mm)])
    (out / "timing.json").write_text(json.dumps(
        {k: round(v, 4) for k, v in timing.items()}, indent=2, sort_keys=True) + "\n")
    artifacts += ["table1_models.csv", "timing.json"]

    transformer = trained["transformer"]
    save_checkpoint(transformer, out / "transformer.ckpt", normalizer=normalizer)
    tr.write_trace_csv(reports["transformer"], out / "fig4_trace.csv")
    artifacts += ["transformer.ckpt", "fig4_trace.csv"]

    # importance and pruning
    imp_samples = ds.build_sequences(test_sessions, H=cfg.dataset.window,
                                     step=cfg.analysis.importance_test_step,
                                     normalizer=normalizer)
    imp = an.permutation_importance(transformer, imp_samples,
                                    repeats=cfg.analysis.repeats, seed=cfg.seed)
    an.write_importance_csv(imp, out / "table2_importance.csv")
    retrain_cfg = tr.TrainConfig(lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
                                 batch_size=cfg.train.batch_size,
                                 max_epochs=cfg.analysis.retrain_max_epochs,
                                 patience=cfg.train.patience, phase="supervised")
    prunes = [an.prune_and_retrain(train_sessions, test_sessions, imp, th, retrain_cfg,
                                   H=cfg.dataset.window, train_step=_train_step(cfg),
                                   test_step=cfg.analysis.importance_test_step,
                                   model_kwargs={"arch": "transformer", **cfg.model.overrides},
                                   model_seed=cfg.seed)
              for th in cfg.analysis.thresholds]
    an.write_prune_csv(prunes, out / "table3_prune.csv")
    artifacts += ["table2_importance.csv", "table3_prune.csv"]

    # transfer
    artifacts += cmd_finetune(cfg, out, ckpt=None)

    # scaling study
    artifacts += cmd_scaling_study(cfg, out)

    # gate trials: session 1 deliberate interference, session 2 natural mix
    gate_cfg, path, stream_cfg = _gate_objects(cfg)
    model, normalizer2 = load_checkpoint(out / "transformer.ckpt")
    factory = lambda: gt.ModelEstimator(model, normalizer2, stream_cfg)
    n = cfg.gate.trials_per_session
    s1 = gt.make_trials(user, geom, path, gate_cfg, n, base_seed=cfg.seed + 40_000,
                        interfere_every=1)
    s2 = gt.make_trials(user, geom, path, gate_cfg, n, base_seed=cfg.seed + 41_000,
                        interfere_every=2)
    summary1 = gt.run_trials(s1, path, factory, gate_cfg, rate_hz=cfg.sim.rate_hz)
    summary2 = gt.run_trials(s2, path, factory, gate_cfg, rate_hz=cfg.sim.rate_hz)
    gt.write_trial_csv({"session1": summary1, "session2": summary2},
                       out / "table5_gate.csv")
    artifacts += ["table5_gate.csv"]
    return artifacts


# --- argument parsing ---------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path, JSON value)")
    p.add_argument("--out", help="output directory root (default $FMG_POSE_OUT or ./runs)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--threads", type=int, help="worker processes for parallel studies")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmgpose",
        description="FMG arm-pose toolkit: synthetic data, model training, "
                    "sensor analysis, and the streaming collision gate.")
    sub = parser.add_subparsers(dest="command", required=True)

    specs = {
        "simulate": "generate synthetic labeled sessions",
        "build-dataset": "window and normalize sessions into a dataset file",
        "train": "train a model on the synthetic task",
        "eval": "evaluate a model on held-out sessions",
        "scaling-study": "error versus number of training sessions",
        "importance": "permutation feature importance per sensor",
        "prune": "threshold pruning with retraining",
        "finetune": "zero-shot vs fine-tuned transfer to a perturbed user",
        "gate-replay": "replay a session file through the collision gate",
        "gate-serve": "serve the collision gate over a TCP byte stream",
        "repro-all": "run the full desk-scale study end to end",
    }
    parsers = {}
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        parsers[name] = p
    for name in ("eval", "importance", "finetune"):
        parsers[name].add_argument("--checkpoint", help="model checkpoint to load "
                                   "(trains from scratch when omitted)")
    parsers["gate-replay"].add_argument("--checkpoint", required=True)
    parsers["gate-replay"].add_argument("--session", required=True,
                                        help="recorded session .jsonl to replay")
    parsers["gate-serve"].add_argument("--checkpoint", required=True)
    parsers["gate-serve"].add_argument("--listen", default="127.0.0.1:7700",
                                       metavar="HOST:PORT")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        out = resolve_out_dir(cfg, args.out, args.command)
    except ConfigError as e:
        print(json.dumps({"error": {"type": "config", "message": str(e)}}), file=sys.stderr)
        return 2

    try:
        if args.command == "simulate":
            artifacts = cmd_simulate(cfg, out)
        elif args.command == "build-dataset":
            artifacts = cmd_build_dataset(cfg, out)
        elif args.command == "train":
            artifacts = cmd_train(cfg, out)
        elif args.command == "eval":
            artifacts = cmd_eval(cfg, out, args.checkpoint)
        elif args.command == "scaling-study":
            artifacts = cmd_scaling_study(cfg, out)
        elif args.command == "importance":
            artifacts = cmd_importance(cfg, out, args.checkpoint)
        elif args.command == "prune":
            artifacts = cmd_prune(cfg, out)
        elif args.command == "finetune":
            artifacts = cmd_finetune(cfg, out, args.checkpoint)
        elif args.command == "gate-replay":
            artifacts = cmd_gate_replay(cfg, out, args.checkpoint, args.session)
        elif args.command == "gate-serve":
            artifacts = cmd_gate_serve(cfg, out, args.checkpoint, args.listen)
        elif args.command == "repro-all":
            artifacts = cmd_repro_all(cfg, out)
        else:  # pragma: no cover
            raise ValueError(f"unhandled command {args.command}")
    except (ValueError, OSError) as e:
        print(json.dumps({"error": {"type": type(e).__name__, "message": str(e)}}),
              file=sys.stderr)
        return 1
    write_manifest(out, cfg, args.command, artifacts)
    print(f"{args.command}: wrote {len(artifacts)} artifact(s) to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
