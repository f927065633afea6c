"""Permutation feature importance and threshold-based sensor pruning.

Importance of sensor i is the relative increase in mean position error when
channel i's windows are shuffled across test samples:
E_i = (e_i - e) / e * 100, with the error averaged over elbow and wrist.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import SequenceSample, build_sequences, fit_normalizer, stack_windows
from .models import BaseModel, build_model
from .sim import Session
from .training import TrainConfig, _split_validation, evaluate, train_supervised


@dataclass
class ImportanceReport:
    scores_pct: np.ndarray          # (n,) mean E_i over repeats
    repeats: int
    base_error_mm: float            # e, mean euclidean error averaged over keypoints
    raw_errors_mm: np.ndarray       # (n, repeats) e_i per repeat

    @property
    def n_sensors(self) -> int:
        return len(self.scores_pct)

    def stderr_pct(self) -> np.ndarray:
        per_repeat = (self.raw_errors_mm - self.base_error_mm) / self.base_error_mm * 100.0
        if self.repeats == 1:
            return np.zeros(self.n_sensors)
        return per_repeat.std(axis=1, ddof=1) / np.sqrt(self.repeats)

    def retained(self, threshold: float) -> list[int]:
        return [i for i in range(self.n_sensors) if self.scores_pct[i] >= threshold]


@dataclass
class PruneResult:
    threshold_pct: float
    retained: list[int]
    elbow_rmse_mm: float
    wrist_rmse_mm: float
    elbow_mean_mm: float
    wrist_mean_mm: float


def _mean_pose_error_mm(model: BaseModel, x: np.ndarray, y: np.ndarray,
                        batch_size: int = 64) -> float:
    """Mean euclidean error (mm) averaged over the two keypoints."""
    kw = {"need_recon": False} if model.arch == "transformer" else {}
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = model.forward(np.ascontiguousarray(x[i:i + batch_size]), train=False, **kw)
        e_el = np.linalg.norm(out.p_el.data - y[i:i + batch_size, 0:3], axis=1)
        e_wr = np.linalg.norm(out.p_wr.data - y[i:i + batch_size, 3:6], axis=1)
        total += float((e_el + e_wr).sum()) / 2.0
    return total / len(x) * 1000.0


def permutation_importance(model: BaseModel, test_samples: list[SequenceSample],
                           repeats: int = 5, seed: int = 0) -> ImportanceReport:
    """Shuffle one channel at a time (whole windows swapped across samples)
    and measure the error increase. Channels the model ignores score ~0."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    x, y = stack_windows(test_samples)
    x = np.ascontiguousarray(x)
    n_sensors = x.shape[2]
    base = _mean_pose_error_mm(model, x, y)
    rng = np.random.default_rng(seed)

    raw = np.empty((n_sensors, repeats))
    for rep in range(repeats):
        perm = rng.permutation(len(x))
        for i in range(n_sensors):
            saved = x[:, :, i].copy()
            x[:, :, i] = saved[perm]
            raw[i, rep] = _mean_pose_error_mm(model, x, y)
            x[:, :, i] = saved
    scores = ((raw - base) / base * 100.0).mean(axis=1)
    return ImportanceReport(scores_pct=scores, repeats=repeats,
                            base_error_mm=base, raw_errors_mm=raw)


def prune_and_retrain(
    train_sessions: list[Session],
    test_sessions: list[Session],
    importance: ImportanceReport,
    threshold: float,
    train_cfg: TrainConfig,
    H: int = 128,
    train_step: int | None = None,
    test_step: int = 1,
    model_kwargs: dict | None = None,
    model_seed: int = 0,
) -> PruneResult:
    """Drop sensors below the importance threshold, rebuild the dataset with
    the narrower input, and retrain from scratch."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    retained = importance.retained(threshold)
    if not retained:
        raise ValueError(f"threshold {threshold}% retains no sensors")
    step = train_step if train_step is not None else H // 2

    train_sub = [s.select_channels(retained) for s in train_sessions]
    test_sub = [s.select_channels(retained) for s in test_sessions]
    normalizer = fit_normalizer(train_sub)
    samples = build_sequences(train_sub, H=H, step=step, normalizer=normalizer)
    train_s, val_s = _split_validation(samples)

    kwargs = dict(model_kwargs or {"arch": "transformer"})
    kwargs.setdefault("window", H)
    kwargs["n_channels"] = len(retained)
    model = build_model(seed=model_seed, **kwargs)
    train_supervised(model, train_s, val_s, replace(train_cfg, seed=model_seed))

    test_samples = build_sequences(test_sub, H=H, step=test_step, normalizer=normalizer)
    report = evaluate(model, test_samples, timing_calls=0)
    return PruneResult(
        threshold_pct=threshold, retained=retained,
        elbow_rmse_mm=report.elbow_rmse_mm, wrist_rmse_mm=report.wrist_rmse_mm,
        elbow_mean_mm=report.elbow_mean_mm, wrist_mean_mm=report.wrist_mean_mm,
    )


def write_importance_csv(report: ImportanceReport, path: str | Path) -> None:
    stderr = report.stderr_pct()
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sensor_index", "score_pct", "stderr"])
        for i in range(report.n_sensors):
            w.writerow([i, f"{report.scores_pct[i]:.4f}", f"{stderr[i]:.4f}"])


def write_prune_csv(results: list[PruneResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold_pct", "sensors_retained",
                    "wrist_rmse_mm", "elbow_rmse_mm"])
        for r in results:
            w.writerow([f"{r.threshold_pct:.2f}", len(r.retained),
                        f"{r.wrist_rmse_mm:.4f}", f"{r.elbow_rmse_mm:.4f}"])
