"""Two-phase training (reconstruction pretraining, then supervised pose
regression), evaluation metrics, head-only fine-tuning, and the
error-vs-session-count scaling study."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataset import SequenceSample, stack_windows, build_sequences, fit_normalizer, sample_sessions
from .models import BaseModel, build_model
from .sim import Session

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-5
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    phase: str = "supervised"       # pretrain | supervised | finetune
    lr_schedule: str = "cosine"     # cosine | constant
    lr_min_factor: float = 0.05     # cosine floor as a fraction of lr

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.phase not in ("pretrain", "supervised", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.max_epochs <= 1:
            return self.lr
        t = min(epoch / (self.max_epochs - 1), 1.0)
        floor = self.lr * self.lr_min_factor
        return floor + 0.5 * (self.lr - floor) * (1.0 + np.cos(np.pi * t))


@dataclass
class EvalReport:
    """Per-keypoint errors in millimeters plus raw per-sample traces."""

    elbow_rmse_mm: float
    wrist_rmse_mm: float
    elbow_mean_mm: float
    elbow_std_mm: float
    wrist_mean_mm: float
    wrist_std_mm: float
    inference_time_ms: float | None
    t_ms: np.ndarray                # (N,)
    errors_mm: np.ndarray           # (N, 2) euclidean elbow/wrist errors
    truth: np.ndarray               # (N, 6) ground-truth coords, meters
    pred: np.ndarray                # (N, 6) predicted coords, meters

    def to_json_dict(self) -> dict:
        d = {
            "elbow_rmse_mm": self.elbow_rmse_mm,
            "wrist_rmse_mm": self.wrist_rmse_mm,
            "elbow_mean_mm": self.elbow_mean_mm,
            "elbow_std_mm": self.elbow_std_mm,
            "wrist_mean_mm": self.wrist_mean_mm,
            "wrist_std_mm": self.wrist_std_mm,
            "n_samples": int(len(self.errors_mm)),
        }
        if self.inference_time_ms is not None:
            d["inference_time_ms"] = self.inference_time_ms
        return d


def pose_loss(p_el: Tensor, p_wr: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of summed squared component errors of both keypoints."""
    pred = ad.concat([p_el, p_wr], axis=1)
    diff = ad.sub(pred, Tensor(np.asarray(target, dtype=pred.dtype)))
    per_sample = ad.sum_(ad.mul(diff, diff), axis=1)
    return ad.mean(per_sample)


def reconstruction_loss(x_recon: Tensor, window: np.ndarray) -> Tensor:
    return ad.mse(x_recon, Tensor(np.asarray(window, dtype=x_recon.dtype)))


def _split_validation(samples: list[SequenceSample], fraction: float = 0.1
                      ) -> tuple[list[SequenceSample], list[SequenceSample]]:
    """Hold out whole trailing sessions covering at least ``fraction`` of the
    sequences. Window timestamps restart per session, so a drop in t_ms marks
    a session boundary; holding out full sessions keeps validation honest
    about re-donning variation."""
    if len(samples) < 2:
        return samples, []
    boundaries = [0] + [i for i in range(1, len(samples))
                        if samples[i].t_ms < samples[i - 1].t_ms] + [len(samples)]
    if len(boundaries) == 2:   # single session: fall back to a tail split
        n_val = max(1, int(len(samples) * fraction))
        return samples[:-n_val], samples[-n_val:]
    target = len(samples) * (1.0 - fraction)
    cut = max(1, int(np.searchsorted(boundaries, target, side="left")) - 1)
    cut = min(cut, len(boundaries) - 2)
    split = boundaries[cut]
    return samples[:split], samples[split:]


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _eval_loss(model: BaseModel, x: np.ndarray, y: np.ndarray | None,
               batch_size: int = 64, recon: bool = False) -> float:
    total, count = 0.0, 0
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        if recon:
            out = model.forward(xb, train=False)
            loss = reconstruction_loss(out.x_recon, xb)
        else:
            kw = {"need_recon": False} if model.arch == "transformer" else {}
            out = model.forward(xb, train=False, **kw)
            loss = pose_loss(out.p_el, out.p_wr, y[i:i + batch_size])
        total += float(loss.data) * len(xb)
        count += len(xb)
    return total / count


def _train_loop(
    model: BaseModel,
    train_samples: list[SequenceSample],
    val_samples: list[SequenceSample] | None,
    cfg: TrainConfig,
    *,
    recon: bool,
    trainable_names: list[str] | None = None,
) -> dict:
    """Shared mini-batch loop with early stopping and best-state restore."""
    if not train_samples:
        raise ValueError("empty training set")
    x_train, y_train = stack_windows(train_samples)
    if val_samples:
        x_val, y_val = stack_windows(val_samples)
    else:
        x_val, y_val = x_train, y_train

    params = model.params()
    if trainable_names is None:
        trainable = list(params.values())
    else:
        missing = [n for n in trainable_names if n not in params]
        if missing:
            raise ValueError(f"unknown trainable parameters: {missing}")
        trainable = [params[n] for n in trainable_names]

    rng = np.random.default_rng(cfg.seed)
    best_val = float("inf")
    best_state = model.state_arrays()
    best_epoch = -1
    bad_epochs = 0
    history = []

    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        epoch_loss, seen = 0.0, 0
        for idx in _epoch_batches(len(x_train), cfg.batch_size, rng):
            xb = np.ascontiguousarray(x_train[idx])
            with Tape() as tape:
                if recon:
                    out = model.forward(xb, train=True, rng=rng)
                    loss = reconstruction_loss(out.x_recon, xb)
                else:
                    kw = {"need_recon": False} if model.arch == "transformer" else {}
                    out = model.forward(xb, train=True, rng=rng, **kw)
                    loss = pose_loss(out.p_el, out.p_wr, y_train[idx])
            ad.zero_grads(trainable)
            tape.backward(loss)
            ad.adam_step(trainable, lr=lr, weight_decay=cfg.weight_decay)
            epoch_loss += float(loss.data) * len(xb)
            seen += len(xb)
        val_loss = _eval_loss(model, x_val, None if recon else y_val, recon=recon)
        history.append({"epoch": epoch, "train_loss": epoch_loss / seen, "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_arrays()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break
    model.load_state_arrays(best_state)
    return {"best_val_loss": best_val, "best_epoch": best_epoch, "history": history}


def pretrain(model: BaseModel, train_samples: list[SequenceSample], cfg: TrainConfig,
             val_samples: list[SequenceSample] | None = None) -> dict:
    """Unsupervised reconstruction phase; pose heads receive no updates."""
    if cfg.phase != "pretrain":
        raise ValueError(f"pretrain called with phase={cfg.phase!r}")
    params = model.params()
    head_names = [n for n in params if n.startswith(("head_el.", "head_wr."))]
    trainable = [n for n in params if n not in set(head_names)]
    if "head_recon.w0" not in params:
        raise ValueError(f"{model.arch} has no reconstruction head; cannot pretrain")
    return _train_loop(model, train_samples, val_samples, cfg, recon=True,
                       trainable_names=trainable)


def train_supervised(model: BaseModel, train_samples: list[SequenceSample],
                     val_samples: list[SequenceSample] | None, cfg: TrainConfig) -> dict:
    if cfg.phase != "supervised":
        raise ValueError(f"train_supervised called with phase={cfg.phase!r}")
    return _train_loop(model, train_samples, val_samples, cfg, recon=False)


def fine_tune(model: BaseModel, new_user_samples: list[SequenceSample], cfg: TrainConfig,
              trainable_names: list[str] | None = None) -> dict:
    """Adapt to a new user by retraining only the final head layers (lr 1e-5
    by convention; pass a wider ``trainable_names`` list to unfreeze more)."""
    if cfg.phase != "finetune":
        raise ValueError(f"fine_tune called with phase={cfg.phase!r}")
    if trainable_names is None:
        trainable_names = model.default_finetune_params()
    train_s, val_s = _split_validation(new_user_samples)
    return _train_loop(model, train_s, val_s, cfg, recon=False,
                       trainable_names=trainable_names)


def two_phase_train(model: BaseModel, train_samples: list[SequenceSample],
                    val_samples: list[SequenceSample] | None,
                    pretrain_cfg: TrainConfig, supervised_cfg: TrainConfig) -> dict:
    info_pre = pretrain(model, train_samples, pretrain_cfg, val_samples)
    info_sup = train_supervised(model, train_samples, val_samples, supervised_cfg)
    return {"pretrain": info_pre, "supervised": info_sup}


def evaluate(model: BaseModel, test_samples: list[SequenceSample],
             batch_size: int = 64, timing_calls: int = 1000) -> EvalReport:
    """Per-keypoint RMSE and Euclidean error stats over a frozen model.

    Inference time is the wall-clock mean over ``timing_calls`` single-window
    forwards (0 skips timing, for callers that only need errors).
    """
    if not test_samples:
        raise ValueError("empty test set")
    x, y = stack_windows(test_samples)
    preds = np.empty_like(y)
    kw = {"need_recon": False} if model.arch == "transformer" else {}
    for i in range(0, len(x), batch_size):
        out = model.forward(np.ascontiguousarray(x[i:i + batch_size]), train=False, **kw)
        preds[i:i + batch_size, 0:3] = out.p_el.data
        preds[i:i + batch_size, 3:6] = out.p_wr.data

    err_el = np.linalg.norm(preds[:, 0:3] - y[:, 0:3], axis=1) * 1000.0
    err_wr = np.linalg.norm(preds[:, 3:6] - y[:, 3:6], axis=1) * 1000.0

    infer_ms = None
    if timing_calls > 0:
        one = np.ascontiguousarray(x[0])
        model.forward(one, train=False, **kw)  # warm caches before timing
        t0 = time.perf_counter()
        for i in range(timing_calls):
            model.forward(x[i % len(x)], train=False, **kw)
        infer_ms = (time.perf_counter() - t0) / timing_calls * 1000.0

    return EvalReport(
        elbow_rmse_mm=float(np.sqrt(np.mean(err_el ** 2))),
        wrist_rmse_mm=float(np.sqrt(np.mean(err_wr ** 2))),
        elbow_mean_mm=float(err_el.mean()), elbow_std_mm=float(err_el.std()),
        wrist_mean_mm=float(err_wr.mean()), wrist_std_mm=float(err_wr.std()),
        inference_time_ms=infer_ms,
        t_ms=np.array([s.t_ms for s in test_samples]),
        errors_mm=np.stack([err_el, err_wr], axis=1),
        truth=y.astype(np.float64), pred=preds.astype(np.float64),
    )


def write_trace_csv(report: EvalReport, path: str | Path) -> None:
    """Per-timestamp ground-truth and predicted coordinates."""
    cols = ["t_ms", "el_x", "el_y", "el_z", "wr_x", "wr_y", "wr_z",
            "el_x_hat", "el_y_hat", "el_z_hat", "wr_x_hat", "wr_y_hat", "wr_z_hat"]
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for i in range(len(report.t_ms)):
            row = [int(report.t_ms[i])]
            row += [f"{v:.6f}" for v in report.truth[i]]
            row += [f"{v:.6f}" for v in report.pred[i]]
            w.writerow(row)


def write_eval_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")


# --- scaling study -----------------------------------------------------------


def _scaling_one(args) -> tuple[int, int, float, float]:
    (k, rep, sessions, test_sessions, H, step, test_step, train_cfg, model_kwargs, seed) = args
    subset = sample_sessions(sessions, k, seed=seed)
    normalizer = fit_normalizer(subset)
    samples = build_sequences(subset, H=H, step=step, normalizer=normalizer)
    train_s, val_s = _split_validation(samples)
    model = build_model(seed=seed, **model_kwargs)
    cfg = replace(train_cfg, seed=seed)
    train_supervised(model, train_s, val_s, cfg)
    test_samples = build_sequences(test_sessions, H=H, step=test_step, normalizer=normalizer)
    report = evaluate(model, test_samples, timing_calls=0)
    return k, rep, report.elbow_rmse_mm, report.wrist_rmse_mm


def scaling_study(
    sessions: list[Session],
    test_sessions: list[Session],
    K_values: list[int],
    repeats: int,
    train_cfg: TrainConfig,
    H: int = 128,
    train_step: int | None = None,
    test_step: int = 1,
    model_kwargs: dict | None = None,
    base_seed: int = 0,
    threads: int = 1,
) -> list[dict]:
    """Retrain from scratch for each (K, repeat) with freshly sampled sessions.

    Rows come back ordered by (K, repeat) regardless of execution order, so
    parallel runs merge deterministically.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for k in K_values:
        if k > len(sessions):
            raise ValueError(f"K={k} exceeds available sessions ({len(sessions)})")
    model_kwargs = dict(model_kwargs or {"arch": "transformer"})
    model_kwargs.setdefault("window", H)
    step = train_step if train_step is not None else H // 2

    jobs = [
        (k, rep, sessions, test_sessions, H, step, test_step, train_cfg, model_kwargs,
         base_seed * 1_000_000 + k * 1_000 + rep)
        for k in K_values for rep in range(repeats)
    ]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_scaling_one, jobs))
    else:
        results = [_scaling_one(j) for j in jobs]
    results.sort(key=lambda r: (r[0], r[1]))
    return [
        {"K": k, "repeat": rep, "elbow_rmse_mm": el, "wrist_rmse_mm": wr}
        for k, rep, el, wr in results
    ]


def write_scaling_csv(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["K", "repeat", "elbow_rmse_mm", "wrist_rmse_mm"])
        for r in rows:
            w.writerow([r["K"], r["repeat"],
                        f"{r['elbow_rmse_mm']:.4f}", f"{r['wrist_rmse_mm']:.4f}"])


def mean_predictor_rmse(train_samples: list[SequenceSample],
                        test_samples: list[SequenceSample]) -> tuple[float, float]:
    """RMSE (mm) of predicting the training-set mean pose for every test
    sample; the no-skill baseline the models are judged against."""
    y_train = np.stack([s.label.as_vector() for s in train_samples])
    y_test = np.stack([s.label.as_vector() for s in test_samples])
    mean = y_train.mean(axis=0)
    err_el = np.linalg.norm(y_test[:, 0:3] - mean[0:3], axis=1) * 1000.0
    err_wr = np.linalg.norm(y_test[:, 3:6] - mean[3:6], axis=1) * 1000.0
    return float(np.sqrt(np.mean(err_el ** 2))), float(np.sqrt(np.mean(err_wr ** 2)))
