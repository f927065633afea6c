"""Turn recorded sessions into normalized temporal sequences.

Windowing slides within a session only (never across boundaries), each
window labeled by the pose of its last frame. Train sets use a step of
H/2, test sets a step of 1; both are caller-controlled here.

Frame and session containers live in :mod:`fmgpose.sim`; they are
re-exported for convenience.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sim import ArmPose, FMGFrame, Session  # noqa: F401  (re-export)

log = logging.getLogger(__name__)

_MAGIC = b"FMGD"
_FORMAT_VERSION = 1


class DatasetLoadError(ValueError):
    """Malformed, truncated, or version-mismatched dataset file."""


@dataclass(frozen=True)
class Normalizer:
    """Per-channel mean/std in ADC counts; zero-variance channels get std 1."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, frames: np.ndarray) -> np.ndarray:
        """Normalize raw frames (..., n) to float32."""
        out = (np.asarray(frames, dtype=np.float64) - self.mean) / self.std
        return out.astype(np.float32)

    @property
    def n_channels(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class SequenceSample:
    """One H x n normalized window plus the pose label of its last frame."""

    window: np.ndarray   # (H, n) float32, possibly a view into a shared buffer
    label: ArmPose
    t_ms: int


def fit_normalizer(sessions: list[Session]) -> Normalizer:
    """Per-channel statistics over all frames of the given sessions.

    Accumulates in float64. Meant to be fit on training sessions only and
    then frozen for test/stream use.
    """
    if not sessions or all(len(s) == 0 for s in sessions):
        raise ValueError("fit_normalizer: no frames")
    stacked = np.concatenate([s.fmg.astype(np.float64) for s in sessions], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return Normalizer(mean=mean, std=std)


def window_count(m: int, h: int, step: int) -> int:
    """Number of windows a length-m session yields: floor((m - h) / step) + 1."""
    if m < h:
        return 0
    return (m - h) // step + 1


def build_sequences(
    sessions: list[Session],
    H: int,
    step: int,
    normalizer: Normalizer,
) -> list[SequenceSample]:
    """Sliding windows over each session, ordered by (session id, start index).

    Sessions shorter than H are skipped with a warning. Windows are views
    into one normalized buffer per session, so large step-1 test sets stay
    cheap in memory.
    """
    if H < 2:
        raise ValueError(f"window length must be >= 2, got {H}")
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    samples: list[SequenceSample] = []
    for sess in sorted(sessions, key=lambda s: s.session_id):
        m = len(sess)
        if m < H:
            log.warning("session %s has %d frames (< H=%d), skipped", sess.session_id, m, H)
            continue
        norm = normalizer.apply(sess.fmg)
        views = np.lib.stride_tricks.sliding_window_view(norm, (H, norm.shape[1]))[:, 0]
        for start in range(0, m - H + 1, step):
            last = start + H - 1
            samples.append(SequenceSample(
                window=views[start],
                label=ArmPose(p_el=sess.el[last], p_wr=sess.wr[last]),
                t_ms=int(sess.t_ms[last]),
            ))
    return samples


def sample_sessions(sessions: list[Session], K: int, seed: int) -> list[Session]:
    """Uniform subset of K sessions without replacement, deterministic per seed."""
    if not 1 <= K <= len(sessions):
        raise ValueError(f"K={K} out of range for {len(sessions)} sessions")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(sessions), size=K, replace=False)
    return [sessions[i] for i in sorted(idx)]


def stack_windows(samples: list[SequenceSample]) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (N, H, n) float32 windows and (N, 6) float32 labels."""
    x = np.stack([s.window for s in samples]).astype(np.float32, copy=False)
    y = np.stack([s.label.as_vector() for s in samples]).astype(np.float32)
    return x, y


# --- dataset container -------------------------------------------------------
#
# Layout: 4-byte magic, u32 header length, JSON header, then per sample:
#   u32 window byte count, float32 LE window,
#   u32 label byte count, float64 LE [el xyz, wr xyz, t_ms].


def save_dataset(
    samples: list[SequenceSample],
    normalizer: Normalizer,
    path: str | Path,
    H: int,
    step: int,
) -> None:
    path = Path(path)
    n_channels = normalizer.n_channels
    header = {
        "format_version": _FORMAT_VERSION,
        "H": H,
        "step": step,
        "count": len(samples),
        "n_channels": n_channels,
        "normalizer": {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()},
        "label_fields": ["el_x", "el_y", "el_z", "wr_x", "wr_y", "wr_z", "t_ms"],
    }
    head = json.dumps(header).encode()
    with path.open("wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for s in samples:
            win = np.ascontiguousarray(s.window, dtype="<f4")
            if win.shape != (H, n_channels):
                raise ValueError(f"sample window shape {win.shape} != ({H}, {n_channels})")
            label = np.concatenate([s.label.as_vector(), [float(s.t_ms)]]).astype("<f8")
            f.write(struct.pack("<I", win.nbytes))
            f.write(win.tobytes())
            f.write(struct.pack("<I", label.nbytes))
            f.write(label.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetLoadError(f"truncated dataset file while reading {what}")
    return buf


def load_dataset(path: str | Path) -> tuple[list[SequenceSample], Normalizer, dict]:
    """Inverse of :func:`save_dataset`; fails loudly rather than partially."""
    path = Path(path)
    with path.open("rb") as f:
        if _read_exact(f, 4, "magic") != _MAGIC:
            raise DatasetLoadError(f"{path}: not a dataset file (bad magic)")
        (head_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, head_len, "header"))
        if header.get("format_version") != _FORMAT_VERSION:
            raise DatasetLoadError(
                f"{path}: format_version {header.get('format_version')} not supported")
        H = header["H"]
        n_channels = header["n_channels"]
        win_bytes = H * n_channels * 4
        normalizer = Normalizer(
            mean=np.asarray(header["normalizer"]["mean"], dtype=np.float64),
            std=np.asarray(header["normalizer"]["std"], dtype=np.float64),
        )
        samples: list[SequenceSample] = []
        for i in range(header["count"]):
            (nb,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} window size"))
            if nb != win_bytes:
                got = nb // (H * 4)
                raise DatasetLoadError(
                    f"{path}: record {i} window has {got} channels, expected {n_channels}")
            win = np.frombuffer(_read_exact(f, nb, f"record {i} window"), dtype="<f4")
            win = win.reshape(H, n_channels)
            (lb,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} label size"))
            if lb != 7 * 8:
                raise DatasetLoadError(f"{path}: record {i} label has {lb} bytes, expected 56")
            lab = np.frombuffer(_read_exact(f, lb, f"record {i} label"), dtype="<f8")
            samples.append(SequenceSample(
                window=win,
                label=ArmPose(p_el=lab[0:3].copy(), p_wr=lab[3:6].copy()),
                t_ms=int(lab[6]),
            ))
        trailing = f.read(1)
        if trailing:
            raise DatasetLoadError(f"{path}: trailing bytes after {header['count']} records")
    return samples, normalizer, header
