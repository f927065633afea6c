"""Real-time streaming inference and the collision gate.

Frames arrive at 100 Hz (file replay or newline-delimited byte stream), a
ring buffer keeps the last H of them, the pose model estimates the arm, and
a stop/resume state machine pauses a simulated robot whenever the estimated
arm capsules come within the clearance threshold of the tool. Resuming
requires the distance to clear an extra hysteresis band for a number of
consecutive frames, so the gate cannot chatter at the threshold.
"""

from __future__ import annotations

import enum
import json
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Normalizer
from .models import BaseModel
from .sim import (ArmGeometry, ArmPose, FMGFrame, JointTrajectory, Session,
                  SessionPerturbation, UserProfile, _fk_arrays, _hermite,
                  load_session, record_session)


class GateMode(enum.Enum):
    RUNNING = "Running"
    PAUSED = "Paused"


@dataclass
class StreamConfig:
    rate_hz: float = 100.0
    window: int = 128
    source: str = "file-replay"          # file-replay | byte-stream
    stale_timeout_ms: int = 250

    def __post_init__(self):
        if self.stale_timeout_ms <= 10 * (1000.0 / self.rate_hz):
            raise ValueError("stale_timeout_ms must exceed 10 frame periods")
        if self.source not in ("file-replay", "byte-stream"):
            raise ValueError(f"unknown stream source {self.source!r}")


@dataclass
class GateConfig:
    clearance_m: float = 0.150
    hysteresis_m: float = 0.030
    resume_frames: int = 20
    shoulder_m: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r_arm_m: float = 0.05


@dataclass(frozen=True)
class GateState:
    mode: GateMode
    min_dist_m: float
    frames_clear: int
    t_ms: int


@dataclass
class RobotPath:
    waypoints_m: list[tuple[float, float, float]]
    speed_mps: float
    r_rob_m: float

    def __post_init__(self):
        if len(self.waypoints_m) < 2:
            raise ValueError("path needs at least 2 waypoints")
        if self.speed_mps <= 0:
            raise ValueError("path speed must be positive")

    @staticmethod
    def default() -> "RobotPath":
        return RobotPath(waypoints_m=[(0.40, -0.12, -0.30), (0.40, 0.12, -0.30)],
                         speed_mps=0.06, r_rob_m=0.06)

    @staticmethod
    def load(path: str | Path) -> "RobotPath":
        doc = json.loads(Path(path).read_text())
        return RobotPath(waypoints_m=[tuple(w) for w in doc["waypoints_m"]],
                         speed_mps=doc["speed_mps"], r_rob_m=doc["r_rob_m"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "waypoints_m": [list(w) for w in self.waypoints_m],
            "speed_mps": self.speed_mps, "r_rob_m": self.r_rob_m,
        }, indent=2) + "\n")


@dataclass
class ArmCapsules:
    """Two capsules in workspace coordinates: shoulder->elbow, elbow->wrist."""

    shoulder: np.ndarray
    elbow: np.ndarray
    wrist: np.ndarray
    r_arm: float

    @staticmethod
    def from_pose(pose: ArmPose, shoulder, r_arm: float) -> "ArmCapsules":
        sh = np.asarray(shoulder, dtype=float)
        return ArmCapsules(shoulder=sh, elbow=sh + np.asarray(pose.p_el, float),
                           wrist=sh + np.asarray(pose.p_wr, float), r_arm=r_arm)

    def segments(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.shoulder, self.elbow), (self.elbow, self.wrist)]


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(np.dot(ab, ab))
    if denom < 1e-18:
        return float(np.linalg.norm(p - a))
    t = float(np.dot(p - a, ab)) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


def segment_segment_distance(a0, a1, b0, b1) -> float:
    """Closest distance between segments [a0,a1] and [b0,b1]."""
    u, v, w0 = a1 - a0, b1 - b0, a0 - b0
    a = float(np.dot(u, u))
    b = float(np.dot(u, v))
    c = float(np.dot(v, v))
    d = float(np.dot(u, w0))
    e = float(np.dot(v, w0))
    den = a * c - b * b
    best = math.inf
    if den > 1e-12:
        s = (b * e - c * d) / den
        t = (a * e - b * d) / den
        if 0.0 <= s <= 1.0 and 0.0 <= t <= 1.0:
            best = float(np.linalg.norm((a0 + s * u) - (b0 + t * v)))
    for p, q0, q1 in ((b0, a0, a1), (b1, a0, a1)):
        best = min(best, point_segment_distance(p, q0, q1))
    for p, q0, q1 in ((a0, b0, b1), (a1, b0, b1)):
        best = min(best, point_segment_distance(p, q0, q1))
    return best


def min_distance(arm: ArmCapsules, robot_pos, r_rob: float) -> float:
    """Surface-to-surface clearance between the arm capsules and the tool
    sphere, floored at zero."""
    p = np.asarray(robot_pos, dtype=float)
    d = min(point_segment_distance(p, a, b) for a, b in arm.segments())
    return max(0.0, d - arm.r_arm - r_rob)


class RobotPathRunner:
    """Integrates position along the closed polyline at constant speed."""

    def __init__(self, path: RobotPath):
        self.path = path
        pts = np.asarray(path.waypoints_m, dtype=float)
        # closed loop: back to the first waypoint
        self._pts = np.vstack([pts, pts[0]])
        seg = np.diff(self._pts, axis=0)
        self._seg_len = np.linalg.norm(seg, axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self.total_len = float(self._cum[-1])
        self.traveled = 0.0

    @property
    def pos(self) -> np.ndarray:
        s = self.traveled % self.total_len
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        frac = (s - self._cum[i]) / self._seg_len[i] if self._seg_len[i] > 0 else 0.0
        return self._pts[i] + frac * (self._pts[i + 1] - self._pts[i])

    def advance(self, dt: float) -> None:
        self.traveled += self.path.speed_mps * dt


class CollisionGate:
    """Pause below clearance, resume only after a debounced clear streak."""

    def __init__(self, cfg: GateConfig):
        self.cfg = cfg
        self.mode = GateMode.RUNNING
        self.frames_clear = 0
        self.min_dist = math.inf
        self.t_ms = 0

    def step(self, min_dist: float, t_ms: int = 0) -> GateState:
        c, h = self.cfg.clearance_m, self.cfg.hysteresis_m
        if self.mode is GateMode.PAUSED:
            if min_dist >= c + h:
                self.frames_clear += 1
                if self.frames_clear >= self.cfg.resume_frames:
                    self.mode = GateMode.RUNNING
                    self.frames_clear = 0
            else:
                self.frames_clear = 0
        if self.mode is GateMode.RUNNING and min_dist < c:
            self.mode = GateMode.PAUSED
            self.frames_clear = 0
        self.min_dist = min_dist
        self.t_ms = t_ms
        return GateState(mode=self.mode, min_dist_m=min_dist,
                         frames_clear=self.frames_clear, t_ms=t_ms)

    def fail_safe(self, t_ms: int = 0) -> GateState:
        """Stream-loss transition: pause until estimates resume."""
        self.mode = GateMode.PAUSED
        self.frames_clear = 0
        self.t_ms = t_ms
        return GateState(mode=self.mode, min_dist_m=self.min_dist,
                         frames_clear=0, t_ms=t_ms)


# --- ring buffer -----------------------------------------------------------------


class FrameRing:
    """Fixed-capacity ring of the H most recent frames.

    Out-of-order frames are dropped and counted; a timestamp gap larger than
    the stale timeout resets the ring (the window must re-warm).
    """

    def __init__(self, window: int, n_channels: int, stale_timeout_ms: int):
        self.window = window
        self.stale_timeout_ms = stale_timeout_ms
        self._buf = np.zeros((window, n_channels), dtype=np.uint16)
        self._count = 0
        self._head = 0
        self._last_t: int | None = None
        self.dropped = 0
        self.resets = 0

    @property
    def warm(self) -> bool:
        return self._count >= self.window

    def reset(self) -> None:
        self._count = 0
        self._head = 0
        self._last_t = None

    def push(self, frame: FMGFrame) -> bool:
        """Returns False if the frame was dropped (out of order)."""
        if self._last_t is not None:
            if frame.t_ms <= self._last_t:
                self.dropped += 1
                return False
            if frame.t_ms - self._last_t > self.stale_timeout_ms:
                self.reset()
                self.resets += 1
        self._buf[self._head] = frame.raw
        self._head = (self._head + 1) % self.window
        self._count = min(self._count + 1, self.window)
        self._last_t = frame.t_ms
        return True

    def latest_window(self, normalizer: Normalizer) -> np.ndarray | None:
        """Chronological normalized window, or None until warm."""
        if not self.warm:
            return None
        ordered = np.roll(self._buf, -self._head, axis=0)
        return normalizer.apply(ordered)


# --- estimators --------------------------------------------------------------------


class ModelEstimator:
    """Streams frames through a ring and the frozen model."""

    def __init__(self, model: BaseModel, normalizer: Normalizer, stream_cfg: StreamConfig):
        self.model = model
        self.normalizer = normalizer
        self.ring = FrameRing(stream_cfg.window, normalizer.n_channels,
                              stream_cfg.stale_timeout_ms)

    def reset(self) -> None:
        self.ring.reset()

    def observe(self, frame: FMGFrame, true_pose: ArmPose | None = None) -> ArmPose | None:
        self.ring.push(frame)
        win = self.ring.latest_window(self.normalizer)
        if win is None:
            return None
        p_el, p_wr = self.model.predict(win)
        return ArmPose(p_el=p_el.astype(np.float64), p_wr=p_wr.astype(np.float64))


class OracleEstimator:
    """Passes ground-truth poses straight through (perfect estimator)."""

    def reset(self) -> None:
        pass

    def observe(self, frame: FMGFrame, true_pose: ArmPose | None = None) -> ArmPose | None:
        return true_pose


class BiasedEstimator:
    """Wraps another estimator and offsets its wrist/elbow estimates."""

    def __init__(self, inner, el_offset=(0.0, 0.0, 0.0), wr_offset=(0.0, 0.0, 0.0)):
        self.inner = inner
        self.el_offset = np.asarray(el_offset, dtype=float)
        self.wr_offset = np.asarray(wr_offset, dtype=float)

    def reset(self) -> None:
        self.inner.reset()

    def observe(self, frame, true_pose=None) -> ArmPose | None:
        pose = self.inner.observe(frame, true_pose)
        if pose is None:
            return None
        return ArmPose(p_el=pose.p_el + self.el_offset, p_wr=pose.p_wr + self.wr_offset)


# --- per-frame pipeline --------------------------------------------------------------


@dataclass
class DecisionRecord:
    t_ms: int
    mode: GateMode
    min_dist_m: float | None
    est_pose: ArmPose | None
    robot_pos: np.ndarray

    def to_json_dict(self) -> dict:
        mm = lambda v: [round(float(x) * 1000.0, 3) for x in v]
        return {
            "t_ms": self.t_ms,
            "mode": self.mode.value,
            "min_dist_mm": None if self.min_dist_m is None
                else round(self.min_dist_m * 1000.0, 3),
            "el_mm": None if self.est_pose is None else mm(self.est_pose.p_el),
            "wr_mm": None if self.est_pose is None else mm(self.est_pose.p_wr),
            "robot_mm": mm(self.robot_pos),
        }


class GateSession:
    """One streaming run: estimator -> distance -> gate -> robot motion.

    The same tick() drives scripted trials and live/replayed streams, so a
    replayed session file reproduces trial decisions exactly.
    """

    def __init__(self, estimator, path: RobotPath, gate_cfg: GateConfig, rate_hz: float):
        self.estimator = estimator
        self.gate_cfg = gate_cfg
        self.gate = CollisionGate(gate_cfg)
        self.robot = RobotPathRunner(path)
        self.dt = 1.0 / rate_hz

    def tick(self, frame: FMGFrame, true_pose: ArmPose | None = None
             ) -> tuple[DecisionRecord, float | None]:
        """Process one frame; returns (decision, true clearance or None)."""
        robot_pos = self.robot.pos
        r_rob = self.robot.path.r_rob_m
        est = self.estimator.observe(frame, true_pose)
        d_est = None
        if est is not None:
            arm = ArmCapsules.from_pose(est, self.gate_cfg.shoulder_m, self.gate_cfg.r_arm_m)
            d_est = min_distance(arm, robot_pos, r_rob)
            self.gate.step(d_est, frame.t_ms)
        true_d = None
        if true_pose is not None:
            true_arm = ArmCapsules.from_pose(true_pose, self.gate_cfg.shoulder_m,
                                             self.gate_cfg.r_arm_m)
            true_d = min_distance(true_arm, robot_pos, r_rob)
        rec = DecisionRecord(t_ms=frame.t_ms, mode=self.gate.mode, min_dist_m=d_est,
                             est_pose=est, robot_pos=robot_pos)
        if self.gate.mode is GateMode.RUNNING:
            self.robot.advance(self.dt)
        return rec, true_d


# --- scripted trials ------------------------------------------------------------------


@dataclass
class ScriptedTrial:
    trial_id: str
    session: Session
    interfere: bool


@dataclass
class TrialOutcome:
    trial_id: str
    label: str                      # success | false_positive | false_negative
    true_dist_m: np.ndarray
    est_dist_m: np.ndarray          # nan where not warm
    paused: np.ndarray              # bool per frame


@dataclass
class TrialSummary:
    outcomes: list[TrialOutcome]

    def rate(self, label: str) -> float:
        if not self.outcomes:
            return 0.0
        return sum(o.label == label for o in self.outcomes) / len(self.outcomes)

    @property
    def success_rate(self) -> float:
        return self.rate("success")

    @property
    def false_positive_rate(self) -> float:
        return self.rate("false_positive")

    @property
    def false_negative_rate(self) -> float:
        return self.rate("false_negative")


def solve_posture_for_wrist(target_ws, shoulder, geom: ArmGeometry, seed: int = 0,
                            keep_elbow_back: bool = False) -> np.ndarray:
    """Random-search a joint posture whose wrist lands near a workspace point.

    ``keep_elbow_back`` penalizes postures whose elbow juts forward, used for
    reach targets that must stay clear of the robot's corridor.
    """
    rng = np.random.default_rng(seed)
    lo = np.array([-1.2, -1.5, -1.0, 0.1])
    hi = np.array([1.2, 0.8, 1.0, 2.6])
    q = rng.uniform(lo, hi, size=(40_000, 4))
    el, wr = _fk_arrays(q, geom)
    target_rel = np.asarray(target_ws, float) - np.asarray(shoulder, float)
    cost = np.linalg.norm(wr - target_rel, axis=1)
    if keep_elbow_back:
        cost = cost + 6.0 * np.maximum(0.0, el[:, 0] - 0.12) ** 2 * 100.0
    return q[int(np.argmin(cost))]


_REST_Q = np.array([0.05, -0.15, 0.0, 0.40])


def _min_clearance_to_path(traj: JointTrajectory, geom: ArmGeometry,
                           path: RobotPath, gate_cfg: GateConfig) -> float:
    """Worst-case clearance over the whole trajectory against the whole path
    polyline (conservative: independent of the robot's phase along it)."""
    el, wr = _fk_arrays(traj.q, geom)
    sh = np.asarray(gate_cfg.shoulder_m, dtype=float)
    el, wr = el + sh, wr + sh
    segs = [(np.asarray(a, float), np.asarray(b, float))
            for a, b in zip(path.waypoints_m[:-1], path.waypoints_m[1:])]
    worst = math.inf
    for i in range(0, len(traj), 4):
        for a0, a1 in ((sh, el[i]), (el[i], wr[i])):
            for b0, b1 in segs:
                d = segment_segment_distance(a0, a1, b0, b1)
                worst = min(worst, d - gate_cfg.r_arm_m - path.r_rob_m)
    return worst


def make_trial(
    user: UserProfile,
    geom: ArmGeometry,
    path: RobotPath,
    gate_cfg: GateConfig,
    seed: int,
    interfere: bool,
    duration: float = 8.0,
    rate: float = 100.0,
) -> ScriptedTrial:
    """Rest -> reach -> hold -> retreat -> rest, aimed into or away from the
    robot corridor. Clear trials are validated to keep a margin above the
    resume threshold for the whole transit, retrying the posture solve with
    shifted targets if needed."""
    pts = np.asarray(path.waypoints_m, dtype=float)
    center = pts.mean(axis=0)
    n = int(round(duration * rate))
    t = np.arange(n) / rate

    def build(q_target: np.ndarray) -> JointTrajectory:
        q = np.tile(_REST_Q, (n, 1))
        qd = np.zeros((n, 4))
        hold = (t >= 3.2) & (t < 4.7)
        q[hold] = q_target
        for t0, t1, qa, qb in ((2.0, 3.2, _REST_Q, q_target),
                               (4.7, 5.9, q_target, _REST_Q)):
            m = (t >= t0) & (t < t1)
            q[m], qd[m] = _hermite(t[m], t0, t1, qa, qb, 0.0, 0.0)
        return JointTrajectory(q=q, qdot=qd, t=t)

    if interfere:
        q_target = solve_posture_for_wrist(center, gate_cfg.shoulder_m, geom, seed=seed)
        traj = build(q_target)
    else:
        margin = gate_cfg.clearance_m + gate_cfg.hysteresis_m + 0.03
        traj = None
        for attempt in range(12):
            target = np.array([0.0, -0.32, -0.40 - 0.005 * attempt])
            q_target = solve_posture_for_wrist(target, gate_cfg.shoulder_m, geom,
                                               seed=seed + 131 * attempt,
                                               keep_elbow_back=True)
            candidate = build(q_target)
            if _min_clearance_to_path(candidate, geom, path, gate_cfg) >= margin:
                traj = candidate
                break
        if traj is None:
            raise RuntimeError(f"could not script a clear trial for seed {seed}")

    pert = SessionPerturbation.from_seed(seed + 777, n_channels=user.n_channels)
    session = record_session(user, pert, traj, geom,
                             session_id=f"trial-{seed}-{'hit' if interfere else 'clear'}")
    return ScriptedTrial(trial_id=session.session_id, session=session, interfere=interfere)


def make_trials(user: UserProfile, geom: ArmGeometry, path: RobotPath,
                gate_cfg: GateConfig, n_trials: int, base_seed: int,
                interfere_every: int = 2) -> list[ScriptedTrial]:
    return [make_trial(user, geom, path, gate_cfg, seed=base_seed + i,
                       interfere=(i % interfere_every == 0))
            for i in range(n_trials)]


def run_trial(trial: ScriptedTrial, path: RobotPath, estimator, gate_cfg: GateConfig,
              rate_hz: float = 100.0, grace_s: float = 0.5) -> tuple[TrialOutcome, list[DecisionRecord]]:
    """Drive the gate with estimated poses; score against true violations.

    success: paused on every true-violation frame and never paused outside
    the grace window of a violation. false_positive: some violation frame
    passed while Running (failure to stop). false_negative: a pause with no
    violation nearby (unnecessary stop). FP takes precedence when both occur.
    """
    sess = trial.session
    estimator.reset()
    gs = GateSession(estimator, path, gate_cfg, rate_hz)
    n = len(sess)
    true_d = np.empty(n)
    est_d = np.full(n, np.nan)
    paused = np.zeros(n, dtype=bool)
    records = []
    for i in range(n):
        rec, td = gs.tick(sess.frame(i), true_pose=sess.pose(i))
        records.append(rec)
        true_d[i] = td
        if rec.min_dist_m is not None:
            est_d[i] = rec.min_dist_m
        paused[i] = rec.mode is GateMode.PAUSED

    violation = true_d < gate_cfg.clearance_m
    grace = int(round(grace_s * rate_hz))
    if np.any(violation & ~paused):
        label = "false_positive"
    else:
        near_violation = np.zeros(n, dtype=bool)
        idx = np.where(violation)[0]
        for j in idx:
            near_violation[max(0, j - grace):j + grace + 1] = True
        label = "false_negative" if np.any(paused & ~near_violation) else "success"
    return TrialOutcome(trial_id=trial.trial_id, label=label, true_dist_m=true_d,
                        est_dist_m=est_d, paused=paused), records


def run_trials(trials: list[ScriptedTrial], path: RobotPath, estimator_factory,
               gate_cfg: GateConfig, rate_hz: float = 100.0,
               grace_s: float = 0.5) -> TrialSummary:
    """Each trial gets a fresh estimator, gate, and robot."""
    outcomes = []
    for trial in trials:
        if len(trial.session) == 0:
            raise ValueError(f"trial {trial.trial_id} has no ground truth")
        outcome, _ = run_trial(trial, path, estimator_factory(), gate_cfg,
                               rate_hz=rate_hz, grace_s=grace_s)
        outcomes.append(outcome)
    return TrialSummary(outcomes=outcomes)


# --- wire protocol and streaming server -----------------------------------------------


def format_wire_line(frame: FMGFrame) -> str:
    return ",".join([str(frame.t_ms)] + [str(int(v)) for v in frame.raw]) + "\n"


def parse_wire_line(line: str, n_channels: int = 32) -> FMGFrame:
    parts = line.strip().split(",")
    if len(parts) != 1 + n_channels:
        raise ValueError(f"wire frame has {len(parts)} fields, expected {1 + n_channels}")
    vals = [int(p) for p in parts]
    raw = np.asarray(vals[1:], dtype=np.int64)
    if np.any(raw < 0) or np.any(raw > 1023):
        raise ValueError("wire frame channel value outside ADC range")
    return FMGFrame(t_ms=vals[0], raw=raw.astype(np.uint16))


@dataclass
class StreamStats:
    frames: int = 0
    malformed: int = 0
    decisions: int = 0
    latency_ms: list[float] = field(default_factory=list)

    def percentile_ms(self, q: float) -> float:
        return float(np.percentile(self.latency_ms, q)) if self.latency_ms else 0.0


def _frames_from_session_file(path: str | Path):
    sess = load_session(path)
    for i in range(len(sess)):
        yield format_wire_line(sess.frame(i))


def serve_stream(
    model: BaseModel,
    normalizer: Normalizer,
    path: RobotPath,
    stream_cfg: StreamConfig,
    gate_cfg: GateConfig,
    source: str | Path,
    out_log: str | Path | None = None,
    pace: bool = False,
    max_connections: int = 1,
    queue_size: int = 256,
) -> StreamStats:
    """Run the gate over a frame stream and append one decision per frame.

    ``source`` is a session .jsonl path in file-replay mode or a
    ``host:port`` to listen on in byte-stream mode. Ingestion and gating
    communicate over a bounded single-producer/single-consumer queue; a
    closed connection forces the gate into Paused until frames resume.
    """
    estimator = ModelEstimator(model, normalizer, stream_cfg)
    gs = GateSession(estimator, path, gate_cfg, stream_cfg.rate_hz)
    stats = StreamStats()
    log_f = Path(out_log).open("w") if out_log else None

    def process_line(line: str) -> None:
        t0 = time.perf_counter()
        try:
            frame = parse_wire_line(line, n_channels=normalizer.n_channels)
        except ValueError:
            stats.malformed += 1
            return
        rec, _ = gs.tick(frame)
        stats.frames += 1
        stats.decisions += 1
        if log_f is not None:
            log_f.write(json.dumps(rec.to_json_dict()) + "\n")
        stats.latency_ms.append((time.perf_counter() - t0) * 1000.0)

    try:
        if stream_cfg.source == "file-replay":
            period = 1.0 / stream_cfg.rate_hz
            next_t = time.perf_counter()
            for line in _frames_from_session_file(source):
                if pace:
                    next_t += period
                    delay = next_t - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
                process_line(line)
        else:
            host, port_s = str(source).rsplit(":", 1)
            q: queue.Queue = queue.Queue(maxsize=queue_size)

            def ingest(conn):
                buf = b""
                try:
                    while True:
                        chunk = conn.recv(4096)
                        if not chunk:
                            break
                        buf += chunk
                        while b"\n" in buf:
                            line, buf = buf.split(b"\n", 1)
                            q.put(line.decode("ascii", errors="replace"))
                finally:
                    q.put(None)  # sentinel: connection closed

            with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as srv:
                srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                srv.bind((host, int(port_s)))
                srv.listen(1)
                for _ in range(max_connections):
                    conn, _addr = srv.accept()
                    t = threading.Thread(target=ingest, args=(conn,), daemon=True)
                    t.start()
                    while True:
                        item = q.get()
                        if item is None:
                            gs.gate.fail_safe(gs.gate.t_ms)
                            break
                        process_line(item)
                    conn.close()
    finally:
        if log_f is not None:
            log_f.close()
    return stats


def write_trial_csv(summaries: dict[str, TrialSummary], path: str | Path) -> None:
    """Success/FP/FN rates per named trial session."""
    import csv
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["session", "trials", "success_pct", "false_positive_pct",
                    "false_negative_pct"])
        for name, s in summaries.items():
            w.writerow([name, len(s.outcomes),
                        f"{s.success_rate * 100.0:.1f}",
                        f"{s.false_positive_rate * 100.0:.1f}",
                        f"{s.false_negative_rate * 100.0:.1f}"])
