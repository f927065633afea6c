"""Synthetic ground-truth oracle: 4-DOF arm kinematics plus a generative
32-channel FMG signal model.

The arm has shoulder yaw/pitch/roll (q1..q3) and elbow flexion (q4).
Sensor channels respond linearly to [sin q, cos q, q] and to joint
velocities, through per-user mixing matrices, plus per-session gain/offset
perturbations that model re-donning the device. Everything is a pure
function of (seed, config).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_CHANNELS = 32
ADC_MAX = 1023
Q4_MAX = 2.8          # anatomical elbow flexion limit, rad
QDOT_MAX = 10.0       # rad/s
_Q_LO = np.array([-math.pi, -math.pi, -math.pi, 0.0])
_Q_HI = np.array([math.pi, math.pi, math.pi, Q4_MAX])


@dataclass(frozen=True)
class ArmGeometry:
    """Upper-arm and forearm link lengths, meters."""

    L1: float = 0.30
    L2: float = 0.26

    def __post_init__(self):
        if self.L1 <= 0 or self.L2 <= 0:
            raise ValueError(f"link lengths must be positive, got {self.L1}, {self.L2}")


@dataclass(frozen=True)
class JointState:
    """Joint angles (rad), angular velocities (rad/s) and time (s)."""

    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class ArmPose:
    """Elbow and wrist positions (m) relative to the shoulder origin."""

    p_el: np.ndarray
    p_wr: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.p_el, float), np.asarray(self.p_wr, float)])


@dataclass(frozen=True)
class SessionPerturbation:
    """Per-channel gain/offset drawn on each re-donning of the device."""

    gain: np.ndarray
    offset: np.ndarray
    seed: int

    @staticmethod
    def from_seed(seed: int, n_channels: int = N_CHANNELS,
                  gain_spread: float = 0.06, offset_spread: float = 12.0) -> "SessionPerturbation":
        """Typical re-donning draw; spreads stay well inside the hard
        invariant bounds (gain in [0.8, 1.2], offset in [-20, 20])."""
        if not 0 <= gain_spread <= 0.2 or not 0 <= offset_spread <= 20.0:
            raise ValueError("perturbation spread outside invariant bounds")
        rng = np.random.default_rng(seed)
        gain = rng.uniform(1.0 - gain_spread, 1.0 + gain_spread, size=n_channels)
        offset = rng.uniform(-offset_spread, offset_spread, size=n_channels)
        return SessionPerturbation(gain=gain, offset=offset, seed=seed)

    @staticmethod
    def identity(n_channels: int = N_CHANNELS) -> "SessionPerturbation":
        return SessionPerturbation(np.ones(n_channels), np.zeros(n_channels), seed=-1)


@dataclass(frozen=True)
class UserProfile:
    """Per-user sensor response: channel = A @ [sin q, cos q, q] + B @ qdot + b.

    Rows listed in ``dead_channels`` are zero in both A and B, so those
    channels carry bias and noise only.
    """

    A: np.ndarray                 # (n, 12) posture-feature mixing
    B: np.ndarray                 # (n, 4) velocity mixing
    b: np.ndarray                 # (n,) bias, ADC counts
    noise_sigma: float
    dead_channels: frozenset[int]
    user_id: int = 0

    def __post_init__(self):
        if len(self.dead_channels) < 2:
            raise ValueError("profile needs at least 2 dead channels")
        for i in self.dead_channels:
            if np.any(self.A[i] != 0) or np.any(self.B[i] != 0):
                raise ValueError(f"dead channel {i} has nonzero mixing rows")

    @property
    def n_channels(self) -> int:
        return self.A.shape[0]


def make_user_profile(
    seed: int,
    n_channels: int = N_CHANNELS,
    noise_sigma: float = 5.0,
    dead_channels: tuple[int, ...] = (13, 14),
) -> UserProfile:
    """Draw a random user; magnitudes chosen so channels swing a few hundred
    ADC counts around mid-range without saturating often."""
    if any(i < 0 or i >= n_channels for i in dead_channels):
        raise ValueError(f"dead channel indices {dead_channels} outside 0..{n_channels - 1}")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 60.0, size=(n_channels, 12))
    B = rng.normal(0.0, 15.0, size=(n_channels, 4))
    b = 512.0 + rng.normal(0.0, 40.0, size=n_channels)
    for i in dead_channels:
        A[i] = 0.0
        B[i] = 0.0
    return UserProfile(
        A=A, B=B, b=b, noise_sigma=noise_sigma,
        dead_channels=frozenset(dead_channels), user_id=seed,
    )


def perturb_user_profile(base: UserProfile, scale: float, seed: int) -> UserProfile:
    """A new user derived from ``base``: mixing rows rescaled and shifted.

    Keeps the qualitative channel layout (and dead channels) so a model
    trained on the base user transfers imperfectly but fixably.
    """
    rng = np.random.default_rng(seed)
    n = base.n_channels
    gain = 1.0 + rng.normal(0.0, scale, size=(n, 1))
    A = base.A * gain + rng.normal(0.0, scale * 40.0, size=base.A.shape)
    B = base.B * gain + rng.normal(0.0, scale * 8.0, size=base.B.shape)
    b = base.b + rng.normal(0.0, scale * 80.0, size=n)
    for i in base.dead_channels:
        A[i] = 0.0
        B[i] = 0.0
    return UserProfile(
        A=A, B=B, b=b, noise_sigma=base.noise_sigma,
        dead_channels=base.dead_channels, user_id=seed,
    )


# --- kinematics ---------------------------------------------------------------


def _check_joint_ranges(q: np.ndarray, qdot: np.ndarray) -> None:
    q = np.asarray(q, float)
    qdot = np.asarray(qdot, float)
    if q.shape[-1] != 4 or qdot.shape[-1] != 4:
        raise ValueError("joint state must have 4 angles and 4 velocities")
    if np.any(q < _Q_LO - 1e-12) or np.any(q > _Q_HI + 1e-12):
        raise ValueError(f"joint angles out of range: {q}")
    if not np.all(np.isfinite(qdot)) or np.any(np.abs(qdot) > QDOT_MAX):
        raise ValueError(f"joint velocities out of range: {qdot}")


def _rot_zyx(q1, q2, q3) -> np.ndarray:
    """R = Rz(q1) @ Ry(q2) @ Rx(q3), vectorized over leading dims."""
    c1, s1 = np.cos(q1), np.sin(q1)
    c2, s2 = np.cos(q2), np.sin(q2)
    c3, s3 = np.cos(q3), np.sin(q3)
    R = np.empty(np.shape(q1) + (3, 3))
    R[..., 0, 0] = c1 * c2
    R[..., 0, 1] = c1 * s2 * s3 - s1 * c3
    R[..., 0, 2] = c1 * s2 * c3 + s1 * s3
    R[..., 1, 0] = s1 * c2
    R[..., 1, 1] = s1 * s2 * s3 + c1 * c3
    R[..., 1, 2] = s1 * s2 * c3 - c1 * s3
    R[..., 2, 0] = -s2
    R[..., 2, 1] = c2 * s3
    R[..., 2, 2] = c2 * c3
    return R


def forward_kinematics(state: JointState, geom: ArmGeometry) -> ArmPose:
    """Elbow/wrist positions for one joint state.

    The upper arm hangs along -z at q = 0; elbow flexion rotates the forearm
    about the upper arm's local x axis.
    """
    _check_joint_ranges(state.q, state.qdot)
    el, wr = _fk_arrays(np.asarray(state.q, float)[None, :], geom)
    return ArmPose(p_el=el[0], p_wr=wr[0])


def _fk_arrays(q: np.ndarray, geom: ArmGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized FK: q (N, 4) -> elbow (N, 3), wrist (N, 3)."""
    R = _rot_zyx(q[:, 0], q[:, 1], q[:, 2])
    p_el = R @ np.array([0.0, 0.0, -geom.L1])
    # forearm direction in upper-arm frame: Rx(q4) @ (0, 0, -1)
    c4, s4 = np.cos(q[:, 3]), np.sin(q[:, 3])
    local = np.stack([np.zeros_like(c4), s4 * geom.L2, -c4 * geom.L2], axis=1)
    p_wr = p_el + np.einsum("nij,nj->ni", R, local)
    return p_el, p_wr


# --- trajectory generation ------------------------------------------------------

TRAJECTORY_KINDS = ("scan", "reach", "flex_extend", "static_hold", "mixed")

# comfortable sub-ranges the generators roam in (clamping still enforces the
# hard limits afterwards)
_GEN_LO = np.array([-0.9, -1.0, -0.7, 0.15])
_GEN_HI = np.array([0.9, 0.6, 0.7, 2.3])


@dataclass(frozen=True)
class JointTrajectory:
    """Sampled joint-space trajectory: columnar (q, qdot, t)."""

    q: np.ndarray      # (N, 4)
    qdot: np.ndarray   # (N, 4)
    t: np.ndarray      # (N,) seconds

    def __len__(self) -> int:
        return self.q.shape[0]

    def __getitem__(self, i: int) -> JointState:
        return JointState(q=self.q[i], qdot=self.qdot[i], t=float(self.t[i]))


def _hermite(t: np.ndarray, t0: float, t1: float, q0, q1, v0, v1):
    """Cubic Hermite between (q0, v0) and (q1, v1); returns (q(t), qdot(t))."""
    d = t1 - t0
    s = ((t - t0) / d)[:, None]
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    q = h00 * q0 + h10 * d * v0 + h01 * q1 + h11 * d * v1
    dh00 = (6 * s**2 - 6 * s) / d
    dh10 = 3 * s**2 - 4 * s + 1
    dh01 = (-6 * s**2 + 6 * s) / d
    dh11 = 3 * s**2 - 2 * s
    qd = dh00 * q0 + dh10 * v0 + dh01 * q1 + dh11 * v1
    return q, qd


def _segment_scan(t: np.ndarray, rng: np.random.Generator):
    center = rng.uniform(_GEN_LO * 0.5, _GEN_HI * 0.5)
    q = np.tile(center, (len(t), 1))
    qd = np.zeros_like(q)
    span = (_GEN_HI - _GEN_LO) / 2.0
    for k in range(3):
        amp = rng.uniform(0.15, 0.45, size=4) * span
        omega = rng.uniform(0.4, 2.5, size=4)
        phase = rng.uniform(0.0, 2 * math.pi, size=4)
        q += amp * np.sin(omega * t[:, None] + phase)
        qd += amp * omega * np.cos(omega * t[:, None] + phase)
    return q, qd


def _segment_flex_extend(t: np.ndarray, rng: np.random.Generator):
    posture = rng.uniform(_GEN_LO, _GEN_HI)
    q = np.tile(posture, (len(t), 1))
    qd = np.zeros_like(q)
    mid = rng.uniform(0.9, 1.7)
    amp = rng.uniform(0.5, 0.9)
    omega = rng.uniform(0.8, 3.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    q[:, 3] = mid + amp * np.sin(omega * t + phase)
    qd[:, 3] = amp * omega * np.cos(omega * t + phase)
    return q, qd


def _segment_reach(t: np.ndarray, rng: np.random.Generator):
    """Hermite moves between random postures with short holds."""
    q = np.empty((len(t), 4))
    qd = np.zeros((len(t), 4))
    cur = rng.uniform(_GEN_LO, _GEN_HI)
    t_end = float(t[-1])
    t_cursor = float(t[0])
    while t_cursor < t_end + 1e-9:
        move_d = rng.uniform(0.7, 1.8)
        hold_d = rng.uniform(0.3, 1.0)
        target = rng.uniform(_GEN_LO, _GEN_HI)
        m = (t >= t_cursor) & (t < t_cursor + move_d)
        if m.any():
            q[m], qd[m] = _hermite(t[m], t_cursor, t_cursor + move_d, cur, target, 0.0, 0.0)
        h = (t >= t_cursor + move_d) & (t < t_cursor + move_d + hold_d)
        if h.any():
            q[h] = target
            qd[h] = 0.0
        cur = target
        t_cursor += move_d + hold_d
    return q, qd


def _segment_static(t: np.ndarray, rng: np.random.Generator):
    posture = rng.uniform(_GEN_LO, _GEN_HI)
    return np.tile(posture, (len(t), 1)), np.zeros((len(t), 4))


_SEGMENTS = {
    "scan": _segment_scan,
    "reach": _segment_reach,
    "flex_extend": _segment_flex_extend,
    "static_hold": _segment_static,
}


def gen_trajectory(kind: str, duration: float, rate: float = 100.0, seed: int = 0) -> JointTrajectory:
    """Generate a smooth joint trajectory of the requested flavor.

    ``mixed`` concatenates random segments of the other kinds, bridged by
    cubic blends that match angles and velocities on both sides. Angles are
    clamped to the joint limits afterwards with zero velocity where clamped.
    Deterministic per (kind, duration, rate, seed).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if kind not in TRAJECTORY_KINDS:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    rng = np.random.default_rng(seed)

    if kind != "mixed":
        q, qd = _SEGMENTS[kind](t, rng)
    else:
        q = np.empty((n, 4))
        qd = np.empty((n, 4))
        bridge = 0.6
        t_cursor = 0.0
        prev_q = prev_qd = None
        while t_cursor < duration:
            # motion-heavy mix; long static holds carry little window signal
            seg_kind = rng.choice(["scan", "reach", "flex_extend", "static_hold"],
                                  p=[0.35, 0.35, 0.2, 0.1])
            seg_d = float(rng.uniform(4.0, 8.0))
            m = (t >= t_cursor) & (t < t_cursor + seg_d)
            tm = t[m]
            if tm.size == 0:
                break
            sq, sqd = _SEGMENTS[seg_kind](tm - t_cursor, rng)
            q[m], qd[m] = sq, sqd
            if prev_q is not None:
                # overwrite the first `bridge` seconds with a Hermite blend
                # from the previous segment's endpoint state
                bm = m & (t < t_cursor + bridge)
                if bm.any() and tm.size > bm.sum():
                    j = int(bm.sum())
                    q[bm], qd[bm] = _hermite(
                        t[bm], t_cursor, t_cursor + bridge,
                        prev_q, sq[j], prev_qd, sqd[j],
                    )
            idx = np.where(m)[0]
            prev_q, prev_qd = q[idx[-1]].copy(), qd[idx[-1]].copy()
            t_cursor += seg_d

    clipped = np.clip(q, _Q_LO, _Q_HI)
    qd = np.where(clipped != q, 0.0, qd)
    qd = np.clip(qd, -QDOT_MAX, QDOT_MAX)
    return JointTrajectory(q=clipped, qdot=qd, t=t)


# --- FMG synthesis --------------------------------------------------------------


def _posture_features(q: np.ndarray) -> np.ndarray:
    """phi(q) = [sin q, cos q, q], shape (N, 12)."""
    return np.concatenate([np.sin(q), np.cos(q), q], axis=1)


def _synth_raw(
    q: np.ndarray,
    qdot: np.ndarray,
    user: UserProfile,
    sess: SessionPerturbation,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noise-free mixing + session perturbation + noise, clamped to ADC range."""
    clean = _posture_features(q) @ user.A.T + qdot @ user.B.T + user.b
    raw = sess.gain * clean + sess.offset
    if user.noise_sigma > 0:
        raw = raw + rng.normal(0.0, user.noise_sigma, size=raw.shape)
    return np.clip(np.rint(raw), 0, ADC_MAX).astype(np.uint16)


def synth_fmg(
    state: JointState,
    user: UserProfile,
    sess: SessionPerturbation,
    rng: np.random.Generator,
) -> "FMGFrame":
    """One synthetic sensor frame for one joint state."""
    _check_joint_ranges(state.q, state.qdot)
    raw = _synth_raw(np.asarray(state.q, float)[None], np.asarray(state.qdot, float)[None], user, sess, rng)
    return FMGFrame(t_ms=int(round(state.t * 1000.0)), raw=raw[0])


# --- sessions --------------------------------------------------------------------


@dataclass(frozen=True)
class FMGFrame:
    """One timestamped raw sensor reading."""

    t_ms: int
    raw: np.ndarray  # (n,) uint16 in [0, ADC_MAX]

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.ndim != 1:
            raise ValueError(f"frame must be a flat channel vector, got shape {raw.shape}")
        if np.any(raw > ADC_MAX):
            raise ValueError("frame values exceed ADC range")


@dataclass
class Session:
    """Synchronized FMG frames and pose labels, stored columnar."""

    session_id: str
    user_id: int
    seed: int
    rate_hz: float
    t_ms: np.ndarray    # (M,) int64
    fmg: np.ndarray     # (M, n) uint16
    el: np.ndarray      # (M, 3) float64, meters
    wr: np.ndarray      # (M, 3) float64, meters

    def __post_init__(self):
        m = len(self.t_ms)
        if not (len(self.fmg) == len(self.el) == len(self.wr) == m):
            raise ValueError("session columns must have equal length")
        if m > 1 and np.any(np.diff(self.t_ms) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t_ms)

    @property
    def n_channels(self) -> int:
        return self.fmg.shape[1]

    def frame(self, i: int) -> FMGFrame:
        return FMGFrame(t_ms=int(self.t_ms[i]), raw=self.fmg[i])

    def pose(self, i: int) -> ArmPose:
        return ArmPose(p_el=self.el[i], p_wr=self.wr[i])

    def select_channels(self, channels) -> "Session":
        """Copy with only the given channel columns (for sensor pruning)."""
        idx = np.asarray(sorted(channels), dtype=int)
        return Session(
            session_id=self.session_id, user_id=self.user_id, seed=self.seed,
            rate_hz=self.rate_hz, t_ms=self.t_ms, fmg=self.fmg[:, idx],
            el=self.el, wr=self.wr,
        )


def record_session(
    user: UserProfile,
    sess: SessionPerturbation,
    trajectory: JointTrajectory,
    geom: ArmGeometry,
    session_id: str = "s0",
) -> Session:
    """Run the trajectory through the sensor model and kinematics."""
    rng = np.random.default_rng(abs(sess.seed) + 1)
    raw = _synth_raw(trajectory.q, trajectory.qdot, user, sess, rng)
    el, wr = _fk_arrays(trajectory.q, geom)
    t_ms = np.rint(trajectory.t * 1000.0).astype(np.int64)
    return Session(
        session_id=session_id, user_id=user.user_id, seed=sess.seed,
        rate_hz=float(round(1.0 / (trajectory.t[1] - trajectory.t[0]))) if len(trajectory) > 1 else 100.0,
        t_ms=t_ms, fmg=raw, el=el, wr=wr,
    )


def generate_sessions(
    n_sessions: int,
    samples: int,
    user: UserProfile,
    geom: ArmGeometry,
    base_seed: int,
    kind: str = "mixed",
    rate: float = 100.0,
    id_prefix: str = "train",
) -> list[Session]:
    """Convenience batch: one fresh perturbation + trajectory per session."""
    out = []
    for k in range(n_sessions):
        seed = base_seed * 10_000 + k
        pert = SessionPerturbation.from_seed(seed, n_channels=user.n_channels)
        traj = gen_trajectory(kind, duration=samples / rate, rate=rate, seed=seed + 5_000)
        out.append(record_session(user, pert, traj, geom, session_id=f"{id_prefix}-{k:03d}"))
    return out


# --- session files ----------------------------------------------------------------


def save_session(session: Session, path: str | Path) -> None:
    """JSON-lines: header record, then one record per frame."""
    path = Path(path)
    with path.open("w") as f:
        header = {
            "session_id": session.session_id,
            "user_id": session.user_id,
            "seed": session.seed,
            "rate_hz": session.rate_hz,
        }
        f.write(json.dumps(header) + "\n")
        for i in range(len(session)):
            rec = {
                "t_ms": int(session.t_ms[i]),
                "fmg": [int(v) for v in session.fmg[i]],
                "el": [float(v) for v in session.el[i]],
                "wr": [float(v) for v in session.wr[i]],
            }
            f.write(json.dumps(rec) + "\n")


def load_session(path: str | Path) -> Session:
    path = Path(path)
    with path.open() as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty session file")
    header = json.loads(lines[0])
    for key in ("session_id", "user_id", "seed", "rate_hz"):
        if key not in header:
            raise ValueError(f"{path}: session header missing {key!r}")
    t_ms, fmg, el, wr = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        t_ms.append(rec["t_ms"])
        fmg.append(rec["fmg"])
        el.append(rec["el"])
        wr.append(rec["wr"])
    return Session(
        session_id=header["session_id"], user_id=header["user_id"],
        seed=header["seed"], rate_hz=header["rate_hz"],
        t_ms=np.asarray(t_ms, dtype=np.int64),
        fmg=np.asarray(fmg, dtype=np.uint16),
        el=np.asarray(el, dtype=np.float64),
        wr=np.asarray(wr, dtype=np.float64),
    )
