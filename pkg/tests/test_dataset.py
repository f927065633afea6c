import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmgpose import dataset as ds
from fmgpose.dataset import (DatasetLoadError, Normalizer, build_sequences,
                             fit_normalizer, load_dataset, sample_sessions,
                             save_dataset, window_count)
from fmgpose.sim import Session


def make_session(m, session_id="s0", n=32, seed=0, rate=100.0):
    rng = np.random.default_rng(seed)
    return Session(
        session_id=session_id, user_id=0, seed=seed, rate_hz=rate,
        t_ms=np.arange(m, dtype=np.int64) * 10,
        fmg=rng.integers(0, 1024, size=(m, n)).astype(np.uint16),
        el=rng.normal(0, 0.2, (m, 3)),
        wr=rng.normal(0, 0.3, (m, 3)),
    )


class TestNormalizer:
    def test_constant_channel_gets_unit_std(self):
        s = make_session(50)
        s.fmg[:, 5] = 100
        norm = fit_normalizer([s])
        assert norm.mean[5] == 100.0
        assert norm.std[5] == 1.0

    def test_two_frame_mean(self):
        s = make_session(2)
        s.fmg[0, 0] = 0
        s.fmg[1, 0] = 10
        norm = fit_normalizer([s])
        assert norm.mean[0] == 5.0

    def test_refit_on_normalized_is_standard(self):
        sessions = [make_session(400, f"s{i}", seed=i) for i in range(3)]
        norm = fit_normalizer(sessions)
        z = np.concatenate([norm.apply(s.fmg) for s in sessions])
        assert np.abs(z.mean(axis=0)).max() < 1e-6
        assert np.abs(z.std(axis=0) - 1.0).max() < 1e-6

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_normalizer([])


class TestBuildSequences:
    @pytest.mark.parametrize("m,h,step,expected", [
        (128, 128, 64, 1),
        (256, 128, 64, 3),
        (4000, 128, 1, 3873),
    ])
    def test_window_counts(self, m, h, step, expected):
        norm = fit_normalizer([make_session(m)])
        samples = build_sequences([make_session(m)], H=h, step=step, normalizer=norm)
        assert len(samples) == expected
        assert window_count(m, h, step) == expected

    def test_short_session_skipped_with_warning(self, caplog):
        sessions = [make_session(50, "short"), make_session(200, "long")]
        norm = fit_normalizer(sessions)
        with caplog.at_level("WARNING"):
            samples = build_sequences(sessions, H=128, step=64, normalizer=norm)
        assert len(samples) == window_count(200, 128, 64)
        assert any("short" in r.message for r in caplog.records)

    def test_label_is_last_frame_pose(self):
        s = make_session(300)
        norm = fit_normalizer([s])
        samples = build_sequences([s], H=128, step=64, normalizer=norm)
        for k, sample in enumerate(samples):
            last = k * 64 + 127
            np.testing.assert_array_equal(sample.label.p_el, s.el[last])
            np.testing.assert_array_equal(sample.label.p_wr, s.wr[last])
            assert sample.t_ms == s.t_ms[last]

    def test_windows_never_cross_sessions(self):
        # plant a sentinel value in the first frame of the second session;
        # no window from the first session may contain it
        s1, s2 = make_session(200, "a", seed=1), make_session(200, "b", seed=2)
        s2.fmg[:, :] = 1023
        s1.fmg[:, :] = 0
        norm = Normalizer(mean=np.full(32, 511.5), std=np.full(32, 1.0))
        samples = build_sequences([s1, s2], H=64, step=1, normalizer=norm)
        per_session = window_count(200, 64, 1)
        assert len(samples) == 2 * per_session
        for sample in samples:
            vals = np.unique(sample.window)
            assert len(vals) == 1, "window mixes frames from both sessions"

    def test_windows_are_normalized(self):
        s = make_session(300)
        norm = fit_normalizer([s])
        samples = build_sequences([s], H=128, step=128, normalizer=norm)
        expected = norm.apply(s.fmg[:128])
        np.testing.assert_array_equal(samples[0].window, expected)

    def test_bad_args(self):
        s = make_session(100)
        norm = fit_normalizer([s])
        with pytest.raises(ValueError):
            build_sequences([s], H=1, step=1, normalizer=norm)
        with pytest.raises(ValueError):
            build_sequences([s], H=10, step=0, normalizer=norm)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 300), st.integers(2, 300), st.integers(1, 100))
def test_window_count_matches_enumeration(m, h, step):
    brute = 0
    start = 0
    while start + h <= m:
        brute += 1
        start += step
    assert window_count(m, h, step) == brute


class TestSampleSessions:
    def setup_method(self):
        self.sessions = [make_session(10, f"s{i}", seed=i) for i in range(8)]

    def test_full_set(self):
        out = sample_sessions(self.sessions, 8, seed=0)
        assert {s.session_id for s in out} == {s.session_id for s in self.sessions}

    def test_deterministic(self):
        a = sample_sessions(self.sessions, 3, seed=42)
        b = sample_sessions(self.sessions, 3, seed=42)
        assert [s.session_id for s in a] == [s.session_id for s in b]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            sample_sessions(self.sessions, 0, seed=0)
        with pytest.raises(ValueError):
            sample_sessions(self.sessions, 9, seed=0)

    def test_uniform_frequency(self):
        # K=1 draws: each session within 3 sigma of the binomial expectation
        n_draws = 10_000
        counts = np.zeros(8)
        for seed in range(n_draws):
            picked = sample_sessions(self.sessions, 1, seed=seed)[0]
            counts[int(picked.session_id[1:])] += 1
        p = 1.0 / 8.0
        sigma = np.sqrt(n_draws * p * (1 - p))
        assert np.all(np.abs(counts - n_draws * p) <= 3 * sigma)


class TestDatasetFile:
    def _build(self, tmp_path, m=300, h=64, step=16):
        s = make_session(m)
        norm = fit_normalizer([s])
        samples = build_sequences([s], H=h, step=step, normalizer=norm)
        path = tmp_path / "d.fmgd"
        save_dataset(samples, norm, path, H=h, step=step)
        return samples, norm, path

    def test_round_trip_bit_identical(self, tmp_path):
        samples, norm, path = self._build(tmp_path)
        loaded, norm2, header = load_dataset(path)
        assert len(loaded) == len(samples)
        np.testing.assert_array_equal(norm2.mean, norm.mean)
        np.testing.assert_array_equal(norm2.std, norm.std)
        for a, b in zip(samples, loaded):
            np.testing.assert_array_equal(a.window, b.window)
            np.testing.assert_array_equal(a.label.as_vector(), b.label.as_vector())
            assert a.t_ms == b.t_ms

    def test_truncated_file_fails_loud(self, tmp_path):
        _, _, path = self._build(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 37])
        with pytest.raises(DatasetLoadError, match="truncated"):
            load_dataset(path)

    def test_wrong_channel_count_names_record(self, tmp_path):
        # craft a file whose record 0 window has 31 channels
        h = 8
        norm = Normalizer(mean=np.zeros(32), std=np.ones(32))
        import json
        header = {
            "format_version": 1, "H": h, "step": 1, "count": 1, "n_channels": 32,
            "normalizer": {"mean": norm.mean.tolist(), "std": norm.std.tolist()},
            "label_fields": [],
        }
        head = json.dumps(header).encode()
        path = tmp_path / "bad.fmgd"
        with path.open("wb") as f:
            f.write(b"FMGD")
            f.write(struct.pack("<I", len(head)))
            f.write(head)
            win = np.zeros((h, 31), dtype="<f4")
            f.write(struct.pack("<I", win.nbytes))
            f.write(win.tobytes())
            lab = np.zeros(7, dtype="<f8")
            f.write(struct.pack("<I", lab.nbytes))
            f.write(lab.tobytes())
        with pytest.raises(DatasetLoadError, match="record 0.*31 channels"):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "not.fmgd"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(DatasetLoadError, match="magic"):
            load_dataset(path)

    def test_version_mismatch(self, tmp_path):
        _, _, path = self._build(tmp_path)
        blob = bytearray(path.read_bytes())
        # header starts at byte 8; bump the version inside the JSON
        text = blob[8:].decode("utf-8", errors="ignore")
        text = text.replace('"format_version": 1', '"format_version": 9', 1)
        path.write_bytes(blob[:8] + text.encode("utf-8", errors="ignore"))
        with pytest.raises(DatasetLoadError, match="format_version"):
            load_dataset(path)
