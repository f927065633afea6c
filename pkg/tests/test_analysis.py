import hashlib

import numpy as np
import pytest

from fmgpose import analysis as an
from fmgpose import sim, training as tr
from fmgpose.analysis import ImportanceReport, permutation_importance, prune_and_retrain
from fmgpose.dataset import build_sequences, fit_normalizer, stack_windows
from fmgpose.models import DLinearConfig, DLinearRegressor, TransformerConfig, TransformerRegressor

H, C = 16, 8


def tiny_model(seed=0):
    return TransformerRegressor(TransformerConfig(
        n_channels=C, window=H, d_model=8, n_layers=1, n_heads=2, d_ff=16,
        head_hidden=(8, 4), dropout_ff=0.0, dropout_attn=0.0), seed=seed)


def small_world(n_train=3, n_test=1, samples=400):
    user = sim.make_user_profile(0, n_channels=C, dead_channels=(1, 2))
    geom = sim.ArmGeometry()
    train = sim.generate_sessions(n_train, samples, user, geom, base_seed=0)
    test = sim.generate_sessions(n_test, samples, user, geom, base_seed=90, id_prefix="test")
    norm = fit_normalizer(train)
    return user, geom, train, test, norm


class TestScoreArithmetic:
    def test_equal_errors_zero_score(self):
        r = ImportanceReport(scores_pct=np.zeros(4), repeats=1,
                             base_error_mm=50.0, raw_errors_mm=np.full((4, 1), 50.0))
        recomputed = (r.raw_errors_mm - r.base_error_mm) / r.base_error_mm * 100.0
        np.testing.assert_array_equal(recomputed.mean(axis=1), 0.0)

    def test_doubled_error_is_hundred_percent(self):
        raw = np.full((2, 3), 100.0)
        scores = ((raw - 50.0) / 50.0 * 100.0).mean(axis=1)
        np.testing.assert_array_equal(scores, 100.0)

    def test_scores_reproducible_from_raw_errors(self):
        user, geom, train, test, norm = small_world()
        samples = build_sequences(test, H=H, step=8, normalizer=norm)
        model = tiny_model()
        report = permutation_importance(model, samples, repeats=2, seed=0)
        recomputed = ((report.raw_errors_mm - report.base_error_mm)
                      / report.base_error_mm * 100.0).mean(axis=1)
        np.testing.assert_allclose(report.scores_pct, recomputed, rtol=1e-12)


class TestPermutation:
    def test_ignored_channel_scores_zero(self):
        # zero out every first-layer weight for channel 3: the model cannot
        # see it, so permuting it changes nothing
        user, geom, train, test, norm = small_world()
        samples = build_sequences(test, H=H, step=8, normalizer=norm)
        model = tiny_model()
        model.params()["embed.w"].data[3, :] = 0.0
        report = permutation_importance(model, samples, repeats=3, seed=1)
        assert abs(report.scores_pct[3]) < 0.5

    def test_other_channels_untouched(self):
        user, geom, train, test, norm = small_world()
        samples = build_sequences(test, H=H, step=8, normalizer=norm)
        x, _ = stack_windows(samples)
        checks = {}

        class Spy:
            arch = "spy"

            def forward(self, xb, train=False, **kw):
                from fmgpose.models import ModelOutput
                from fmgpose.autodiff import Tensor
                b = len(np.asarray(xb))
                return ModelOutput(p_el=Tensor(np.zeros((b, 3), dtype=np.float32)),
                                   p_wr=Tensor(np.zeros((b, 3), dtype=np.float32)))

        report = permutation_importance(Spy(), samples, repeats=1, seed=2)
        # a constant-output model is unaffected by any permutation
        np.testing.assert_allclose(report.scores_pct, 0.0, atol=1e-9)

    def test_permutation_preserves_channel_content(self):
        # the permuted dataset is a reordering: multiset of windows per channel
        # unchanged (guards against accidental overwrite of other channels)
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (10, H, C)).astype(np.float32)
        before = [hashlib.sha1(np.sort(x[:, :, i], axis=0).tobytes()).hexdigest()
                  for i in range(C)]
        perm = rng.permutation(10)
        x[:, :, 4] = x[perm, :, 4]
        after = [hashlib.sha1(np.sort(x[:, :, i], axis=0).tobytes()).hexdigest()
                 for i in range(C)]
        assert before == after

    def test_dead_channels_score_below_live_ones_after_training(self):
        user, geom, train, test, norm = small_world(n_train=4, samples=800)
        train_samples = build_sequences(train, H=H, step=4, normalizer=norm)
        test_samples = build_sequences(test, H=H, step=8, normalizer=norm)
        model = tiny_model(seed=3)
        cfg = tr.TrainConfig(max_epochs=30, patience=50, seed=0)
        tr.train_supervised(model, train_samples[:-60], train_samples[-60:], cfg)
        report = permutation_importance(model, test_samples, repeats=3, seed=3)
        best_live = max(report.scores_pct[i] for i in range(C)
                        if i not in user.dead_channels)
        for dead in user.dead_channels:
            assert report.scores_pct[dead] < best_live

    def test_bad_repeats(self):
        with pytest.raises(ValueError):
            permutation_importance(tiny_model(), [], repeats=0)


class TestRetainedSet:
    def test_threshold_rule(self):
        scores = np.array([0.5, 2.5, 2.49, 10.0, -1.0])
        r = ImportanceReport(scores_pct=scores, repeats=1, base_error_mm=1.0,
                             raw_errors_mm=np.zeros((5, 1)))
        assert r.retained(2.5) == [1, 3]
        assert r.retained(0.0) == [0, 1, 2, 3]

    def test_published_reference_profile_keeps_eleven_at_2p5(self):
        # importance profile reported for the physical 32-sensor device:
        # eleven sensors exceed the 2.5% threshold
        scores = np.array([
            1.39, 4.93, 12.82, 0.99, 3.37, 7.88, 0.5, 5.88,
            9.52, 4.94, 0.89, 1.25, 0.07, 0.01, 0.66, 1.58,
            0.99, 2.36, 1.63, 6.49, 8.23, 1.07, 0.94, 4.65,
            0.62, 1.18, 1.07, 1.16, 1.11, 0.91, 0.49, 13.35,
        ])
        r = ImportanceReport(scores_pct=scores, repeats=1, base_error_mm=1.0,
                             raw_errors_mm=np.zeros((32, 1)))
        assert len(r.retained(2.5)) == 11
        # near-zero scores sit on sensors 13 and 14 (1-indexed)
        assert scores[12] < 0.1 and scores[13] < 0.1


class TestPruneAndRetrain:
    def test_threshold_zero_keeps_all(self):
        user, geom, train, test, norm = small_world(samples=500)
        scores = np.ones(C)
        report = ImportanceReport(scores_pct=scores, repeats=1, base_error_mm=1.0,
                                  raw_errors_mm=np.zeros((C, 1)))
        cfg = tr.TrainConfig(max_epochs=2, patience=5, seed=0)
        kwargs = dict(arch="dlinear", kernel=5)
        result = prune_and_retrain(train, test, report, threshold=0.0,
                                   train_cfg=cfg, H=H, test_step=8,
                                   model_kwargs=kwargs)
        assert result.retained == list(range(C))

    def test_empty_retained_rejected(self):
        report = ImportanceReport(scores_pct=np.zeros(C), repeats=1,
                                  base_error_mm=1.0, raw_errors_mm=np.zeros((C, 1)))
        with pytest.raises(ValueError, match="retains no sensors"):
            prune_and_retrain([], [], report, threshold=50.0,
                              train_cfg=tr.TrainConfig(), H=H)

    def test_retrained_model_has_narrower_input(self):
        user, geom, train, test, norm = small_world(samples=500)
        scores = np.zeros(C)
        scores[[0, 3, 5, 6, 7]] = 5.0
        report = ImportanceReport(scores_pct=scores, repeats=1, base_error_mm=1.0,
                                  raw_errors_mm=np.zeros((C, 1)))
        cfg = tr.TrainConfig(max_epochs=2, patience=5, seed=0)
        result = prune_and_retrain(train, test, report, threshold=2.0,
                                   train_cfg=cfg, H=H, test_step=8,
                                   model_kwargs=dict(arch="dlinear", kernel=5))
        assert result.retained == [0, 3, 5, 6, 7]
        assert np.isfinite(result.wrist_rmse_mm)

    def test_csv_writers(self, tmp_path):
        report = ImportanceReport(scores_pct=np.array([1.0, 2.0]), repeats=2,
                                  base_error_mm=10.0,
                                  raw_errors_mm=np.array([[10.5, 11.0], [12.0, 12.4]]))
        an.write_importance_csv(report, tmp_path / "imp.csv")
        lines = (tmp_path / "imp.csv").read_text().splitlines()
        assert lines[0] == "sensor_index,score_pct,stderr"
        assert len(lines) == 3
        res = an.PruneResult(threshold_pct=0.5, retained=[0, 1],
                             elbow_rmse_mm=1.0, wrist_rmse_mm=2.0,
                             elbow_mean_mm=0.9, wrist_mean_mm=1.8)
        an.write_prune_csv([res], tmp_path / "prune.csv")
        lines = (tmp_path / "prune.csv").read_text().splitlines()
        assert lines[1].startswith("0.50,2,")
