import numpy as np
import pytest

from fmgpose import sim, training as tr
from fmgpose.autodiff import Tensor
from fmgpose.dataset import build_sequences, fit_normalizer
from fmgpose.models import TransformerConfig, TransformerRegressor, build_model
from fmgpose.sim import ArmPose
from fmgpose.dataset import SequenceSample
from fmgpose.training import (EvalReport, TrainConfig, evaluate, fine_tune,
                              pose_loss, pretrain, train_supervised)

H, C = 16, 6


def tiny_model(seed=0, **kw):
    cfg = dict(n_channels=C, window=H, d_model=8, n_layers=1, n_heads=2,
               d_ff=16, head_hidden=(8, 4), dropout_ff=0.1, dropout_attn=0.1)
    cfg.update(kw)
    return TransformerRegressor(TransformerConfig(**cfg), seed=seed)


def make_samples(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        w = rng.normal(0, 1, (H, C)).astype(np.float32)
        # pose depends linearly on window statistics: learnable quickly
        feats = np.concatenate([w.mean(axis=0), w[-1]])
        el = 0.1 * feats[:3] - 0.05 * feats[3:6]
        wr = el + 0.1 * feats[6:9]
        out.append(SequenceSample(window=w, label=ArmPose(p_el=el, p_wr=wr), t_ms=i * 10))
    return out


class TestPoseLoss:
    def test_perfect_prediction_zero_loss(self):
        y = np.random.default_rng(0).normal(0, 1, (4, 6)).astype(np.float32)
        loss = pose_loss(Tensor(y[:, :3]), Tensor(y[:, 3:]), y)
        assert float(loss.data) == 0.0

    def test_single_sample_arithmetic(self):
        # elbow off by (0.1, 0, 0) m, wrist exact: loss = 0.01
        y = np.zeros((1, 6), dtype=np.float32)
        p_el = Tensor(np.array([[0.1, 0.0, 0.0]], dtype=np.float32))
        p_wr = Tensor(np.zeros((1, 3), dtype=np.float32))
        loss = pose_loss(p_el, p_wr, y)
        assert float(loss.data) == pytest.approx(0.01, rel=1e-6)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            b = int(rng.integers(1, 48))
            pred = rng.normal(0, 0.4, (b, 6)).astype(np.float32)
            target = rng.normal(0, 0.4, (b, 6)).astype(np.float32)
            loss = float(pose_loss(Tensor(pred[:, :3]), Tensor(pred[:, 3:]), target).data)
            # independent scalar loop in python floats
            acc = 0.0
            for i in range(b):
                s = 0.0
                for j in range(6):
                    d = float(pred[i, j]) - float(target[i, j])
                    s += d * d
                acc += s
            oracle = acc / b
            assert abs(loss - oracle) / abs(oracle) < 1e-6


class TestPretrain:
    def test_pose_heads_untouched(self):
        model = tiny_model()
        samples = make_samples(40)
        before = {k: p.data.copy() for k, p in model.params().items()
                  if k.startswith(("head_el.", "head_wr."))}
        pretrain(model, samples, TrainConfig(max_epochs=3, phase="pretrain", seed=0))
        for k, old in before.items():
            np.testing.assert_array_equal(model.params()[k].data, old)

    def test_pose_head_grads_exactly_zero(self):
        from fmgpose import autodiff as ad
        from fmgpose.autodiff import Tape
        from fmgpose.dataset import stack_windows
        model = tiny_model()
        x, _ = stack_windows(make_samples(8))
        with Tape() as tape:
            out = model.forward(x, train=False)
            loss = tr.reconstruction_loss(out.x_recon, x)
        ad.zero_grads(model.param_list())
        tape.backward(loss)
        for k, p in model.params().items():
            if k.startswith(("head_el.", "head_wr.")):
                assert np.all(p.grad == 0.0), k

    def test_loss_strictly_decreases_over_first_epochs(self):
        model = tiny_model(seed=1)
        samples = make_samples(60, seed=2)
        info = pretrain(model, samples, TrainConfig(max_epochs=5, patience=50,
                                                    phase="pretrain", seed=0))
        losses = [h["train_loss"] for h in info["history"]]
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_identity_reconstruction_zero_loss(self):
        x = np.random.default_rng(0).normal(0, 1, (4, H, C)).astype(np.float32)
        loss = tr.reconstruction_loss(Tensor(x), x)
        assert float(loss.data) == 0.0

    def test_wrong_phase_rejected(self):
        with pytest.raises(ValueError, match="phase"):
            pretrain(tiny_model(), make_samples(10), TrainConfig(phase="supervised"))

    def test_model_without_recon_head_rejected(self):
        model = build_model("fcnn", n_channels=C, window=H, hidden=(8,))
        with pytest.raises(ValueError, match="reconstruction"):
            pretrain(model, make_samples(10), TrainConfig(phase="pretrain"))


class TestSupervised:
    def test_learns_synthetic_mapping(self):
        model = tiny_model(seed=3)
        samples = make_samples(200, seed=4)
        train_s, val_s = samples[:160], samples[160:]
        cfg = TrainConfig(max_epochs=30, patience=30, seed=0)
        info = train_supervised(model, train_s, val_s, cfg)
        first = info["history"][0]["val_loss"]
        assert info["best_val_loss"] < 0.3 * first

    def test_early_stopping_restores_best(self):
        model = tiny_model(seed=5)
        samples = make_samples(80, seed=6)
        cfg = TrainConfig(max_epochs=12, patience=2, seed=0)
        info = train_supervised(model, samples[:60], samples[60:], cfg)
        from fmgpose.dataset import stack_windows
        x, y = stack_windows(samples[60:])
        final_val = tr._eval_loss(model, x, y)
        assert final_val == pytest.approx(info["best_val_loss"], rel=1e-5)
        observed = [h["val_loss"] for h in info["history"]]
        assert info["best_val_loss"] == pytest.approx(min(observed), rel=1e-7)

    def test_reproducible_bit_for_bit(self):
        samples = make_samples(50, seed=7)

        def run():
            model = tiny_model(seed=8)
            train_supervised(model, samples[:40], samples[40:],
                             TrainConfig(max_epochs=3, seed=9))
            return model.state_arrays()

        s1, s2 = run(), run()
        for k in s1:
            np.testing.assert_array_equal(s1[k], s2[k])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_supervised(tiny_model(), [], None, TrainConfig())


class TestEvaluate:
    def test_zero_error_zero_rmse(self):
        samples = make_samples(10)

        class Perfect:
            arch = "oracle"

            def forward(self, x, train=False, **kw):
                idx = [i for i, s in enumerate(samples)
                       if np.array_equal(s.window, np.asarray(x)[0])]
                y = np.stack([s.label.as_vector() for s in samples])[idx[0]:idx[0] + len(x)]
                from fmgpose.models import ModelOutput
                return ModelOutput(p_el=Tensor(y[:, :3]), p_wr=Tensor(y[:, 3:]))

        report = evaluate(Perfect(), samples, batch_size=len(samples), timing_calls=0)
        assert report.elbow_rmse_mm == 0.0
        assert report.wrist_rmse_mm == 0.0

    def test_single_sample_offset_rmse(self):
        s = make_samples(1)[0]

        class Offset:
            arch = "oracle"

            def forward(self, x, train=False, **kw):
                from fmgpose.models import ModelOutput
                y = s.label.as_vector()[None].astype(np.float32)
                wr = y[:, 3:] + np.array([0.12, 0.0, 0.0], dtype=np.float32)
                return ModelOutput(p_el=Tensor(y[:, :3]), p_wr=Tensor(wr))

        report = evaluate(Offset(), [s], timing_calls=0)
        assert report.wrist_rmse_mm == pytest.approx(120.0, rel=1e-4)
        assert report.elbow_rmse_mm == pytest.approx(0.0, abs=1e-9)

    def test_trace_lengths(self):
        model = tiny_model()
        samples = make_samples(25)
        report = evaluate(model, samples, timing_calls=0)
        assert len(report.errors_mm) == 25
        assert report.truth.shape == (25, 6)

    def test_trace_csv(self, tmp_path):
        model = tiny_model()
        report = evaluate(model, make_samples(5), timing_calls=0)
        path = tmp_path / "trace.csv"
        tr.write_trace_csv(report, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("t_ms,el_x")
        assert len(lines) == 6


class TestFineTune:
    def test_frozen_params_bit_identical(self):
        model = tiny_model(seed=10)
        samples = make_samples(60, seed=11)
        trainable = set(model.default_finetune_params())
        before = {k: p.data.copy() for k, p in model.params().items()}
        fine_tune(model, samples, TrainConfig(lr=1e-5, max_epochs=3,
                                              phase="finetune", seed=0))
        for k, p in model.params().items():
            if k in trainable:
                continue
            np.testing.assert_array_equal(p.data, before[k], err_msg=k)

    def test_only_final_head_layers_update(self):
        model = tiny_model(seed=12)
        samples = make_samples(60, seed=13)
        before = {k: p.data.copy() for k, p in model.params().items()}
        fine_tune(model, samples, TrainConfig(lr=1e-3, max_epochs=5,
                                              phase="finetune", seed=0))
        changed = {k for k, p in model.params().items()
                   if not np.array_equal(p.data, before[k])}
        assert changed <= set(model.default_finetune_params())
        assert changed, "fine-tune changed nothing"

    def test_unknown_trainable_rejected(self):
        with pytest.raises(ValueError, match="unknown trainable"):
            fine_tune(tiny_model(), make_samples(20),
                      TrainConfig(phase="finetune"), trainable_names=["nope.w"])


class TestScalingStudy:
    def test_rows_and_determinism(self):
        user = sim.make_user_profile(0, n_channels=C, dead_channels=(1, 2))
        geom = sim.ArmGeometry()
        sessions = sim.generate_sessions(3, 300, user, geom, base_seed=0)
        test_sessions = sim.generate_sessions(1, 300, user, geom, base_seed=77)
        cfg = TrainConfig(max_epochs=2, seed=0)
        kwargs = dict(arch="dlinear", n_channels=C, window=H)
        rows = tr.scaling_study(sessions, test_sessions, [1, 3], repeats=2,
                                train_cfg=cfg, H=H, test_step=8,
                                model_kwargs=kwargs, base_seed=1)
        assert [(r["K"], r["repeat"]) for r in rows] == [(1, 0), (1, 1), (3, 0), (3, 1)]
        rows2 = tr.scaling_study(sessions, test_sessions, [1, 3], repeats=2,
                                 train_cfg=cfg, H=H, test_step=8,
                                 model_kwargs=kwargs, base_seed=1)
        assert rows == rows2

    def test_k_exceeding_sessions_rejected(self):
        user = sim.make_user_profile(0, n_channels=C, dead_channels=(1, 2))
        sessions = sim.generate_sessions(2, 100, user, sim.ArmGeometry(), base_seed=0)
        with pytest.raises(ValueError, match="exceeds"):
            tr.scaling_study(sessions, sessions, [5], 1, TrainConfig(), H=H)


def test_mean_predictor_rmse_zero_when_labels_constant():
    samples = make_samples(10)
    const = [SequenceSample(window=s.window, label=samples[0].label, t_ms=s.t_ms)
             for s in samples]
    el, wr = tr.mean_predictor_rmse(const, const)
    assert el == pytest.approx(0.0, abs=1e-9)
    assert wr == pytest.approx(0.0, abs=1e-9)
