import copy
import json

import numpy as np
import pytest
import torch

from secos.adapter_net import checkpoint_bytes
from secos.encoders import SyntheticEncoderConfig
from secos.exceptions import ConfigError
from secos.experiments import BenchmarkConfig, SyntheticBenchmark
from secos.trainer import (
    StepBatch,
    TrainConfig,
    TrainState,
    lr_factors,
    make_optimizer,
    run_training,
    train_step,
)

from oracles import log_sum_exp_loss
from toys import toy_class_embeds, toy_inputs, toy_network


def identity_augment(x, view, rng):
    return x


def state_for(net, embeds, config, teacher=None):
    return TrainState(
        model=net, optimizer=make_optimizer(net, config), class_embeds=embeds,
        augment=identity_augment, teacher_proba=teacher, rng=np.random.default_rng(0),
        ema_model=copy.deepcopy(net) if config.teacher_mode == "ema" else None,
    )


def empty(d=8, t=3):
    return np.zeros((0, t, d))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.lr, c.weight_decay) == (100, 32, 1e-4, 1e-5)
        assert (c.alpha, c.beta, c.phi, c.adapter_dim, c.logit_scale) == (0.6, 0.95, 50, 10, 100.0)

    @pytest.mark.parametrize("bad", [{"batch_size": 0}, {"lr": -1}, {"teacher_mode": "x"},
                                     {"alpha": 0}, {"phi": 101}, {"schedule": "cosine"}])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_round_trip(self):
        c = TrainConfig(epochs=3, teacher_mode="ema")
        assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


class TestSchedule:
    def test_linear(self):
        f = lr_factors(TrainConfig(epochs=100))
        assert f[0] == 1.0 and f[-1] == pytest.approx(0.1) and len(f) == 100
        assert all(a > b for a, b in zip(f, f[1:]))

    def test_explicit_list(self):
        assert lr_factors(TrainConfig(epochs=2, schedule=[1.0, 0.5, 0.2])) == [1.0, 0.5]
        with pytest.raises(ConfigError):
            lr_factors(TrainConfig(epochs=4, schedule=[1.0]))


class TestTrainStep:
    def test_hand_computed_total(self):
        net = toy_network()
        e = toy_class_embeds()
        cfg = TrainConfig(use_batch=False, lr=0.0)
        x_l, x_n = toy_inputs(1, seed=3), toy_inputs(1, seed=4)
        batch = StepBatch(x_l.numpy(), np.array([1]), x_n.numpy(), np.array([4]), empty(), [])
        e_np = e.numpy()
        with torch.no_grad():
            v_l, v_n = net(x_l)[0].numpy(), net(x_n)[0].numpy()
        want = 2 * log_sum_exp_loss(v_l, e_np, 1, 100.0) + 2 * log_sum_exp_loss(v_n, e_np, 4, 100.0)
        m = train_step(state_for(net, e, cfg), batch, cfg)
        assert m["loss"] == pytest.approx(want, abs=1e-10)
        assert m["n_bp"] == 0 and m["loss_P"] == 0.0

    def test_zero_lr_keeps_parameters(self):
        net = toy_network()
        before = checkpoint_bytes(net)
        cfg = TrainConfig(lr=0.0, weight_decay=0.0, use_batch=False)
        batch = StepBatch(toy_inputs(2).numpy(), np.array([0, 1]), empty(), np.zeros(0, int), empty(), [])
        train_step(state_for(net, toy_class_embeds(), cfg), batch, cfg)
        assert checkpoint_bytes(net) == before

    def test_all_empty_skips(self):
        net = toy_network()
        before = checkpoint_bytes(net)
        cfg = TrainConfig(use_batch=False)
        batch = StepBatch(empty(), np.zeros(0, int), empty(), np.zeros(0, int), empty(), [])
        with pytest.warns(RuntimeWarning):
            m = train_step(state_for(net, toy_class_embeds(), cfg), batch, cfg)
        assert m["skipped"] and checkpoint_bytes(net) == before

    def test_batch_pseudo_labels_come_from_teacher(self):
        # 20 rows, 4 per class with peaks 0.90..0.93: theta_c is the 0.92 row,
        # tau = 0.92, so exactly the five 0.93 rows are recaptured
        net = toy_network()
        e = toy_class_embeds()
        conf = np.zeros((20, 5))
        for i in range(20):
            c, j = i % 5, i // 5
            conf[i] = (1 - (0.90 + 0.01 * j)) / 4
            conf[i, c] = 0.90 + 0.01 * j
        seen = {}

        def teacher(x):
            seen["rows"] = len(x)
            return conf

        ids = [f"u{i:02d}" for i in range(20)]
        truth = {sid: i % 5 for i, sid in enumerate(ids)}
        truth["u15"] = 1  # one wrong pseudo label among the five kept rows
        cfg = TrainConfig(use_global=False)
        batch = StepBatch(empty(), np.zeros(0, int), empty(), np.zeros(0, int),
                          toy_inputs(20).numpy(), ids, u_truth=truth)
        m = train_step(state_for(net, e, cfg, teacher), batch, cfg)
        assert seen["rows"] == 20
        assert m["n_bp"] == 5 and m["precision_bp"] == pytest.approx(0.8)

    def test_ema_two_step_trace(self):
        net = toy_network()
        e = toy_class_embeds()
        d = 0.9
        cfg = TrainConfig(teacher_mode="ema", ema_decay=d, use_batch=False, lr=1e-2)
        state = state_for(net, e, cfg)
        batch = StepBatch(toy_inputs(3).numpy(), np.array([0, 1, 2]), empty(), np.zeros(0, int), empty(), [])
        history = [{n: p.detach().clone() for n, p in net.named_trainable()}]
        for _ in range(2):
            train_step(state, batch, cfg)
            history.append({n: p.detach().clone() for n, p in net.named_trainable()})
        for n, p in state.ema_model.named_trainable():
            want = d * d * history[0][n] + d * (1 - d) * history[1][n] + (1 - d) * history[2][n]
            assert torch.allclose(p, want, atol=1e-14, rtol=0)


def small_bench(**enc):
    return SyntheticBenchmark(BenchmarkConfig(
        n_classes=4, samples_per_class=24, test_per_class=4,
        encoder=SyntheticEncoderConfig(dim=16, **enc),
    ))


class TestRunTraining:
    def test_epochs_zero(self):
        b = small_bench()
        res = run_training(b.split, b.encoder, b.class_embeds, TrainConfig(epochs=0))
        assert res.log == []
        fresh = run_training(b.split, b.encoder, b.class_embeds, TrainConfig(epochs=0))
        assert checkpoint_bytes(res.model) == checkpoint_bytes(fresh.model)

    def test_deterministic_and_logged(self, tmp_path):
        b = small_bench()
        cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3)
        r1 = run_training(b.split, b.encoder, b.class_embeds, cfg, log_path=tmp_path / "a.jsonl")
        r2 = run_training(b.split, b.encoder, b.class_embeds, cfg, log_path=tmp_path / "b.jsonl")
        assert checkpoint_bytes(r1.model) == checkpoint_bytes(r2.model)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        recs = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert len(recs) == len(r1.log) > 0
        assert all(r["n_bp"] <= r["n_bu"] for r in recs)
        assert {"epoch", "step", "loss_L", "loss_N", "loss_P", "n_bp", "lr"} <= set(recs[0])

    def test_teacher_untouched(self):
        b = small_bench()
        before = b.encoder.backbone.checksum()
        run_training(b.split, b.encoder, b.class_embeds, TrainConfig(epochs=1, batch_size=8, lr=1e-2))
        assert b.encoder.backbone.checksum() == before

    def test_ablation_switches(self):
        b = small_bench()
        base = TrainConfig(epochs=1, batch_size=8, lr=1e-3)
        only_b = run_training(b.split, b.encoder, b.class_embeds, base.replace(use_global=False))
        only_n = run_training(b.split, b.encoder, b.class_embeds, base.replace(use_batch=False))
        assert only_b.dn is None and all(r["n_bn"] == 0 for r in only_b.log)
        assert all(r["n_bp"] == 0 for r in only_n.log) and len(only_n.dn) > 0
        assert all(e.label >= b.label_space.k for e in only_n.dn)

    def test_ema_mode_runs(self):
        b = small_bench()
        res = run_training(b.split, b.encoder, b.class_embeds,
                           TrainConfig(epochs=1, batch_size=8, lr=1e-3, teacher_mode="ema"))
        assert res.ema_model is not None
        assert checkpoint_bytes(res.ema_model) != checkpoint_bytes(res.model)
