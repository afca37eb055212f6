import math

import numpy as np
import pytest

from otpel.backbone import Backbone, evaluate_mae, pretrain, stack_mels
from otpel.errors import ConfigError, ShapeError, TrainingError
from otpel.losses import mae_loss
from otpel.ot import DistanceMetric, ot_loss
from otpel.pel import PELConfig, assemble
from otpel.tensor import Tensor, finite_diff_grad
from otpel.train import (
    FeatureBank,
    Trainer,
    TrainConfig,
    adapt,
    build_feature_bank,
    load_bank,
    ot_coefficient,
    read_metrics_csv,
    save_bank,
    write_metrics_csv,
)
from conftest import rel_err


@pytest.fixture(scope="module")
def pretrained(small_cfg, tiny_source):
    return pretrain(small_cfg, tiny_source, steps=150, peak_lr=5e-3, warmup_steps=30, seed=1).backbone.reg.state()


def fresh(small_cfg, state, method="IR+LR"):
    bb = Backbone(small_cfg)
    bb.reg.load_state(state)
    return assemble(PELConfig(method=method, hidden=4, bottleneck=4), bb)


@pytest.fixture
def bank(small_cfg, pretrained, tiny_source):
    bb = Backbone(small_cfg)
    bb.reg.load_state(pretrained)
    bb.reg.freeze("backbone.")
    return build_feature_bank(bb, tiny_source, max_frames=128)


def short_cfg(**kw):
    base = dict(total_steps=30, ot_start_step=10, warm_ramp_steps=5, batch_size=3, warmup_steps=5, ot_frames=32, eval_frames=64)
    base.update(kw)
    return TrainConfig(**base)


# -- mae_loss ----------------------------------------------------------------


def test_mae_identical_is_zero(rng):
    y = rng.normal(size=(4, 5))
    assert mae_loss(Tensor(y), y).item() == 0.0


def test_mae_constant_offset(rng):
    y = rng.normal(size=(4, 5))
    assert mae_loss(Tensor(y + 1.0), y).item() == pytest.approx(1.0, abs=1e-15)


def test_mae_matches_direct_sum(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    oracle = sum(abs(a[i, j] - b[i, j]) for i in range(3) for j in range(4)) / 12
    assert mae_loss(Tensor(a), b).item() == pytest.approx(oracle, rel=1e-15)


def test_mae_shape_mismatch():
    with pytest.raises(ShapeError):
        mae_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_mae_gradient_matches_finite_differences():
    for seed in range(20):
        r = np.random.default_rng(seed)
        p0, y = r.normal(size=(4, 3)), r.normal(size=(4, 3))
        p = Tensor(p0, requires_grad=True)
        mae_loss(p, y).backward()
        assert rel_err(p.grad, finite_diff_grad(lambda t: mae_loss(t, y), p0)) < 1e-4


# -- schedule ----------------------------------------------------------------


def test_coefficient_zero_before_start():
    assert ot_coefficient(10, TrainConfig(ot_start_step=300)) == 0.0


def test_coefficient_ramp_points():
    cfg = TrainConfig(ot_start_step=300, warm_ramp_steps=100)
    assert ot_coefficient(300, cfg) == 0.0
    assert ot_coefficient(350, cfg) == 0.5
    assert ot_coefficient(400, cfg) == 1.0
    assert ot_coefficient(1999, cfg) == 1.0


def test_coefficient_hard_switch():
    cfg = TrainConfig(ot_start_step=300, warm_ramp_steps=0)
    assert ot_coefficient(299, cfg) == 0.0
    assert ot_coefficient(300, cfg) == 1.0


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=10, ot_start_step=20)
    with pytest.raises(ConfigError):
        TrainConfig(warm_ramp_steps=-1)
    with pytest.raises(ConfigError):
        TrainConfig(ot_sign="minus")


# -- feature bank ------------------------------------------------------------


def test_bank_guards(small_backbone, tiny_source):
    with pytest.raises(ConfigError):
        build_feature_bank(small_backbone, tiny_source, max_frames=0)
    with pytest.raises(ConfigError):
        build_feature_bank(small_backbone, [], max_frames=10)
    with pytest.raises(ConfigError):
        FeatureBank({})


def test_bank_shape_and_finiteness(small_backbone, tiny_source):
    bank = build_feature_bank(small_backbone, tiny_source, max_frames=50)
    assert bank.taps == list(range(small_backbone.n_taps))
    for t in bank.taps:
        assert bank[t].shape == (50, small_backbone.cfg.latent_dim)
        assert np.all(np.isfinite(bank[t]))
        assert not bank[t].flags.writeable


def test_bank_is_deterministic_and_round_trips(tmp_path, small_backbone, tiny_source):
    a = build_feature_bank(small_backbone, tiny_source, max_frames=40, seed=2)
    b = build_feature_bank(small_backbone, tiny_source, max_frames=40, seed=2)
    assert a == b
    save_bank(a, tmp_path / "bank.bin", small_backbone.cfg.digest())
    assert load_bank(tmp_path / "bank.bin", small_backbone.cfg.digest()) == a


# -- train step --------------------------------------------------------------


@pytest.mark.parametrize("kind", ["SWD", "MMD"])
def test_total_equals_mae_before_start(small_cfg, pretrained, bank, tiny_target, kind):
    model = fresh(small_cfg, pretrained)
    trainer = Trainer(model, bank, short_cfg(metric=DistanceMetric(kind=kind)))
    for step in range(10):
        rec = trainer.step(trainer.sample_batch(tiny_target), step)
        assert rec.total == rec.l_mae
        assert rec.coefficient == 0.0
        assert rec.l_ot < 0


def test_frozen_tensors_untouched_and_updates_match_trainable_set(small_cfg, pretrained, bank, tiny_target):
    model = fresh(small_cfg, pretrained)
    before = model.reg.state("backbone.")
    result = adapt(model, tiny_target, bank, short_cfg())
    for name, value in before.items():
        assert np.array_equal(model.reg[name].data, value)
    assert result.updated == {n for n, _ in model.reg.trainable()}


def test_seeded_runs_are_identical(small_cfg, pretrained, bank, tiny_target):
    a = adapt(fresh(small_cfg, pretrained), tiny_target, bank, short_cfg())
    b = adapt(fresh(small_cfg, pretrained), tiny_target, bank, short_cfg())
    assert a.log == b.log and a.distances == b.distances


def test_regularizer_ablation_diverges_only_after_start(small_cfg, pretrained, bank, tiny_target):
    on = adapt(fresh(small_cfg, pretrained), tiny_target, bank, short_cfg(warm_ramp_steps=0))
    off = adapt(fresh(small_cfg, pretrained), tiny_target, bank, short_cfg(warm_ramp_steps=0, use_ot=False))
    k = 10
    assert on.log[:k] == off.log[:k]
    assert on.log[k].total != off.log[k].total
    assert any(a.l_mae != b.l_mae for a, b in zip(on.log[k + 1 :], off.log[k + 1 :]))


def test_start_at_end_is_plain_fine_tuning(small_cfg, pretrained, bank, tiny_target):
    res = adapt(fresh(small_cfg, pretrained), tiny_target, bank, short_cfg(ot_start_step=30))
    assert all(r.total == r.l_mae and r.coefficient == 0.0 for r in res.log)


def test_sign_flag_flips_ot_contribution(small_cfg, pretrained, bank, tiny_target):
    cfg = short_cfg(ot_start_step=0, warm_ramp_steps=0, ot_weight=0.5)
    for sign, expect in (("eq4", 1.0), ("alg1", -1.0)):
        trainer = Trainer(fresh(small_cfg, pretrained), bank, TrainConfig(**{**cfg.__dict__, "ot_sign": sign}))
        rec = trainer.step(trainer.sample_batch(tiny_target), 0)
        assert rec.total == pytest.approx(rec.l_mae + expect * 0.5 * rec.l_ot, rel=1e-12)


def test_nan_loss_aborts_with_step(small_cfg, pretrained, bank, tiny_target):
    model = fresh(small_cfg, pretrained)
    _, net = model.layers[0]
    net.conv.bias.data = np.full(net.conv.bias.shape, np.nan)
    with pytest.raises(TrainingError) as err:
        adapt(model, tiny_target, bank, short_cfg())
    assert err.value.step == 0


def test_bank_must_cover_ot_taps(small_cfg, pretrained, tiny_target, small_backbone, tiny_source):
    partial = build_feature_bank(small_backbone, tiny_source, taps=[0], max_frames=20)
    with pytest.raises(ConfigError):
        Trainer(fresh(small_cfg, pretrained), partial, short_cfg())


def test_adaptation_lowers_target_error(small_cfg, pretrained, bank, tiny_target):
    model = fresh(small_cfg, pretrained, method="LA")
    frozen = evaluate_mae(model.backbone, tiny_target)
    adapt(model, tiny_target, bank, short_cfg(total_steps=120, peak_lr=1e-2))
    assert evaluate_mae(model.backbone, tiny_target, model.transforms()) < frozen


@pytest.mark.parametrize("kind", ["SWD", "MMD"])
def test_composed_objective_gradient(small_cfg, pretrained, bank, tiny_target, kind):
    """d/dθ of L_mae - w·d(R(h_t), h_s) against central differences on one PEL tensor."""
    metric = DistanceMetric(kind=kind, n_projections=10, bandwidth=3.0 if kind == "MMD" else None)
    batch = tiny_target[:2]
    target = stack_mels(batch)
    for seed in range(20):
        model = fresh(small_cfg, pretrained)
        r = np.random.default_rng(seed)
        for _, t in model.reg.trainable():
            t.data = 0.1 * r.normal(size=t.shape)
        param = model.reg["pel.lr1.conv.kernel"]
        source = bank[1][:24]

        def objective():
            tr = model.trace_batch([u.tokens for u in batch])
            ot = ot_loss(tr.post[1][:24], source, metric, np.random.default_rng(seed))
            return mae_loss(tr.mel, target) + ot * 0.7

        def f(t):
            saved = param.data
            param.data = t.data
            try:
                return objective()
            finally:
                param.data = saved

        model.reg.zero_grad()
        objective().backward()
        tol = 1e-3 if kind == "SWD" else 1e-4
        assert rel_err(param.grad, finite_diff_grad(f, param.data.copy())) < tol


def test_metrics_csv_layout(tmp_path, small_cfg, pretrained, bank, tiny_target):
    res = adapt(fresh(small_cfg, pretrained), tiny_target, bank, short_cfg())
    write_metrics_csv(tmp_path / "m.csv", res)
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert len(rows) == 30
    assert rows[0]["dist_before"] != "" and float(rows[5]["l_mae"]) == res.log[5].l_mae
    per_epoch = math.ceil(len(tiny_target) / 3)
    filled = [int(r["step"]) for r in rows if r["dist_after"] != ""]
    assert filled == list(range(0, 30, per_epoch))
