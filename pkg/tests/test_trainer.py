import dataclasses
import json

import numpy as np
import pytest

from conceptgcd import heads as H
from conceptgcd.dataset import SyntheticSpec, generate_synthetic
from conceptgcd.errors import ConfigError, DataError, NumericError
from conceptgcd.evaluation import evaluate_model
from conceptgcd.numerics import RngState
from conceptgcd.trainer import (
    NegativeMemory,
    OptimizerState,
    TrainConfig,
    TrainLog,
    cosine_lr,
    init_stage3,
    run_stage1,
    run_stage2,
    run_stage3,
    sgd_step,
    tau_prime_schedule,
)

TINY = dict(lr_init=0.1, l=4, m=8, n=16, batch_size=16, epochs_stage1=4, epochs_stage2=3, epochs_stage3=3, memory_capacity=40)


@pytest.fixture(scope="module")
def cfg():
    return TrainConfig(**TINY)


@pytest.fixture(scope="module")
def stage12(small_ds, cfg):
    s1 = run_stage1(small_ds, cfg)
    s2 = run_stage2(s1.model, small_ds, cfg)
    return s1, s2


def _params(model):
    return {k: v.copy() for k, v in model.to_tensors().items()}


# -- optimizer and schedules ------------------------------------------------------------


def test_sgd_zero_gradient_is_fixed_point():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0])}
    state = OptimizerState(lr=0.5)
    sgd_step(p, {"w": np.zeros(2)}, state, cfg)
    assert p["w"].tolist() == [1.0, -2.0]


def test_sgd_plain_descent():
    cfg = TrainConfig(momentum=0.0, weight_decay=0.0)
    p = {"w": np.array([1.0, 2.0])}
    sgd_step(p, {"w": np.array([0.5, -1.0])}, OptimizerState(lr=0.1), cfg)
    np.testing.assert_allclose(p["w"], [0.95, 2.1])


def test_sgd_momentum_recurrence():
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    p = {"w": np.array([1.0])}
    state = OptimizerState(lr=0.1)
    x, v = 1.0, 0.0
    for _ in range(2):
        sgd_step(p, {"w": p["w"].copy()}, state, cfg)  # f = x^2 / 2
        v = 0.9 * v + x
        x = x - 0.1 * v
    assert x == pytest.approx(0.72)
    assert p["w"][0] == pytest.approx(x, abs=1e-15)


def test_sgd_weight_decay_skips_bias():
    cfg = TrainConfig(momentum=0.0, weight_decay=0.5)
    p = {"layer.weight": np.array([2.0]), "layer.bias": np.array([2.0])}
    sgd_step(p, {"layer.weight": np.zeros(1), "layer.bias": np.zeros(1)}, OptimizerState(lr=0.1), cfg)
    assert p["layer.weight"][0] == pytest.approx(1.9)
    assert p["layer.bias"][0] == 2.0


def test_sgd_nonfinite_gradient_names_tensor():
    p = {"enc.w": np.zeros(2)}
    with pytest.raises(NumericError, match="enc.w"):
        sgd_step(p, {"enc.w": np.array([0.0, np.inf])}, OptimizerState(lr=0.1), TrainConfig())
    assert p["enc.w"].tolist() == [0.0, 0.0]


def test_cosine_lr():
    cfg = TrainConfig()
    assert cosine_lr(0, cfg, 100) == 1.0
    assert cosine_lr(100, cfg, 100) == 1e-4
    assert cosine_lr(250, cfg, 100) == 1e-4
    assert cosine_lr(50, cfg, 100) == pytest.approx((1.0 + 1e-4) / 2, rel=1e-14)


def test_tau_prime_schedule():
    cfg = TrainConfig()
    assert tau_prime_schedule(0, cfg) == 0.07
    assert tau_prime_schedule(30, cfg) == 0.04
    assert tau_prime_schedule(99, cfg) == 0.04
    assert tau_prime_schedule(15, cfg) == pytest.approx(0.055, abs=1e-15)
    values = [tau_prime_schedule(e, cfg) for e in range(31)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# -- config -----------------------------------------------------------------------------------


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.beta, cfg.lam, cfg.epsilon, cfg.tau) == (0.35, 0.1, 1.0, 1.0, 0.1)
    assert (cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.memory_capacity) == (0.9, 5e-5, 128, 2048)
    assert (cfg.m, cfg.n) == (2 * cfg.l, 10 * cfg.l)
    assert (cfg.epochs_stage1, cfg.epochs_stage2) == (100, 100)


def test_config_from_dict():
    cfg = TrainConfig.from_dict({"lambda": 0.5, "seed": 3})
    assert cfg.lam == 0.5 and cfg.seed == 3
    with pytest.raises(ConfigError, match="bogus, zeta"):
        TrainConfig.from_dict({"zeta": 1, "bogus": 2})


@pytest.mark.parametrize("bad", [dict(m=10, n=10), dict(tau=0.0), dict(batch_size=1), dict(entropy_sign=0.5)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# -- negative memory ----------------------------------------------------------------------------


def test_memory_fifo():
    mem = NegativeMemory(5, 2)
    rows = np.arange(16.0).reshape(8, 2)
    for i in range(0, 8, 3):
        mem.push(rows[i : i + 3], np.arange(i, min(i + 3, 8)))
        assert len(mem) <= 5
    got, ids = mem.contents()
    assert np.array_equal(got, rows[3:])
    assert ids.tolist() == [3, 4, 5, 6, 7]


def test_memory_oversized_push():
    mem = NegativeMemory(3, 1)
    mem.push(np.arange(7.0)[:, None], np.arange(7))
    assert mem.contents()[1].tolist() == [4, 5, 6]


# -- stages -----------------------------------------------------------------------------------


def test_stage1_fits_separable_data():
    spec = SyntheticSpec(n_known=3, n_novel=2, input_dim=6, samples_per_class=12, noise_sigma=0.0, center_scale=2.0)
    ds = generate_synthetic(spec, RngState(0))
    cfg = TrainConfig(l=6, batch_size=8, epochs_stage1=30, sigma_aug=0.0, lr_init=0.1, lam=0.0)
    model = run_stage1(ds, cfg).model
    lab = ds.labeled_indices
    assert np.mean(model.predict(ds.features[lab]) == ds.gt_labels[lab]) == 1.0


def test_stage1_deterministic(small_ds, cfg):
    a, b = run_stage1(small_ds, cfg), run_stage1(small_ds, cfg)
    assert a.history == b.history
    assert a.history[-1]["loss"] == b.history[-1]["loss"]


def test_stage1_needs_labels(small_ds, cfg):
    view = small_ds.train_view()
    blind = dataclasses.replace(view, labels=np.full_like(view.labels, -1))
    with pytest.raises(DataError):
        run_stage1(blind, cfg)


def test_stage1_sees_only_visible(small_ds, cfg):
    seen = []
    run_stage1(small_ds, cfg, hook=lambda stage, info: seen.append(info["batch"]))
    assert np.all(small_ds.visible[np.concatenate(seen)])


def test_stage2_freezes_encoder_and_routes_batches(small_ds, cfg, stage12):
    s1, _ = stage12
    before = _params(s1.model)
    calls = []
    s2 = run_stage2(s1.model, small_ds, cfg, hook=lambda stage, info: calls.append(info))
    assert all(np.array_equal(before[k], v) for k, v in s1.model.to_tensors().items())
    for k, v in s2.model.encoder.params().items():
        assert np.array_equal(v, before[f"encoder.{k}"])
    for info in calls:
        assert np.all(small_ds.visible[info["sup_rows"]])
        assert not np.any(small_ds.visible[info["unsup_rows"]])
        assert len(info["sup_rows"]) + len(info["unsup_rows"]) == len(info["batch"])
    assert any(len(i["sup_rows"]) and len(i["unsup_rows"]) for i in calls)
    assert s2.model.features(small_ds.features).min() >= 0


def test_stage2_rejects_dim_mismatch(small_ds, cfg, stage12):
    with pytest.raises(ConfigError, match="l=5"):
        run_stage2(stage12[0].model, small_ds, dataclasses.replace(cfg, l=5, m=10, n=20))


def test_stage2_depth_zero_baseline(small_ds, cfg, stage12):
    base = run_stage2(stage12[0].model, small_ds, dataclasses.replace(cfg, gl_depth=0))
    assert base.model.head.depth == 0
    assert base.model.classifier.feat_dim == cfg.l
    assert all(r["loss_cov"] == 0.0 for r in base.history)


def test_stage3_initialization_contract(small_ds, cfg, stage12):
    s1, s2 = stage12
    c = dataclasses.replace(cfg, beta=0.0, csn=False, el_init_scale=0.0)
    enc, el, _ = init_stage3(s1.model, s2.model, c, small_ds.n_classes)
    x = small_ds.features
    u = H.expansion_forward(el, H.encoder_forward(enc, x)[0])[0]
    assert np.array_equal(u[:, : c.m], s2.model.features(x))
    assert np.all(u[:, c.m :] == 0)


def test_stage3_contracts(small_ds, cfg, stage12):
    s1, s2 = stage12
    before1, before2 = _params(s1.model), _params(s2.model)
    calls = []
    s3 = run_stage3(s1.model, s2.model, small_ds, cfg, hook=lambda stage, info: calls.append(info))
    for model, before in ((s1.model, before1), (s2.model, before2)):
        assert all(np.array_equal(before[k], v) for k, v in model.to_tensors().items())
    assert len(s3.memory) == cfg.memory_capacity
    for info in calls:
        assert not np.any(small_ds.visible[info["smi_rows"]])
    feats = s3.model.features(small_ds.features)
    m, n = cfg.m, cfg.n
    head = np.linalg.norm(feats[:, :m], axis=1)
    tail = np.linalg.norm(feats[:, m:], axis=1)
    np.testing.assert_allclose(head[head > 0], np.sqrt(m), atol=1e-9)
    np.testing.assert_allclose(tail[tail > 0], np.sqrt(n - m), atol=1e-9)
    assert 0 <= evaluate_model(s3.model, small_ds).acc_all <= 1


def test_stage3_options(small_ds, cfg, stage12):
    s1, s2 = stage12
    c = dataclasses.replace(cfg, stage3_cov=True, warm_start_classifier=True, smi_all_samples=True)
    calls = []
    s3 = run_stage3(s1.model, s2.model, small_ds, c, hook=lambda stage, info: calls.append(info))
    assert "loss_cov" in s3.history[-1]
    assert sum(len(i["smi_rows"]) for i in calls) == c.epochs_stage3 * small_ds.n_samples


def test_stage3_needs_generator(small_ds, cfg, stage12):
    base = run_stage2(stage12[0].model, small_ds, dataclasses.replace(cfg, gl_depth=0))
    with pytest.raises(ConfigError):
        run_stage3(stage12[0].model, base.model, small_ds, cfg)


def test_log_files_are_deterministic(tmp_path, small_ds, cfg):
    for name in ("a", "b"):
        run_stage1(small_ds, cfg, TrainLog(tmp_path / f"{name}.jsonl"))
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes()
    lines = [json.loads(x) for x in a.decode().splitlines()]
    assert [r["epoch"] for r in lines] == list(range(cfg.epochs_stage1))
    assert {"lr", "loss", "loss_s", "loss_cov"} <= set(lines[0])
    timing = (tmp_path / "a.jsonl.timing.jsonl").read_text().splitlines()
    assert len(timing) == cfg.epochs_stage1 and "wall_time" in json.loads(timing[0])
