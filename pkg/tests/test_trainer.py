import numpy as np
import pytest

from artda import tensor as T
from artda.data import ImageBatch, TARGET
from artda.losses import LossContractError
from artda.trainer import (StepRunner, TrainConfig, TrainingDiverged, evaluate, log_grid,
                           parse_strategy, sweep, train, train_seed, write_sweep_csv)
from artda.model import init_classifier
from artda.stn import init_localization


def quick(**kw):
    base = dict(epochs=2, lr=0.05, seeds=(0,), batch_size=32)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.lr_decay_at, cfg.lr_final) == (60, 0.001, 0.8, 0.0001)
    assert (cfg.n_aug, cfg.m_aug) == (2, 9.0)
    assert (cfg.lambda_c, cfg.lambda_e, cfg.lambda_t) == (1.0, 0.1, 0.1)
    assert cfg.seeds == (0, 1, 2)


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.decay_epoch == 48
    assert [cfg.lr_at(e) for e in (0, 47)] == [0.001, 0.001]
    assert [cfg.lr_at(e) for e in (48, 59)] == [0.0001, 0.0001]


def test_parse_strategy():
    assert not parse_strategy("none").active
    s = parse_strategy("adv-stn-color")
    assert s.adversarial and "Invert" in s.ops and "Rotate" not in s.ops
    assert parse_strategy("rnd-color+rnd-geo").ops == parse_strategy("rnd-color").ops + parse_strategy("rnd-geo").ops
    assert parse_strategy("adv-stn").ops == ()
    with pytest.raises(ValueError, match="unknown strategy"):
        parse_strategy("rnd-everything")


def test_config_validation():
    with pytest.raises(ValueError):
        quick(mode="XX").validate()
    with pytest.raises(ValueError):
        quick(lambda_c=-1).validate()
    with pytest.raises(ValueError):
        quick(seeds=()).validate()


def test_baseline_total_equals_supervised_loss(small_task):
    result, _, locnet = train_seed(quick(strategy="none", epochs=2), small_task, 0)
    assert locnet is None
    for row in result.epochs:
        assert row["total"] == row["l_m"]
        assert row["l_c"] == row["l_e"] == row["l_adv"] == 0.0


def test_logged_lr_follows_schedule(small_task):
    cfg = quick(strategy="none", epochs=5, lr_decay_at=0.6, lr=0.05, lr_final=0.005)
    result, _, _ = train_seed(cfg, small_task, 0)
    assert [r["lr"] for r in result.epochs] == [0.05, 0.05, 0.05, 0.005, 0.005]


def test_identical_runs_identical_reports(small_task):
    cfg = quick(strategy="adv-stn-color", mode="DA", epochs=1)
    a = train(cfg, small_task).to_dict()
    b = train(cfg, small_task).to_dict()
    assert a == b


def test_report_shape(small_task):
    rep = train(quick(strategy="none", seeds=(0, 1), epochs=1), small_task)
    d = rep.to_dict()
    assert len(d["seeds"]) == 2
    assert d["mean"]["target_acc"] == pytest.approx(np.mean([s["target_acc"] for s in d["seeds"]]))
    for s in d["seeds"]:
        assert 0 <= s["target_acc"] <= 100 and 0 <= s["source_acc"] <= 100


def test_zero_lambda_t_freezes_stn(small_task):
    _, _, frozen = train_seed(quick(strategy="adv-stn", mode="DG", lambda_t=0.0, epochs=1), small_task, 0)
    init = init_localization(np.random.default_rng([0, 2]), small_task.input_shape)
    fresh = init_localization(np.random.default_rng([0, 2]), small_task.input_shape)
    for k in init.params:
        assert np.array_equal(frozen.params[k].data, fresh.params[k].data.astype(frozen.params[k].dtype))
    _, _, moved = train_seed(quick(strategy="adv-stn", mode="DG", lambda_t=1.0, epochs=1), small_task, 0)
    assert any(not np.array_equal(moved.params[k].data, frozen.params[k].data) for k in moved.params)


def test_stn_update_ascends_consistency(small_task):
    """One GRL step on theta_t moves it along +d(KL)/d(theta_t)."""
    cfg = quick(strategy="adv-stn", mode="DG", lambda_c=0.0, lambda_t=1.0, weak_augment=False)
    with T.default_dtype("float64"):
        clf = init_classifier(0, small_task.num_classes, small_task.input_shape)
        net = init_localization(1, small_task.input_shape)
    net.params["fc2.w"].data = 0.2 * np.random.default_rng(3).standard_normal(net.params["fc2.w"].shape)
    cfg.dtype = "float64"
    runner = StepRunner(cfg, clf, net, seed=0)
    src = small_task.source_train.subset(np.arange(16))
    before = {k: p.data.copy() for k, p in net.params.items()}
    parts, total = runner.losses(src, None, 0, 0)
    total.backward()
    g_rev = {k: p.grad.copy() for k, p in net.params.items()}
    assert parts["l_adv"].item() > 0
    # the gradient the optimizer sees on theta_t is the negated ascent direction
    for p in net.parameters():
        p.grad = None
    from artda.losses import kl_consistency
    from artda.model import predict_logprobs
    from artda.stn import spatial_transform
    from artda.augment import weak_augment
    from artda.seeding import derive_rng
    x = src.images.astype(np.float64)
    stn_in = weak_augment(x, derive_rng(0, "weak_augment", 0, 0, 1))
    clean = predict_logprobs(T.Tensor(x), clf).data
    kl_consistency(clean, predict_logprobs(spatial_transform(T.Tensor(stn_in), net), clf)).backward()
    for k, p in net.params.items():
        np.testing.assert_allclose(g_rev[k], -p.grad, rtol=1e-4, atol=1e-9)  # float32 image path
        assert np.array_equal(before[k], p.data)


def test_dg_rejects_target_data(small_task):
    bad = ImageBatch.concat([small_task.source_train, small_task.target])
    task = type(small_task)(bad, small_task.source_test, small_task.target, small_task.source_names,
                            small_task.target_name, small_task.num_classes, small_task.input_shape)
    with pytest.raises(ValueError, match="DG"):
        train_seed(quick(strategy="none", mode="DG", epochs=1), task, 0)
    cfg = quick(strategy="rnd-all", mode="DG")
    runner = StepRunner(cfg, init_classifier(0, 3, small_task.input_shape), None, 0)
    with pytest.raises(LossContractError):
        runner.losses(bad.subset(np.arange(len(bad) - 4, len(bad))), None, 0, 0)


def test_target_labels_never_reach_cross_entropy(small_task):
    runner = StepRunner(quick(strategy="rnd-all", mode="DA"), init_classifier(0, 3, small_task.input_shape), None, 0)
    leak = small_task.target.subset(np.arange(4))
    with pytest.raises(LossContractError):
        runner.losses(leak, small_task.target.unlabeled().subset(np.arange(4)), 0, 0)


def test_nan_guard(small_task):
    cfg = quick(strategy="none", epochs=1)
    cfg.validate()
    clf = init_classifier(0, 3, small_task.input_shape)
    clf.params["fc2.b"].data = np.full_like(clf.params["fc2.b"].data, np.nan)
    runner = StepRunner(cfg, clf, None, 0)
    with pytest.raises(TrainingDiverged, match="batch of"):
        runner.step(small_task.source_train.subset(np.arange(8)), None, 0.1, 0, 0)


class FixedLogits:
    """Stand-in classifier returning preset logits in dataset order."""

    def __init__(self, logits):
        self.logits_table = logits
        self.offset = 0

    def parameters(self):
        return [T.Tensor(np.zeros(1, dtype=np.float32))]

    def logits(self, x):
        out = self.logits_table[self.offset:self.offset + len(x.data)]
        self.offset += len(x.data)
        return T.Tensor(out)


def test_evaluate_examples():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 7, 1000)
    ds = ImageBatch(np.zeros((1000, 1, 4, 4), np.float32), labels, np.zeros(1000, int))
    perfect = np.eye(7)[labels]
    assert evaluate(FixedLogits(perfect), ds) == 100.0
    random_acc = evaluate(FixedLogits(rng.standard_normal((1000, 7))), ds)
    assert abs(random_acc - 100 / 7) <= 3
    perm = rng.permutation(1000)
    shuffled = ImageBatch(ds.images[perm], labels[perm], ds.domain_tags[perm])
    logits = rng.standard_normal((1000, 7))
    assert evaluate(FixedLogits(logits), ds) == evaluate(FixedLogits(logits[perm]), shuffled)
    with pytest.raises(ValueError):
        evaluate(FixedLogits(perfect), ds.unlabeled())


def test_sweep_degenerate_grid_matches_train(small_task, tmp_path):
    cfg = quick(strategy="rnd-color", mode="DG", epochs=1)
    res = sweep(cfg, small_task, [0.5], [0.25])
    rep = train(TrainConfig(**{**cfg.__dict__, "lambda_c": 0.5, "lambda_t": 0.25}), small_task)
    assert res.accuracy.shape == (1, 1) and res.accuracy[0, 0] == rep.mean_target_acc
    path = tmp_path / "s.csv"
    write_sweep_csv(res, path)
    assert path.read_text().splitlines() == ["lambda_c\\lambda_t,0.25", f"0.5,{rep.mean_target_acc!r}"]
    with pytest.raises(ValueError):
        sweep(cfg, small_task, [], [1.0])


def test_log_grid():
    g = log_grid()
    assert len(g) == 10 and g[0] == pytest.approx(0.01) and g[-1] == pytest.approx(10.0)
    assert np.allclose(np.diff(np.log(g)), np.log(10) / 3)


def test_baseline_source_loss_decreases(small_task):
    cfg = quick(strategy="none", epochs=15, lr=0.05)
    result, _, _ = train_seed(cfg, small_task, 0)
    lm = np.array([r["l_m"] for r in result.epochs])
    windows = [lm[i:i + 5].mean() for i in range(0, 15, 5)]
    assert all(b <= a + 0.02 for a, b in zip(windows, windows[1:]))
    assert windows[-1] < windows[0]

