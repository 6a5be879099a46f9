import math
from itertools import pairwise

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavpeft.models import CompactCnn, Linear, Module, SpecTransformer
from uavpeft.peft import apply_strategy
from uavpeft.tensor import Parameter, Tensor, finite_diff_check, precision, relu
from uavpeft.train import (
    ArrayDataset,
    MetricsReport,
    Optimizer,
    OptimizerConfig,
    PlateauScheduler,
    TrainConfig,
    cross_entropy,
    evaluate,
    fit,
    macro_f1,
    train_epoch,
)


class _Cfg:
    n_classes = 3


class TinyMlp(Module):
    """Normalization- and dropout-free model for exact accumulation checks."""

    classifier = ("l2",)

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = _Cfg()
        self.l1 = Linear(12, 10, rng)
        self.l2 = Linear(10, 3, rng)

    def forward(self, x):
        return self.l2(relu(self.l1(x.reshape(x.shape[0], -1))))


def toy_data(n=32, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    x = rng.normal(size=(n, 1, 3, 4)) + y[:, None, None, None]
    return ArrayDataset(x.astype(np.float32), y)


def full_mask(model):
    return {n: True for n, _ in model.named_parameters()}


# -- loss --------------------------------------------------------------------


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros((4, 31))), [0, 5, 9, 30]).item() == pytest.approx(math.log(31), abs=1e-5)
    logits = np.zeros((2, 5))
    logits[[0, 1], [1, 3]] = 30.0
    assert cross_entropy(Tensor(logits), [1, 3]).item() < 1e-9
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_gradient_64_bit():
    rng = np.random.default_rng(0)
    with precision("float64"):
        logits = Tensor(rng.normal(size=(4, 6)))
        assert finite_diff_check(lambda t: cross_entropy(t, [0, 5, 2, 2]), logits) < 1e-6


def test_cross_entropy_gradient_closed_form():
    z = np.random.default_rng(1).normal(size=(3, 4))
    t = Tensor(z.copy(), requires_grad=True)
    cross_entropy(t, [1, 0, 3]).backward()
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    p[[0, 1, 2], [1, 0, 3]] -= 1
    np.testing.assert_allclose(t.grad, p / 3, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("arch", ["cnn", "transformer"])
def test_untrained_loss_near_ln31(arch):
    model = (CompactCnn() if arch == "cnn" else SpecTransformer()).eval()
    x = Tensor(np.random.default_rng(0).normal(size=(31, 1, 64, 157)))
    loss = cross_entropy(model(x), np.arange(31)).item()
    assert abs(loss - math.log(31)) / math.log(31) < 0.05


# -- optimizer ---------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Optimizer({"p": p}, OptimizerConfig())
    opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=6))
def test_adam_first_step_moves_by_lr(grads):
    g = np.array(grads)
    with precision("float64"):
        p = Parameter(np.zeros_like(g))
        Optimizer({"p": p}, OptimizerConfig()).step({"p": g})
    np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-4)
    assert np.all(np.sign(p.data) == -np.sign(g))


def test_adamw_decoupled_decay():
    with precision("float64"):
        p = Parameter(np.array([1.0]))
        Optimizer({"p": p}, OptimizerConfig("adamw", weight_decay=0.01)).step({"p": np.zeros(1)})
    assert p.data[0] == pytest.approx(0.99999, abs=1e-12)


def test_optimizer_rejects_unknown_gradients_and_kinds():
    opt = Optimizer({"p": Parameter(np.zeros(1))}, OptimizerConfig())
    with pytest.raises(KeyError):
        opt.step({"q": np.zeros(1)})
    with pytest.raises(ValueError):
        OptimizerConfig("sgd")


def test_arch_pairing():
    assert OptimizerConfig.for_arch("cnn").kind == "adam"
    tf = OptimizerConfig.for_arch("transformer")
    assert (tf.kind, tf.weight_decay, tf.lr) == ("adamw", 0.01, 1e-3)


def test_state_only_for_trainable_parameters():
    model, mask = apply_strategy(CompactCnn(), "classifier_only")
    opt = Optimizer.for_model(model, mask, OptimizerConfig())
    assert set(opt.m) == {n for n, t in mask.items() if t} == {"fc.weight", "fc.bias", "head.weight", "head.bias"}


# -- scheduler ---------------------------------------------------------------


def test_scheduler_examples():
    s = PlateauScheduler()
    assert [s.step(v) for v in (1.0, 0.9, 0.8, 0.7)] == [1e-3] * 4
    s = PlateauScheduler()
    assert [s.step(1.0) for _ in range(4)][-1] == pytest.approx(1e-4)
    s = PlateauScheduler()
    lrs = [s.step(1.0) for _ in range(100)]
    assert min(lrs) == pytest.approx(1e-6) and all(a >= b for a, b in pairwise(lrs))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=60))
def test_scheduler_lr_monotone_and_floored(losses):
    s = PlateauScheduler()
    lrs = [s.step(v) for v in losses]
    assert all(a >= b for a, b in zip([1e-3] + lrs, lrs))
    assert min(lrs) >= 1e-6 - 1e-18


# -- epoch loop --------------------------------------------------------------


def test_epoch_step_counts():
    model = TinyMlp()
    cfg = TrainConfig(batch_size=8, accumulation_steps=2)
    opt = Optimizer.for_model(model, full_mask(model), OptimizerConfig())
    train_epoch(model, toy_data(32), opt, cfg)
    assert opt.t == 2
    opt = Optimizer.for_model(model, full_mask(model), OptimizerConfig())
    train_epoch(model, toy_data(40), opt, cfg)
    assert opt.t == 3  # 5 micro-batches: two full groups and a trailing one
    assert TrainConfig().effective_batch == 16


def test_epoch_loss_is_mean_of_micro_losses():
    model = TinyMlp()
    data = toy_data(32)
    opt = Optimizer.for_model(model, full_mask(model), OptimizerConfig(lr=0.0))
    report = train_epoch(model, data, opt, TrainConfig(batch_size=8))
    full = cross_entropy(model(Tensor(data.x)), data.y).item()
    assert report.loss == pytest.approx(full, rel=1e-5)


def test_accumulation_matches_large_batch():
    data = toy_data(16)
    a, b = TinyMlp(1), TinyMlp(1)
    train_epoch(a, data, Optimizer.for_model(a, full_mask(a), OptimizerConfig()), TrainConfig(batch_size=8, accumulation_steps=2))
    train_epoch(b, data, Optimizer.for_model(b, full_mask(b), OptimizerConfig()), TrainConfig(batch_size=16, accumulation_steps=1))
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.abs(pa.data - pb.data).max() < 1e-6, n


def test_empty_inputs_rejected():
    model = TinyMlp()
    empty = ArrayDataset(np.zeros((0, 1, 3, 4), np.float32), np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        train_epoch(model, empty, Optimizer.for_model(model, full_mask(model), OptimizerConfig()), TrainConfig())
    with pytest.raises(ValueError):
        evaluate(model, empty)


# -- metrics -----------------------------------------------------------------


def test_f1_examples():
    y = np.repeat(np.arange(31), 4)
    assert macro_f1(y, y, 31) == 1.0
    assert macro_f1(y, np.zeros_like(y), 31) == pytest.approx(1 / 496)
    assert np.mean(np.zeros_like(y) == y) == pytest.approx(1 / 31)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40), st.randoms())
def test_metrics_are_order_invariant_and_bounded(pairs, rnd):
    y, p = map(np.array, zip(*pairs))
    f = macro_f1(y, p, 5)
    perm = list(range(len(y)))
    rnd.shuffle(perm)
    assert macro_f1(y[perm], p[perm], 5) == pytest.approx(f)
    assert 0.0 <= f <= 1.0


def test_evaluate_report_fields():
    model = TinyMlp()
    r = evaluate(model, toy_data(12))
    assert isinstance(r, MetricsReport) and r.n == 12 and r.loss >= 0 and 0 <= r.accuracy <= 1


# -- fit ---------------------------------------------------------------------


def _fit(max_epochs=3, seed=0):
    model = TinyMlp(seed)
    rows = []
    res = fit(
        model, toy_data(32), toy_data(12, seed=1), full_mask(model), OptimizerConfig(lr=1e-2),
        TrainConfig(batch_size=8, max_epochs=max_epochs), extra={"validation": toy_data(9, seed=2)}, log=rows.append,
    )
    return res, rows


def test_fit_single_epoch_passes():
    res, rows = _fit(max_epochs=1)
    assert [r["split"] for r in rows] == ["train", "test", "validation"]
    assert res.epochs_run == 1 and res.best_epoch == 0
    assert set(rows[0]) == {"epoch", "split", "loss", "accuracy", "f1", "lr", "seconds", "trainable_percent"}


def test_fit_is_deterministic_and_lr_monotone():
    (_, rows_a), (_, rows_b) = _fit(), _fit()
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert strip(rows_a) == strip(rows_b)
    lrs = [r["lr"] for r in rows_a]
    assert all(x >= y for x, y in pairwise(lrs))


def test_fit_keeps_best_monitored_state():
    res, rows = _fit(max_epochs=4)
    mon = [r for r in rows if r["split"] == "test"]
    best = max(range(len(mon)), key=lambda i: (mon[i]["accuracy"], -mon[i]["loss"], -i))
    assert res.best_epoch == best
    model = TinyMlp()
    model.load_state_dict(res.best_state)
    assert evaluate(model, toy_data(12, seed=1)).accuracy == pytest.approx(mon[best]["accuracy"])


def test_early_stopping_on_flat_monitor():
    model = TinyMlp()
    res = fit(model, toy_data(16), toy_data(6, seed=1), full_mask(model), OptimizerConfig(lr=0.0),
              TrainConfig(batch_size=8, max_epochs=30, early_stop_patience=4))
    assert res.epochs_run == 5  # first epoch sets the best loss, four stale epochs stop the run
