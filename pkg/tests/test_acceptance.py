"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; a
summary block is also emitted at the end of every pytest session.
"""

import json
import math
import re
import time
from contextlib import contextmanager
from dataclasses import astuple
from pathlib import Path

import numpy as np
import pytest
from hand_counts import cnn_counts, transformer_counts
from test_data import balanced
from test_train import TinyMlp, full_mask, toy_data

from uavpeft import tensor as T
from uavpeft.augment import (
    AugmentationPlan,
    AugmentationSpec,
    apply_plan,
    sin_distortion,
    time_stretch,
)
from uavpeft.cli import main
from uavpeft.data import (
    Split,
    SynthConfig,
    TrainingItem,
    check_no_leakage,
    featurize,
    inflate,
    kfold_plan,
    parse_manifest,
    stratified_split,
    synth_generate,
)
from uavpeft.dsp import FeatureConfig, Waveform
from uavpeft.models import (
    CompactCnn,
    CompactCnnConfig,
    SpecTransformer,
    SpecTransformerConfig,
)
from uavpeft.peft import (
    FineTuneStrategy,
    Oft,
    StrategyError,
    apply_strategy,
    param_stats,
)
from uavpeft.tensor import Tensor, finite_diff_check, no_grad, precision
from uavpeft.train import (
    ArrayDataset,
    Optimizer,
    OptimizerConfig,
    TrainConfig,
    cross_entropy,
    train_epoch,
)


@contextmanager
def criterion(number, title, budget_s=None):
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as exc:
        print(f"[acceptance] criterion {number}: FAIL  {title} ({type(exc).__name__}: {exc})")
        raise
    print(f"[acceptance] criterion {number}: PASS  {title} ({time.perf_counter() - start:.1f}s)")


def _pct(trainable, total):
    return round(100 * trainable / total, 2)


# 1 -----------------------------------------------------------------------------


def _avoid_kinks(rng, shape, margin=0.05):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _op_checks(seed):
    rng = np.random.default_rng(seed)
    w = lambda *s: Tensor(rng.normal(size=s))
    smooth = [
        (lambda x, a: (x * a + a).sum(), (3, 4), w(1, 4)),
        (lambda x, a: (a / (x * x + 1.0)).sum(), (3, 4), w(3, 4)),
        (lambda x, a: ((x * a).exp() + 1.0).log().sum(), (2, 5), w(2, 5)),
        (lambda x, a: (T.gelu(x) * a).sum(), (4, 3), w(4, 3)),
        (lambda x, a: (T.matmul(x, a) * T.matmul(x, a)).sum(), (2, 3, 4), w(2, 4, 5)),
        (lambda x, a: (T.log_softmax(x, -1) * a).sum(), (3, 6), w(3, 6)),
        (lambda x, a: (T.softmax(x, -1) * a).sum(), (3, 6), w(3, 6)),
        (lambda x, a: (x.mean(axis=1) * a).sum(), (3, 4), w(3)),
        (lambda x, a: (x.reshape(4, 3).transpose(1, 0) * a).sum(), (3, 4), w(3, 4)),
        (lambda x, a: (T.concat([x, x * x], axis=1) * a).sum(), (2, 3), w(2, 6)),
        (lambda x, a: (T.conv2d(x, a, padding=1) * T.conv2d(x, a, padding=1)).sum(), (2, 2, 5, 6), w(3, 2, 3, 3)),
        (lambda x, a: (T.avg_pool2d(x, 2) * a).sum(), (1, 2, 4, 6), w(1, 2, 2, 3)),
        (lambda x, a: (T.adaptive_avg_pool2d(x, (2, 3)) * a).sum(), (1, 2, 5, 7), w(1, 2, 2, 3)),
        (lambda x, a: (T.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True) * a).sum(),
         (3, 2, 4, 5), w(3, 2, 4, 5)),
        (lambda x, a: (T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))) * a).sum(), (2, 3, 6), w(2, 3, 6)),
        (lambda x, a: (T.scaled_dot_attention(x, x * 0.5, x + 1.0) * a).sum(), (2, 3, 4), w(2, 3, 4)),
    ]
    worst_smooth = 0.0
    for f, shape, a in smooth:
        x = Tensor(rng.uniform(-2, 2, size=shape))
        worst_smooth = max(worst_smooth, finite_diff_check(lambda t, f=f, a=a: f(t, a), x))
    x = Tensor(_avoid_kinks(rng, (3, 5)))
    a = w(3, 5)
    worst_kink = finite_diff_check(lambda t: (T.relu(t) * a).sum(), x)
    p = Tensor(rng.permutation(32).reshape(1, 2, 4, 4) * 0.1)
    a = w(1, 2, 2, 2)
    worst_kink = max(worst_kink, finite_diff_check(lambda t: (T.max_pool2d(t, 2) * a).sum(), p))
    return worst_smooth, worst_kink


def _model_checks(seed):
    rng = np.random.default_rng(seed)
    tf = SpecTransformer(SpecTransformerConfig(n_mels=16, input_frames=16, patch=8, embed_dim=8, heads=2, depth=2,
                                               mlp_ratio=2, n_classes=3), seed=seed)
    tf.eval()
    x = Tensor(rng.normal(size=(3, 1, 16, 16)))
    labels = np.array([0, 1, 2])
    tf_err = max(
        finite_diff_check(lambda _: cross_entropy(tf(x), labels), p, coords=range(min(p.size, 6)))
        for p in tf.parameters()
    )
    cnn = CompactCnn(CompactCnnConfig(block_widths=(2, 3, 4), hidden_fc=6, dropout_p=0.0, adaptive_pool_out=(2, 2),
                                      n_classes=3), seed=seed)
    xc = Tensor(rng.normal(size=(4, 1, 16, 16)))
    lc = np.array([0, 1, 2, 0])
    cnn_err = max(
        finite_diff_check(lambda _: cross_entropy(cnn(xc), lc), p, coords=range(min(p.size, 6)))
        for p in cnn.parameters()
    )
    return tf_err, cnn_err


def test_criterion_01_gradient_correctness():
    with criterion(1, "finite-difference gradients, 10 seeds, 64-bit", budget_s=120), precision("float64"):
        for seed in range(10):
            smooth, kink = _op_checks(seed)
            assert smooth < 1e-5, f"seed {seed}: smooth op rel err {smooth:.2e}"
            assert kink < 1e-3, f"seed {seed}: kinked op rel err {kink:.2e}"
            tf_err, cnn_err = _model_checks(seed)
            assert tf_err < 1e-5, f"seed {seed}: transformer rel err {tf_err:.2e}"
            assert cnn_err < 1e-3, f"seed {seed}: cnn rel err {cnn_err:.2e}"


# 2 -----------------------------------------------------------------------------


def test_criterion_02_identity_at_init():
    with criterion(2, "adapters are the identity at init on 100 inputs", budget_s=60):
        rng = np.random.default_rng(0)
        cases = [("cnn", "ssf"), ("transformer", "ssf"), ("transformer", "ia3"), ("transformer", "oft")]
        for arch, kind in cases:
            base = (CompactCnn() if arch == "cnn" else SpecTransformer()).eval()
            adapted, _ = apply_strategy(base, FineTuneStrategy.parse(kind, ia3_query=True))
            adapted.eval()
            x = Tensor(rng.normal(size=(100, 1, 64, 157)))
            with no_grad():
                diff = np.abs(adapted(x).data - base(x).data).max()
            assert diff <= 1e-5, f"{arch}/{kind}: {diff:.2e}"


# 3 -----------------------------------------------------------------------------


def test_criterion_03_oft_orthogonality():
    with criterion(3, "OFT blocks orthogonal after 100 steps"):
        cfg = SpecTransformerConfig(n_mels=32, input_frames=32, embed_dim=16, heads=2, depth=2, mlp_ratio=2, n_classes=4)
        model, mask = apply_strategy(SpecTransformer(cfg), "oft")
        opt = Optimizer.for_model(model, mask, OptimizerConfig(lr=1e-2))
        rng = np.random.default_rng(0)
        centers = rng.normal(size=(4, 1, 32, 32))
        model.train()
        for _ in range(100):
            y = rng.integers(0, 4, 8)
            x = Tensor(centers[y] + 0.3 * rng.normal(size=(8, 1, 32, 32)))
            opt.zero_grad()
            cross_entropy(model(x), y).backward()
            opt.step()
        blocks = [m for _, m in model.named_modules() if isinstance(m, Oft)]
        assert blocks
        for m in blocks:
            assert np.abs(m.skew.data).max() > 0
            r = m.rotation().data.astype(np.float64)
            eye = np.eye(r.shape[-1])
            assert np.abs(np.swapaxes(r, -1, -2) @ r - eye).max() < 1e-5


# 4 -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = SynthConfig(n_classes=3, clips_per_class=8, duration=1.0)
    entries = parse_manifest(synth_generate(cfg, root))
    labels = {name: i for i, name in enumerate(sorted({e.label for e in entries}))}
    x = featurize([TrainingItem(e) for e in entries], FeatureConfig(), AugmentationPlan(k=0))
    x = (x - x.mean()) / x.std()
    return ArrayDataset(x, np.array([labels[e.label] for e in entries]))


@pytest.mark.parametrize(
    "arch,kind",
    [("cnn", "classifier_only"), ("cnn", "batchnorm"), ("cnn", "ssf"),
     ("transformer", "classifier_only"), ("transformer", "ssf"), ("transformer", "ia3"), ("transformer", "oft")],
)
def test_criterion_04_frozen_weight_integrity(tiny_synthetic, arch, kind):
    with criterion(4, f"frozen weights bit-identical after 5 epochs ({arch}/{kind})"):
        frames = tiny_synthetic.x.shape[-1]
        base = (CompactCnn(CompactCnnConfig(n_classes=3)) if arch == "cnn"
                else SpecTransformer(SpecTransformerConfig(input_frames=frames, n_classes=3)))
        model, mask = apply_strategy(base, kind)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        for epoch in range(5):
            opt = Optimizer.for_model(model, mask, OptimizerConfig(lr=1e-2))
            train_epoch(model, tiny_synthetic, opt, TrainConfig(batch_size=8, accumulation_steps=1, seed=epoch))
        frozen = [n for n, t in mask.items() if not t]
        assert frozen
        after = dict(model.named_parameters())
        for n in frozen:
            assert after[n].data.tobytes() == before[n].tobytes(), n
        assert any(not np.array_equal(after[n].data, before[n]) for n, t in mask.items() if t)


# 5 -----------------------------------------------------------------------------


def test_criterion_05_parameter_accounting():
    with criterion(5, "trainable percentages match closed forms"):
        hc, ht = cnn_counts(), transformer_counts()
        cnn, tf = CompactCnn(), SpecTransformer()
        expected = {
            ("cnn", "full"): (hc["total"], hc["total"]),
            ("cnn", "classifier_only"): (hc["classifier"], hc["total"]),
            ("cnn", "batchnorm"): (hc["classifier"] + hc["batchnorm"], hc["total"]),
            ("cnn", "ssf"): (hc["classifier"] + hc["ssf_adapters"], hc["total"] + hc["ssf_adapters"]),
            ("transformer", "full"): (ht["total"], ht["total"]),
            ("transformer", "classifier_only"): (ht["classifier"], ht["total"]),
        }
        for kind in ("ssf", "ia3", "oft"):
            extra = ht[f"{kind}_adapters"]
            expected[("transformer", kind)] = (ht["classifier"] + extra, ht["total"] + extra)
        for (arch, kind), (trainable, total) in expected.items():
            stats = param_stats(*apply_strategy(cnn if arch == "cnn" else tf, kind))
            assert astuple(stats) == (total, trainable, _pct(trainable, total)), (arch, kind)
            if kind == "full":
                assert f"{stats.percent:.2f}" == "100.00"
        for arch, kind in (("cnn", "ia3"), ("cnn", "oft"), ("transformer", "batchnorm")):
            with pytest.raises(StrategyError):
                apply_strategy(cnn if arch == "cnn" else tf, kind)


# 6 -----------------------------------------------------------------------------


def test_criterion_06_split_laws():
    with criterion(6, "split sizes and leakage by set arithmetic", budget_s=10):
        entries = balanced()
        counts = stratified_split(entries, seed=0).counts()
        assert [counts[s] for s in (Split.TRAIN, Split.TEST, Split.VALIDATION, Split.INFERENCE)] == [1860, 620, 310, 310]
        plan = kfold_plan(entries, k=5, seed=0)
        everything = {e.clip_id for e in entries}
        assert len(plan.inference) == 310
        folds = [plan.validation(i) for i in range(5)]
        assert [len(f) for f in folds] == [558] * 5
        assert set().union(*folds) == plan.pool == everything - plan.inference
        assert all(not (folds[i] & folds[j]) for i in range(5) for j in range(i + 1, 5))
        by_id = {e.clip_id: e for e in entries}
        for i in range(5):
            assert kfold_plan(entries, k=5, seed=0).inference == plan.inference
            items = inflate([by_id[c] for c in sorted(plan.train(i))], AugmentationPlan(k=3))
            sources = {it.source for it in items}
            assert not (sources & folds[i]) and not (sources & plan.inference)
            check_no_leakage(items, folds[i], plan.inference)


# 7 -----------------------------------------------------------------------------


def test_criterion_07_augmentation_laws():
    with criterion(7, "inflation x4, length and amplitude bounds, identities"):
        entries = balanced()
        plan = kfold_plan(entries, k=5)
        by_id = {e.clip_id: e for e in entries}
        train = [by_id[c] for c in sorted(plan.train(0))]
        assert len(inflate(train, AugmentationPlan(k=3))) == 4 * len(train) == 8928

        rng = np.random.default_rng(0)
        spec = AugmentationSpec()
        for seed in range(5):
            w = Waveform(rng.uniform(-1, 1, 16000 + 137 * seed), 16000)
            out = apply_plan(w, clip_id=seed, plan=AugmentationPlan(k=3, global_seed=seed), spec=spec)
            assert len(out) == 3
            for y in out:
                assert len(y) == len(w)
                assert np.all(np.abs(y.samples) <= 1.0)

        t = np.arange(16000) / 16000
        tone = Waveform(0.8 * np.sin(2 * np.pi * 440 * t), 16000)
        np.testing.assert_allclose(time_stretch(tone, 1.0).samples, tone.samples, atol=1e-6)
        small = sin_distortion(tone, 1e-4).samples
        np.testing.assert_allclose(small, tone.samples, atol=1e-6)


# 8 -----------------------------------------------------------------------------


@pytest.mark.parametrize("arch", ["cnn", "transformer"])
def test_criterion_08_loss_sanity(arch):
    with criterion(8, f"untrained cross-entropy near ln 31 ({arch})"):
        for seed in range(3):
            model = (CompactCnn(seed=seed) if arch == "cnn" else SpecTransformer(seed=seed)).eval()
            x = Tensor(np.random.default_rng(seed).normal(size=(62, 1, 64, 157)))
            with no_grad():
                loss = cross_entropy(model(x), np.arange(62) % 31).item()
            assert abs(loss - math.log(31)) / math.log(31) < 0.05, f"seed {seed}: {loss:.4f}"


# 9 -----------------------------------------------------------------------------


def test_criterion_09_accumulation_equivalence():
    with criterion(9, "batch 8 x accum 2 matches batch 16"):
        for seed in range(3):
            data = toy_data(16, seed=seed)
            a, b = TinyMlp(seed), TinyMlp(seed)
            train_epoch(a, data, Optimizer.for_model(a, full_mask(a), OptimizerConfig()),
                        TrainConfig(batch_size=8, accumulation_steps=2, seed=seed))
            train_epoch(b, data, Optimizer.for_model(b, full_mask(b), OptimizerConfig()),
                        TrainConfig(batch_size=16, accumulation_steps=1, seed=seed))
            for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
                assert np.abs(pa.data - pb.data).max() < 1e-6, n


# 10 ----------------------------------------------------------------------------


def _summary(run):
    return json.loads((Path(run) / "summary.json").read_text())


@pytest.mark.slow
def test_criterion_10_synthetic_end_to_end(tmp_path, capsys):
    with criterion(10, "default synthetic set end to end", budget_s=15 * 60):
        assert main(["synth", str(tmp_path / "data")]) == 0
        common = ["--manifest", str(tmp_path / "data" / "manifest.csv"), "--n_classes", "8",
                  "--feature_cache", str(tmp_path / "cache"), "--seed", "0"]

        assert main(["train", str(tmp_path / "full"), *common, "--max_epochs", "20"]) == 0
        full = _summary(tmp_path / "full")
        assert full["epochs_run"] <= 20
        assert full["validation"]["accuracy"] >= 0.90, full["validation"]

        acc = {}
        for kind in ("classifier_only", "batchnorm", "ssf"):
            assert main(["train", str(tmp_path / kind), *common, "--augs", "0", "--max_epochs", "20",
                         "--strategy", kind]) == 0
            acc[kind] = _summary(tmp_path / kind)["validation"]["accuracy"]
        assert acc["ssf"] >= acc["classifier_only"], acc
        assert acc["batchnorm"] >= acc["classifier_only"], acc

        capsys.readouterr()
        assert main(["kfold", str(tmp_path / "kfold"), *common, "--augs", "0", "--max_epochs", "10"]) == 0
        row = capsys.readouterr().out.strip().splitlines()[-1]
        assert re.search(r"\d{1,3}\.\d{2}% ± \d{1,3}\.\d{2}%$", row), row
        assert len(_summary(tmp_path / "kfold")["accuracy"]) == 5
        with capsys.disabled():
            print(f"\n  full={full['validation']['accuracy']:.4f} {acc} kfold: {row}")


# 11 ----------------------------------------------------------------------------


def _metrics_without_timing(path):
    lines = []
    for line in Path(path).read_text().splitlines():
        row = json.loads(line)
        row.pop("seconds", None)
        lines.append(json.dumps(row))
    return lines


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_criterion_11_determinism(tmp_path, capsys):
    with criterion(11, "reruns reproduce outputs byte for byte"):
        small = ["--synth_classes", "3", "--synth_clips", "20", "--synth_duration", "0.5", "--seed", "3"]
        for name in ("a", "b"):
            assert main(["synth", str(tmp_path / f"data_{name}"), *small]) == 0
        assert _tree(tmp_path / "data_a") == _tree(tmp_path / "data_b")

        manifest = str(tmp_path / "data_a" / "manifest.csv")
        for cmd, extra in (("train", ["--augs", "1", "--strategy", "ssf"]), ("kfold", ["--augs", "1", "--folds", "3"])):
            for name in ("a", "b"):
                assert main([cmd, str(tmp_path / f"{cmd}_{name}"), "--manifest", manifest, "--max_epochs", "3",
                             "--seed", "3", *extra]) == 0
            logs = sorted(p.relative_to(tmp_path / f"{cmd}_a") for p in (tmp_path / f"{cmd}_a").rglob("metrics.jsonl"))
            assert logs
            for rel in logs:
                assert _metrics_without_timing(tmp_path / f"{cmd}_a" / rel) == _metrics_without_timing(tmp_path / f"{cmd}_b" / rel)
            for name in ("predictions_inference.csv", "splits.csv", "folds.csv"):
                for p in (tmp_path / f"{cmd}_a").rglob(name):
                    rel = p.relative_to(tmp_path / f"{cmd}_a")
                    assert p.read_bytes() == (tmp_path / f"{cmd}_b" / rel).read_bytes(), rel

        outputs = []
        for _ in range(2):
            capsys.readouterr()
            assert main(["params", "--n_classes", "8"]) == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]
