"""Acceptance gate: one PASS/FAIL line per primary criterion.

Each test wraps its assertions in ``criterion(...)`` so the outcome is
printed inline and repeated in the terminal summary.  Tolerances are the
stated ones; nothing here is loosened to make a criterion pass.
"""

import dataclasses
import time

import numpy as np
import pytest
import torch

from lvsnet.audit import REFERENCE_GFLOPS, REFERENCE_MB, REFERENCE_PARAMS, audit_complexity
from lvsnet.checkpoint import load_checkpoint, save_checkpoint
from lvsnet.config import FeatureMapSpec, ModelConfig, TrainConfig
from lvsnet.data import AugmentationPlan, Dataset, discover, iter_augment, load_pair, split
from lvsnet.metrics import (
    binarize,
    confusion,
    f1_threshold,
    metrics_from_counts,
    roc_auc,
)
from lvsnet.model import SFRB, build_model, count_trainable, expected_taps
from lvsnet.reports import render_overlay
from lvsnet.training import ABLATION_COLUMNS, Split, evaluate, predict, run_ablation, train

import test_gradients as grads
from conftest import small_config
from oracles import (
    best_partition,
    loop_confusion,
    loop_overlay,
    pairwise_auc,
    random_instance,
    ratio_metrics,
)
from test_audit import hooked_macs

SMOKE_SIZE = 256
SMOKE_MAX_EPOCHS = 200
SMOKE_TARGET = 0.90
SMOKE_BUDGET_S = 30 * 60


def test_shape_suite(criterion):
    with criterion("Shape suite: 512x512x3 forward, 12-tap channel trace") as c:
        cfg = ModelConfig()
        t0 = time.perf_counter()
        model = build_model(cfg).eval()
        with torch.no_grad():
            taps = model.taps(torch.rand(1, 3, 512, 512, generator=torch.Generator().manual_seed(0)))
        elapsed = time.perf_counter() - t0
        expected = expected_taps(cfg)
        assert len(expected) == 12
        for name, spec in expected.items():
            assert FeatureMapSpec.of(taps[name]) == spec, name
        assert FeatureMapSpec.of(taps["out"]).as_tuple() == (512, 512, cfg.num_classes)
        c.note(f"{len(expected)}/12 taps match, {elapsed:.1f}s")
        assert elapsed < 60


def test_parameter_audit(criterion):
    with criterion("Parameter audit: 0.71 M +-10%, equals backend count, 2.4-3.2 MB") as c:
        cfg = ModelConfig()
        a = audit_complexity(cfg)
        backend = count_trainable(build_model(cfg))
        c.note(f"{a.parameter_count} params ({a.parameter_count / REFERENCE_PARAMS - 1:+.1%}), backend {backend}, "
               f"{a.megabytes:.3f} MB vs {REFERENCE_MB}")
        assert abs(a.parameter_count / REFERENCE_PARAMS - 1) <= 0.10
        assert a.parameter_count == backend
        assert a.serialized_bytes == 4 * a.parameter_count
        assert 2.4 <= a.megabytes <= 3.2


def test_flop_audit(criterion):
    with criterion("FLOP audit: 29.60 GFLOPs +-20% at 512x512, reconciled with per-layer MACs") as c:
        cfg = ModelConfig()
        a = audit_complexity(cfg)
        hooked = 2 * hooked_macs(cfg)
        c.note(f"{a.gflops:.2f} GFLOPs ({a.gflops / REFERENCE_GFLOPS - 1:+.1%}); "
               f"conv part {a.conv_flops / 1e9:.2f} G vs hook count {hooked / 1e9:.2f} G")
        assert a.conv_flops == hooked
        assert abs(a.gflops / REFERENCE_GFLOPS - 1) <= 0.20


def test_gradient_suite(criterion):
    with criterion("Gradient suite: dice loss, stem, FMAM, SFRB, decoder stage; float64 rel err < 1e-4") as c:
        t0 = time.perf_counter()
        grads.test_dice_loss_gradient()
        grads.test_stem_gradient()
        for act in ("gelu", "relu"):
            grads.test_fmam_gradient(act)
        for conv in ("full", "separable", "depthwise"):
            for mode in ("train", "eval"):
                grads.test_sfrb_gradient(conv, mode)
        grads.test_decoder_stage_gradient()
        elapsed = time.perf_counter() - t0
        c.note(f"{elapsed:.1f}s")
        assert elapsed < 120


def test_metric_oracles(criterion):
    with criterion("Metric oracles: 200 random 16x16 instances, exact counts, ratios < 1e-12") as c:
        rng = np.random.default_rng(20240601)
        worst = 0.0
        for _ in range(200):
            scores, truth = random_instance(rng)
            pred = scores >= rng.random()
            cnt = confusion(pred, truth)
            assert (cnt.tp, cnt.tn, cnt.fp, cnt.fn) == loop_confusion(pred, truth)
            report = metrics_from_counts(cnt)
            for k, v in ratio_metrics(*loop_confusion(pred, truth)).items():
                worst = max(worst, abs(getattr(report, k) - v))
            _, auc = roc_auc(scores, truth)
            worst = max(worst, abs(auc - pairwise_auc(scores, truth)))
            t = f1_threshold(scores, truth)
            best, mask = best_partition(scores, truth)
            assert np.array_equal(binarize(scores, t), mask)
            worst = max(worst, abs(metrics_from_counts(confusion(binarize(scores, t), truth)).dice - best))
        c.note(f"max ratio deviation {worst:.1e}")
        assert worst < 1e-12


def test_residual_identity(criterion):
    with criterion("Residual identity: SFRB with zeroed branch returns input bit-exactly") as c:
        for conv in ("full", "separable", "depthwise"):
            torch.manual_seed(0)
            m = SFRB(24, small_config(sfrb_conv=conv))
            with torch.no_grad():
                for p in m.conv2.parameters():
                    p.zero_()
                m.bn2.weight.zero_()
                m.bn2.bias.zero_()
            x = torch.randn(2, 24, 16, 16) * 3
            for mode in (True, False):
                m.train(mode)
                with torch.no_grad():
                    diff = (m(x) - x).abs().max().item()
                assert diff == 0.0
        c.note("max |out - in| = 0 for all variants, train and eval")


def test_augmentation_count(criterion, drive_root):
    with criterion("Augmentation count: DRIVE train manifest -> 720 pairs; no split leakage over 32 seeds") as c:
        entries = discover(drive_root, Dataset.DRIVE).by_split("train")
        pool = []
        for pair in iter_augment([load_pair(e) for e in entries], AugmentationPlan(), seed=0):
            pool.append(dataclasses.replace(pair, image=pair.image[:1, :1], mask=pair.mask[:1, :1], fov=None))
        assert len(pool) == 720
        assert len({p.id for p in pool}) == 720
        for seed in range(32):
            tr, va = split(pool, 0.8, seed)
            assert not ({p.base_id for p in tr} & {p.base_id for p in va})
            assert (len(tr), len(va)) == (576, 144)
        c.note(f"{len(entries)} bases -> {len(pool)} pairs; 32/32 seeds leak-free")


# -- smoke training -----------------------------------------------------------

@pytest.fixture(scope="module")
def smoke_run(drive_root, tmp_path_factory):
    entries = discover(drive_root, Dataset.DRIVE).by_split("train")[:2]
    data = Split.from_pairs([load_pair(e) for e in entries], (SMOKE_SIZE, SMOKE_SIZE))
    cfg = ModelConfig(input_height=SMOKE_SIZE, input_width=SMOKE_SIZE, seed=0)
    tc = TrainConfig(batch_size=8, learning_rate=1e-3, epochs=SMOKE_MAX_EPOCHS, seed=0,
                     checkpoint_every=0, target_dice=SMOKE_TARGET)
    out = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    record = train(cfg, data, data, tc, out_dir=out)
    return record, data, time.perf_counter() - t0, out


@pytest.mark.slow
def test_smoke_training(criterion, smoke_run):
    with criterion("Smoke training: 2 DRIVE images at 256x256, train dice >= 0.90 within 200 epochs, < 30 min") as c:
        record, data, elapsed, out = smoke_run
        c.note(f"dice {record.best_val_dice:.4f} at epoch {record.best_epoch}, {elapsed / 60:.1f} min")
        assert record.best_val_dice >= SMOKE_TARGET
        assert record.best_epoch <= SMOKE_MAX_EPOCHS
        assert elapsed < SMOKE_BUDGET_S
        # the saved best checkpoint reproduces the recorded score
        ev = evaluate(out / "checkpoints" / "best.npz", data, threshold=record.best_threshold)
        assert ev.pooled.dice == pytest.approx(record.best_val_dice, abs=1e-12)


@pytest.mark.slow
def test_smoke_loss_trend(smoke_run):
    record = smoke_run[0]
    losses = np.array([e.train_loss for e in record.epochs])
    window = 10
    p90 = [np.percentile(losses[i : i + window], 90) for i in range(0, len(losses) - window + 1, window)]
    assert all(b <= a + 1e-3 for a, b in zip(p90, p90[1:])), p90


@pytest.fixture(scope="module")
def ablation_table(drive_root):
    m = discover(drive_root, Dataset.DRIVE)
    size = (128, 128)
    train_pairs = [load_pair(e) for e in m.by_split("train")[:4]]
    test_pairs = [load_pair(e) for e in m.by_split("test")[:2]]
    tr = Split.from_pairs(train_pairs, size)
    te = Split.from_pairs(test_pairs, size)
    cfg = ModelConfig(input_height=128, input_width=128, seed=0)
    tc = TrainConfig(batch_size=8, epochs=40, seed=0, checkpoint_every=0)
    return run_ablation(["LU", "Full"], cfg, tr, tr, tc, te)


@pytest.mark.slow
def test_smoke_ablation_report(criterion, ablation_table):
    from lvsnet.cli import format_ablation

    with criterion("Smoke ablation: LU vs full model completes and emits the ablation-shaped report") as c:
        assert [r for r, _ in ablation_table] == ["LU", "Full"]
        text = format_ablation(ablation_table)
        header = text.splitlines()[0].split()
        assert header == ["Method"] + list(ABLATION_COLUMNS)
        assert len(text.splitlines()) == 3
        print("\n" + text)
        dice = {r: rep.dice for r, rep in ablation_table}
        c.note(f"dice LU {dice['LU']:.4f}, Full {dice['Full']:.4f}")


@pytest.mark.slow
def test_smoke_ablation_direction(ablation_table):
    dice = {r: rep.dice for r, rep in ablation_table}
    assert dice["Full"] >= dice["LU"] - 0.02


def test_overlay_bit_exactness(criterion):
    with criterion("Overlay bit-exactness: four-case colour mapping equals loop oracle on 100 pairs") as c:
        rng = np.random.default_rng(99)
        for _ in range(100):
            pred, truth = rng.random((8, 8)) < 0.5, rng.random((8, 8)) < 0.5
            base = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
            assert np.array_equal(render_overlay(pred, truth, base), loop_overlay(pred, truth, base))
        c.note("100/100 identical")


def test_checkpoint_round_trip(criterion, tmp_path):
    with criterion("Checkpoint round-trip: save/load/evaluate equality, bit-exact") as c:
        rng = np.random.default_rng(0)
        from lvsnet.data import SamplePair
        from lvsnet.synthetic import synthetic_fundus

        pairs = [SamplePair(*synthetic_fundus(32, 32, rng)[:2], f"{i}", Dataset.DRIVE) for i in range(4)]
        data = Split.from_pairs(pairs, (32, 32))
        record = train(small_config(), data, data, TrainConfig(batch_size=4, epochs=2, checkpoint_every=0))
        before = evaluate(record.model, data, threshold=record.best_threshold)
        path = save_checkpoint(record.model, tmp_path / "ckpt.npz")
        loaded, _ = load_checkpoint(path)
        after = evaluate(loaded, data, threshold=record.best_threshold)
        with torch.no_grad():
            assert torch.equal(predict(record.model, data.images), predict(loaded, data.images))
        assert before.per_image == after.per_image
        assert before.pooled == after.pooled and before.auc == after.auc
        c.note("probability maps and reports identical")
