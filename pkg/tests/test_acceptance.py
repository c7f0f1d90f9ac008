"""
Exit criteria. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion.

The two training criteria (7, 8) are marked ``slow``. The bench criterion
reuses a finished bench if ``SARFUSE_BENCH_DIR`` points at one (resume).
"""

import json
import os
import time

import numpy as np
import pytest
import torch

from sarfuse import cli
from sarfuse.data import Sample, load_dataset
from sarfuse.evaluation import ConfusionCounts, EvalTable, check_orderings, confusion, evaluate, f1_iou, predict, read_csv
from sarfuse.losses import LossConfig, batch_loss, feature_similarity, power_jaccard, sample_loss
from sarfuse.models import BackboneConfig, batch_tensors, build_model, forward, load_checkpoint
from sarfuse.simulator import SimConfig, generate_dataset
from sarfuse.training import TrainConfig, train

from conftest import SMALL_BACKBONE, random_sample

VARIANTS = ("proposed", "ds-zerofill", "unimodal-sar")


def brute_force_counts(pred, label, threshold=0.5):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            positive = pred[i, j] >= threshold
            truth = label[i, j] == 1
            if positive and truth:
                tp += 1
            elif positive:
                fp += 1
            elif truth:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


@pytest.mark.criterion(1, "metric oracle equivalence on 500 random 16x16 pairs")
def test_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for k in range(500):
        pred = rng.random((16, 16))
        label = (rng.random((16, 16)) < rng.uniform(0.0, 0.6)).astype(np.float32)
        if k % 50 == 0:
            label[:] = 0
        tp, fp, fn, tn = brute_force_counts(pred, label)
        counts = confusion(pred, label, 0.5)
        assert (counts.tp, counts.fp, counts.fn, counts.tn) == (tp, fp, fn, tn)
        if tp + fp + fn == 0:
            expected = (1.0, 1.0)
        else:
            expected = (tp / (tp + 0.5 * (fp + fn)), tp / (tp + fp + fn))
        f1, iou = f1_iou(counts)
        assert abs(f1 - expected[0]) <= 1e-12 and abs(iou - expected[1]) <= 1e-12
    assert time.perf_counter() - start < 10


@pytest.mark.criterion(2, "F1 = 2 IoU / (1 + IoU) for every emitted pair")
def test_eq1_identity(sim_root):
    rng = np.random.default_rng(7)
    pairs = []
    for _ in range(500):
        tp, fp, fn = (int(x) for x in rng.integers(0, 200, 3))
        pairs.append(f1_iou(ConfusionCounts(tp, fp, fn, 0)))
    pairs.append(f1_iou(ConfusionCounts(0, 0, 0, 5)))
    pairs.append(f1_iou(ConfusionCounts(0, 4, 0, 5)))
    table = EvalTable()
    for variant in VARIANTS:
        bundle = build_model(variant, SMALL_BACKBONE, 0)
        table.add_result(variant, 0, evaluate(bundle, load_dataset(sim_root, "test")))
    pairs += [(r.f1, r.iou) for r in table.records]
    for f1, iou in pairs:
        assert abs(f1 - 2 * iou / (1 + iou)) <= 1e-12


@pytest.mark.criterion(3, "Power Jaccard gradient vs central finite differences")
def test_power_jaccard_gradient_check():
    rng = np.random.default_rng(3)
    config = LossConfig()
    h = 1e-4
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        pred = rng.uniform(0.05, 0.95, (1, 8, 8))
        target = torch.as_tensor((rng.random((1, 8, 8)) < 0.5).astype(np.float64))
        p = torch.as_tensor(pred).requires_grad_()
        power_jaccard(p, target, config).backward()
        analytic = p.grad.numpy().ravel()
        numeric = np.empty(pred.size)
        for i in range(pred.size):
            up, down = pred.copy(), pred.copy()
            up.flat[i] += h
            down.flat[i] -= h
            numeric[i] = (power_jaccard(torch.as_tensor(up), target, config).item()
                          - power_jaccard(torch.as_tensor(down), target, config).item()) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
        worst = max(worst, rel.max())
    assert worst <= 1e-4, worst
    assert time.perf_counter() - start < 30


def _double_model(variant, seed=0):
    return build_model(variant, SMALL_BACKBONE, seed).double().eval()


def _as_double(samples):
    sar, optical, available, label = batch_tensors(samples)
    return sar.double(), None if optical is None else optical.double(), available, label.double()


@pytest.mark.criterion(4, "loss case dispatch and mixed-batch additivity")
def test_loss_dispatch_and_additivity():
    rng = np.random.default_rng(4)
    bundle = _double_model("proposed")
    config = LossConfig()
    with torch.no_grad():
        for _ in range(100):
            n = int(rng.integers(2, 6))
            flags = [bool(f) for f in rng.random(n) < 0.7]
            flags[int(rng.integers(n))] = False
            samples = [random_sample(rng, 16, available=f, site_id=str(i)) for i, f in enumerate(flags)]
            sar, optical, available, label = _as_double(samples)
            reports = [sample_loss(o, label[i], config) for i, o in enumerate(bundle(sar, optical, available))]
            independent = 0.0
            for s in samples:
                s_sar, s_opt, s_av, s_label = _as_double([s])
                r = sample_loss(bundle(s_sar, s_opt, s_av)[0], s_label[0], config)
                independent += r.total.item()
                if not s.optical_available:
                    assert r.supervised_fused is None and r.similarity is None
                    assert r.total.item() == r.supervised_sar_path.item()
            for r, f in zip(reports, flags):
                terms = [t for t in (r.supervised_fused, r.supervised_sar_path, r.similarity) if t is not None]
                assert len(terms) == (3 if f else 1)
            assert abs(batch_loss(reports).item() - independent) <= 1e-9


@pytest.mark.criterion(5, "phi-linearity of the multi-modal total")
def test_phi_linearity():
    rng = np.random.default_rng(5)
    bundle = _double_model("proposed")
    for _ in range(20):
        s = random_sample(rng, 16)
        sar, optical, available, label = _as_double([s])
        with torch.no_grad():
            out = bundle(sar, optical, available)[0]
        a = sample_loss(out, label[0], LossConfig(phi=0.01))
        b = sample_loss(out, label[0], LossConfig(phi=0.02))
        sim = feature_similarity(out.f_s2, out.f_s2_hat).item()
        assert abs((b.total.item() - a.total.item()) - 0.01 * sim) <= 1e-9


@pytest.mark.criterion(6, "reconstruction fixed point: f_s2_hat := f_s2 gives p_fused bit-exactly")
def test_reconstruction_fixed_point():
    rng = np.random.default_rng(6)
    bundle = build_model("proposed", BackboneConfig(), 0).eval()
    with torch.no_grad():
        for n in (1, 4):
            samples = [random_sample(rng, 64) for _ in range(n)]
            sar, optical, available, _ = batch_tensors(samples)
            outs = bundle(sar, optical, available)
            f_s1 = torch.stack([o.f_s1 for o in outs])
            f_s2 = torch.stack([o.f_s2 for o in outs])
            p_sar_path = bundle.fuse(f_s1, f_s2)
            p_fused = torch.stack([o.p_fused for o in outs])
            assert torch.equal(p_sar_path, p_fused)


def _mean_similarity(bundle, dataset):
    bundle.eval()
    values = []
    with torch.no_grad():
        for s in dataset:
            if s.optical_available:
                out = forward(bundle, s)
                values.append(feature_similarity(out.f_s2, out.f_s2_hat).item())
    return float(np.mean(values))


@pytest.mark.slow
@pytest.mark.criterion(7, "reconstruction learnability: validation similarity < 10% of initial")
def test_reconstruction_learnability(tmp_path):
    # sigma_x = 0, speckle- and clutter-free SAR: optical is a deterministic function of SAR
    sim = SimConfig(num_sites=28, timestamps_per_site=8, dropout_rate=0.0, cross_modal_noise=0.0, seed=31,
                    speckle_looks=None, clutter=0.0)
    generate_dataset(sim, tmp_path / "data")
    assert len(load_dataset(tmp_path / "data", "train")) >= 128
    val = load_dataset(tmp_path / "data", "val")
    config = TrainConfig(variant="proposed", learning_rate=1e-3, max_epochs=20, patience=19, seed=0)
    initial = _mean_similarity(build_model("proposed", config.backbone, config.seed, config.patch_size), val)
    start = time.perf_counter()
    record = train(config, tmp_path / "data", tmp_path / "run")
    bundle, _ = load_checkpoint(record.checkpoint)
    final = _mean_similarity(bundle, val)
    print(f"similarity initial {initial:.5f} final {final:.5f} ratio {final / initial:.4f} "
          f"({time.perf_counter() - start:.0f}s)")
    assert record.epochs_run <= 20
    assert final < 0.1 * initial


@pytest.mark.slow
@pytest.mark.criterion(8, "ordering reproduction on the desk-scale synthetic bench")
def test_bench_orderings(tmp_path):
    out = os.environ.get("SARFUSE_BENCH_DIR") or str(tmp_path / "bench")
    start = time.perf_counter()
    status = cli.main(["bench", "--out", out, "--resume"])
    elapsed = time.perf_counter() - start
    table = EvalTable()
    for variant in VARIANTS:
        table.extend(read_csv(os.path.join(out, variant, "eval.csv")))
    for variant in VARIANTS:
        assert len(table.seeds(variant)) == 3
    checks = check_orderings(table)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"bench wall time {elapsed:.0f}s")
    assert all(ok for _, ok, _ in checks)
    assert status == 0
    assert elapsed < 2 * 3600


@pytest.mark.criterion(9, "determinism of two identical train executions")
def test_train_determinism(sim_root, tmp_path):
    config = {"variant": "proposed", "learning_rate": 1e-3, "batch_size": 8, "max_epochs": 3, "patience": 2,
              "patch_size": 32, "seed": 5, "num_runs": 1,
              "backbone": {"feature_channels": 4, "depth": 2, "base_width": 8}}
    path = tmp_path / "train.json"
    path.write_text(json.dumps(config))
    records = []
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(path), "--data", str(sim_root), "--out", str(tmp_path / name)]) == 0
        records.append(json.loads((tmp_path / name / "seed_5" / "run_record.json").read_text()))
    a, b = records
    assert abs(a["best_val_f1"] - b["best_val_f1"]) <= 1e-6
    assert a["best_epoch"] == b["best_epoch"]
    assert a["train_loss"] == b["train_loss"]


@pytest.mark.criterion(10, "zero-fill semantics of the ds-zerofill baseline")
def test_zero_fill_semantics():
    rng = np.random.default_rng(10)
    bundle = build_model("ds-zerofill", BackboneConfig(), 0).eval()
    for size in (64, 60):
        s = random_sample(rng, size, available=False)
        manual = Sample(s.sar, np.zeros((4, size, size), dtype=np.float32), s.label, True)
        assert np.array_equal(predict(bundle, s), predict(bundle, manual))
        with torch.no_grad():
            assert torch.equal(forward(bundle, s).p_fused, forward(bundle, manual).p_fused)


@pytest.mark.criterion(11, "shape / range / finiteness over 100 random forward passes")
def test_shape_finiteness_suite():
    rng = np.random.default_rng(11)
    torch.manual_seed(11)
    passes = 0
    for size in (64, 128):
        for depth in (2, 3):
            config = BackboneConfig(depth=depth)
            bundles = {v: build_model(v, config, depth) for v in VARIANTS}
            for k in range(25):
                variant = VARIANTS[k % 3]
                bundle = bundles[variant].train(k % 2 == 0)
                flags = [bool(f) for f in rng.random(2) < 0.6]
                samples = [random_sample(rng, size, available=f) for f in flags]
                sar, optical, available, _ = batch_tensors(samples)
                mode = "force-missing" if k % 4 == 3 else "auto"
                with torch.no_grad():
                    outs = bundle(sar * float(rng.uniform(0.1, 5)), optical, available, mode)
                for o in outs:
                    for name in ("p_fused", "p_sar_path"):
                        p = getattr(o, name)
                        if p is not None:
                            assert p.shape == (1, size, size)
                            assert torch.isfinite(p).all() and p.min() >= 0 and p.max() <= 1
                    for name in ("f_s1", "f_s2", "f_s2_hat"):
                        f = getattr(o, name)
                        if f is not None:
                            assert f.shape == (config.feature_channels, size, size)
                            assert torch.isfinite(f).all()
                passes += 1
    assert passes == 100
