"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The phantom end-to-end and
ensemble-relationship criteria train real models and dominate the runtime.
"""

import filecmp
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import (asd_oracle, conv3d_oracle, cross_entropy_oracle,
                     directed_p95_oracle, finite_diff_grads, rel_grad_error)
from vseg import autodiff as ad
from vseg.cli import main as cli_main
from vseg.data import TISSUE_CLASSES, CLASS_NAMES
from vseg.ensemble import (EnsembleConfig, confidence_error_correlation,
                           confidence_histograms, majority_vote,
                           partition_confidence, segment_subject, train_ensemble)
from vseg.metrics import asd, boundary_voxels, dsc, evaluate, mhd95
from vseg.network import (NetworkConfig, build_network, forward_segment,
                          parameter_count)
from vseg.phantom import PhantomConfig, generate_phantom, nearest_mean_labels
from vseg.training import (TrainConfig, batch_arrays, batch_loss, dense_inference,
                           lr_at_epoch, normalize_intensities, sample_segments, train)
from vseg.volume import Volume, read_volume, write_volume


def _pass(name, detail=""):
    print(f"\n[ACCEPT] {name}: PASS {detail}".rstrip())


# ---------------------------------------------------------------------------
# C1 gradient suite
# ---------------------------------------------------------------------------

def test_c1_gradient_suite():
    start = time.time()
    tol, step = 1e-4, 1e-4
    rng = np.random.default_rng(1001)

    def check(fwd, arrays, tag):
        tensors = [ad.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        buffers = [t.data for t in tensors]
        with ad.Tape():
            loss = fwd(*tensors)
        ad.backward(loss)
        numeric = finite_diff_grads(lambda: fwd(*[ad.Tensor(b, dtype=np.float64)
                                                  for b in buffers]).item(),
                                    buffers, h=step)
        for t, n, which in zip(tensors, numeric, range(len(arrays))):
            err = rel_grad_error(t.grad, n)
            assert err < tol, f"{tag} arg{which}: rel error {err:.2e}"

    def mix(t, seed):
        w = ad.Tensor(np.random.default_rng(seed).standard_normal(t.shape), dtype=np.float64)
        return ad.tensor_sum(ad.mul(t, w))

    check(lambda x, w, b: mix(ad.conv3d_valid(x, w, b), 7),
          [rng.standard_normal((2, 2, 5, 5, 5)), rng.standard_normal((3, 2, 3, 3, 3)),
           rng.standard_normal(3)], "conv3d_valid")
    check(lambda x, a: mix(ad.prelu(x, a), 8),
          [rng.standard_normal((2, 3, 4, 4, 4)), rng.uniform(0.1, 0.5, 3)], "prelu")
    check(lambda x, g, b: mix(ad.batch_norm(x, g, b, ad.BatchNormState(2, dtype=np.float64),
                                            "train"), 9),
          [rng.normal(1, 2, (3, 2, 4, 4, 4)), rng.uniform(0.5, 1.5, 2),
           rng.standard_normal(2)], "batch_norm")
    labels = rng.integers(0, 4, (2, 3, 3, 3))
    check(lambda l: ad.cross_entropy_loss(ad.softmax_channels(l), labels),
          [rng.normal(0, 2, (2, 4, 3, 3, 3))], "softmax+cross_entropy")

    elapsed = time.time() - start
    assert elapsed < 120, f"gradient suite took {elapsed:.0f}s (budget 120s)"
    _pass("C1 gradient-suite", f"(rel err < {tol}, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# C2 architecture counts
# ---------------------------------------------------------------------------

def test_c2_architecture_counts():
    early = build_network(NetworkConfig(fusion="early"), np.random.default_rng(0))
    assert early.config.concat_channels() == 450
    counts = parameter_count(early)
    assert counts["core_total"] == 900_654

    late = build_network(NetworkConfig(fusion="late"), np.random.default_rng(0))
    assert late.config.concat_channels() == 900
    assert parameter_count(late)["core_total"] == 1_688_604

    net = build_network(NetworkConfig(scale_factor=0.2), np.random.default_rng(5))
    rng = np.random.default_rng(6)
    seg = rng.standard_normal((1, 2, 27, 27, 27)).astype(np.float32)
    forward_segment(net, seg, mode="train")
    out = forward_segment(net, seg, mode="infer")
    assert out.shape == (1, 4, 9, 9, 9)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    base = out.data
    # receptive field: output voxel (0,0,0) sees exactly input [0,19)^3
    probe = seg.copy()
    probe[0, 1, 19, 0, 0] += 2.0
    probe[0, 0, 0, 19, 3] -= 1.0
    moved = forward_segment(net, probe, mode="infer").data
    np.testing.assert_array_equal(moved[0, :, 0, 0, 0], base[0, :, 0, 0, 0])
    probe2 = seg.copy()
    probe2[0, 0, 18, 18, 18] += 2.0
    moved2 = forward_segment(net, probe2, mode="infer").data
    assert not np.array_equal(moved2[0, :, 0, 0, 0], base[0, :, 0, 0, 0])

    _pass("C2 architecture-counts",
          "(450/900 channels, 900654/1688604 params, 27->9, rf 19)")


# ---------------------------------------------------------------------------
# C3 metric oracles
# ---------------------------------------------------------------------------

def test_c3_metric_oracles():
    start = time.time()
    rng = np.random.default_rng(2002)

    def random_mask(side, p):
        m = rng.random((side, side, side)) < p
        if not m.any():
            m[tuple(rng.integers(0, side, 3))] = True
        return m

    for trial in range(100):
        side = int(rng.integers(4, 13))
        spacing = (1.0, 1.0, 1.0) if trial % 2 else (1.0, 1.25, 1.95)
        a = random_mask(side, 0.3)
        b = random_mask(side, 0.3)
        assert dsc(a, b) == pytest.approx(
            2 * np.logical_and(a, b).sum() / (a.sum() + b.sum()) if (a.sum() + b.sum()) else 1.0)
        ba = boundary_voxels(a)
        bb = boundary_voxels(b)
        expected_mhd = max(directed_p95_oracle(ba, bb, spacing),
                           directed_p95_oracle(bb, ba, spacing))
        assert mhd95(ba, bb, spacing) == pytest.approx(expected_mhd, abs=1e-9)
        assert asd(ba, bb, spacing) == pytest.approx(asd_oracle(ba, bb, spacing), abs=1e-9)

    # 3-4-5 witness: any percentile of a single distance is that distance
    assert mhd95(np.array([[0, 0, 0]]), np.array([[3, 4, 0]])) == pytest.approx(5.0)
    # asd asymmetry witness
    ref = np.array([[0, 0, 0], [10, 0, 0]])
    auto = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert asd(ref, auto) != asd(auto, ref)

    elapsed = time.time() - start
    assert elapsed < 60, f"metric oracles took {elapsed:.0f}s (budget 60s)"
    _pass("C3 metric-oracles", f"(100 pairs exact, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# C4 cost function and learning-rate schedule
# ---------------------------------------------------------------------------

def test_c4_loss_oracle_and_lr_schedule():
    subjects = [normalize_intensities(generate_phantom(
        PhantomConfig(dims=(32, 32, 32), smoothness=5.0), seed=41))]
    net = build_network(NetworkConfig(scale_factor=0.1), np.random.default_rng(4))
    samples = sample_segments(subjects, 6, np.random.default_rng(42), TrainConfig())
    x, y = batch_arrays(samples)
    loss = batch_loss(net, x, y, mode="train").item()
    probs = forward_segment(net, ad.Tensor(x), mode="train").data
    assert loss == pytest.approx(cross_entropy_oracle(probs.astype(np.float64), y), abs=1e-6)

    cfg = TrainConfig()
    assert [lr_at_epoch(e, cfg) for e in (1, 5, 9)] == [0.001] * 3
    for e, expect in ((10, 0.0005), (14, 0.0005), (15, 0.00025), (22, 0.000125),
                      (25, 0.0000625), (30, 0.00003125)):
        assert lr_at_epoch(e, cfg) == pytest.approx(expect)
    _pass("C4 loss-oracle-and-lr-schedule")


# ---------------------------------------------------------------------------
# C5 phantom end-to-end
# ---------------------------------------------------------------------------

DESK_PHANTOM = PhantomConfig(dims=(48, 48, 48))


def test_c5_phantom_end_to_end():
    start = time.time()
    subjects = [generate_phantom(DESK_PHANTOM, seed=100 + i) for i in range(10)]
    train_set, held_out = subjects[:8], subjects[8:]

    net = build_network(NetworkConfig(scale_factor=0.25), np.random.default_rng(77))
    cfg = TrainConfig(epochs=3, subepochs_per_epoch=3, samples_per_subepoch=400,
                      batch_size=20, seed=77, val_samples=100)
    history = train(net, train_set, held_out, cfg)
    assert history.final_train_loss() < history.subepoch_losses[0][2]

    per_class = {c: [] for c in TISSUE_CLASSES}
    floor_per_class = {c: [] for c in TISSUE_CLASSES}
    for s in held_out:
        _, labels = dense_inference(net, s)
        report = evaluate(labels.data, s.labels.data)
        floor = nearest_mean_labels(s.t2.data, DESK_PHANTOM.t2_means)
        floor[s.mask.data == 0] = 0
        floor_report = evaluate(floor, s.labels.data)
        for c, f in zip(report.classes, floor_report.classes):
            per_class[c.class_id].append(c.dsc)
            floor_per_class[f.class_id].append(f.dsc)

    elapsed = time.time() - start
    details = []
    for c in TISSUE_CLASSES:
        net_dsc = float(np.mean(per_class[c]))
        floor_dsc = float(np.mean(floor_per_class[c]))
        details.append(f"{CLASS_NAMES[c]} {net_dsc:.3f} (floor {floor_dsc:.3f})")
        assert net_dsc >= 0.85, f"{CLASS_NAMES[c]} DSC {net_dsc:.3f} < 0.85"
        assert net_dsc > floor_dsc, \
            f"{CLASS_NAMES[c]} DSC {net_dsc:.3f} does not beat floor {floor_dsc:.3f}"
    assert elapsed < 1800, f"end-to-end took {elapsed / 60:.1f} min (budget 30 min)"
    _pass("C5 phantom-end-to-end", f"({', '.join(details)}, {elapsed / 60:.1f} min)")


# ---------------------------------------------------------------------------
# C6 ensemble relationships (cross-validation protocol)
# ---------------------------------------------------------------------------

CV_PHANTOM = PhantomConfig(dims=(32, 32, 32), noise_std=30.0, smoothness=5.0)
CV_FOLDS = 5
CV_K = 5


def test_c6_ensemble_relationships():
    start = time.time()
    pool = [generate_phantom(CV_PHANTOM, seed=300 + i) for i in range(10)]
    base = TrainConfig(epochs=2, subepochs_per_epoch=2, samples_per_subepoch=150,
                       batch_size=20, val_samples=60)

    ens_dsc = {c: [] for c in TISSUE_CLASSES}
    single_dsc = {c: [] for c in TISSUE_CLASSES}
    pooled = {c: {"high": ([], []), "low": ([], [])} for c in TISSUE_CLASSES}
    hist_totals = {CLASS_NAMES[c]: None for c in TISSUE_CLASSES}
    low_voxels = 0
    masked_voxels = 0

    for fold in range(CV_FOLDS):
        test_subject = pool[fold]
        rest = [s for i, s in enumerate(pool) if i != fold]
        config = EnsembleConfig(k=CV_K, train_per_model=7, val_per_model=2, base=base,
                                network=NetworkConfig(scale_factor=0.15),
                                master_seed=1000 + 100 * fold)
        nets, _ = train_ensemble(rest, config)
        fused, agreement, _, member_labels = segment_subject(nets, test_subject)

        truth = test_subject.labels.data
        mask = test_subject.mask.data > 0
        report = evaluate(fused, truth)
        member_reports = [evaluate(lv, truth) for lv in member_labels]
        for idx, c in enumerate(TISSUE_CLASSES):
            ens_dsc[c].append(report.classes[idx].dsc)
            single_dsc[c].extend(r.classes[idx].dsc for r in member_reports)

        part = partition_confidence(agreement, threshold=0.6, mask=mask)
        low_voxels += int(part.low.sum())
        masked_voxels += int(mask.sum())
        for c in TISSUE_CLASSES:
            for region_name, region in (("high", part.high), ("low", part.low)):
                xs, ys = pooled[c][region_name]
                xs.extend((fused[region] == c).tolist())
                ys.extend((truth[region] == c).tolist())

        hist = confidence_histograms(agreement, fused, truth, mask=mask)
        for name in hist_totals:
            cur = np.array(hist["classes"][name]["correct"])
            hist_totals[name] = cur if hist_totals[name] is None else hist_totals[name] + cur

    details = []
    for c in TISSUE_CLASSES:
        name = CLASS_NAMES[c]
        e = float(np.mean(ens_dsc[c]))
        s = float(np.mean(single_dsc[c]))
        assert e >= s - 0.005, f"(a) {name}: ensemble {e:.4f} < single {s:.4f} - 0.005"

        def corr(xs, ys):
            x = np.asarray(xs, np.float64)
            y = np.asarray(ys, np.float64)
            if x.std() == 0 or y.std() == 0:
                return None
            return float(((x - x.mean()) * (y - y.mean())).mean() / (x.std() * y.std()))

        high_r = corr(*pooled[c]["high"])
        low_r = corr(*pooled[c]["low"])
        assert high_r is not None and low_r is not None
        assert high_r - low_r >= 0.2, \
            f"(b) {name}: high {high_r:.3f} - low {low_r:.3f} < 0.2"

        modal_bin = int(np.argmax(hist_totals[name])) + 1
        assert modal_bin == CV_K, f"(c) {name}: modal correct bin {modal_bin}/{CV_K} != 1.0"
        details.append(f"{name} ens={e:.3f} single={s:.3f} rho_hi={high_r:.2f} rho_lo={low_r:.2f}")

    low_share = low_voxels / masked_voxels
    assert low_share < 0.15, f"(d) low-confidence share {low_share:.1%} >= 15%"
    elapsed = time.time() - start
    _pass("C6 ensemble-relationships",
          f"({'; '.join(details)}; low {low_share:.1%}, {elapsed / 60:.1f} min)")


# ---------------------------------------------------------------------------
# C7 determinism of the full pipeline
# ---------------------------------------------------------------------------

def _run_pipeline(root):
    root = Path(root)
    data = root / "data"
    ens = root / "ens"
    case = root / "case"
    sugg = root / "sugg"
    met = root / "met"
    assert cli_main(["phantom", "--out", str(data), "--n", "4", "--dims", "28",
                     "--seed", "5", "--smoothness", "4.5",
                     "--train-count", "2", "--val-count", "1"]) == 0
    assert cli_main(["train-ensemble", "--manifest", str(data / "manifest.json"),
                     "--out", str(ens), "--k", "2", "--train-per-model", "2",
                     "--val-per-model", "1", "--master-seed", "21", "--scale", "0.1",
                     "--epochs", "1", "--subepochs", "1", "--samples", "40",
                     "--batch-size", "20", "--val-samples", "20"]) == 0
    assert cli_main(["segment", "--manifest", str(data / "manifest.json"),
                     "--subject", "phantom_003", "--out", str(case),
                     str(ens / "model_00.vseg"), str(ens / "model_01.vseg")]) == 0
    assert cli_main(["suggest", "--agreement", str(case / "agreement.nii"),
                     "--fused", str(case / "fused.nii"), "--mask", str(case / "mask.nii"),
                     "--out", str(sugg), "--k", "2", "--min-size", "1",
                     "--volume-id", "phantom_003"]) == 0
    assert cli_main(["evaluate", "--pred", str(case / "fused.nii"),
                     "--truth", str(case / "truth.nii"), "--out", str(met)]) == 0
    return {
        "checkpoints": [ens / "model_00.vseg", ens / "model_01.vseg"],
        "fused": case / "fused.nii",
        "agreement": case / "agreement.nii",
        "suggestions": sugg / "suggestions.json",
        "metrics": met / "metrics.csv",
    }


def test_c7_pipeline_determinism(tmp_path):
    a = _run_pipeline(tmp_path / "a")
    b = _run_pipeline(tmp_path / "b")
    for c1, c2 in zip(a["checkpoints"], b["checkpoints"]):
        assert c1.read_bytes() == c2.read_bytes(), f"checkpoint differs: {c1.name}"
    for key in ("fused", "agreement"):
        assert a[key].read_bytes() == b[key].read_bytes(), f"{key} volume differs"
    for key in ("suggestions", "metrics"):
        assert a[key].read_text() == b[key].read_text(), f"{key} differs"
    _pass("C7 pipeline-determinism")


# ---------------------------------------------------------------------------
# C8 volume I/O round trips
# ---------------------------------------------------------------------------

def test_c8_io_round_trips(tmp_path):
    rng = np.random.default_rng(8008)
    cases = {
        "uint8": rng.integers(0, 256, (11, 9, 7), dtype=np.uint8),
        "int16": rng.integers(-3000, 3000, (11, 9, 7), dtype=np.int16),
        "float32": rng.standard_normal((11, 9, 7)).astype(np.float32),
    }
    for name, data in cases.items():
        vol = Volume(data, spacing=(1.0, 1.25, 1.95))
        for ext in (".nii", ".vjson"):
            p = tmp_path / f"{name}{ext}"
            write_volume(vol, p)
            back = read_volume(p)
            assert back.data.dtype == data.dtype
            np.testing.assert_array_equal(back.data, data)
            # re-serialization is byte-identical (headers included)
            p2 = tmp_path / f"{name}_rt{ext}"
            write_volume(back, p2)
            if ext == ".nii":
                assert p.read_bytes() == p2.read_bytes()
            else:
                raw1 = (tmp_path / f"{name}.vraw").read_bytes()
                raw2 = (tmp_path / f"{name}_rt.vraw").read_bytes()
                assert raw1 == raw2
    _pass("C8 io-round-trips", "(uint8/int16/float32, nii + native)")
