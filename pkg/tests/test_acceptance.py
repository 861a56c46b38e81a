"""Acceptance suite: the eight headline checks, each printing a single
pass/fail line. Property checks are exact or tightly toleranced; the
training comparison is a directional desk-scale experiment."""

import csv
import time

import numpy as np
import pytest
import yaml

from netwarp.assembly import NetWarpSpec, init_combine_weights, two_frame_forward
from netwarp.bench import bench_warp
from netwarp.config import load_experiment_config
from netwarp.flowcnn import init_flowcnn_params
from netwarp.gradcheck import run_suite
from netwarp.metrics import (confusion_matrix, iou_from_confusion,
                             trimap_confusion, iiou)
from netwarp.optim import ParamSet
from netwarp.pipeline import evaluate, train
from netwarp.report import write_bench_report
from netwarp.segnet import SegNet, SegNetConfig
from netwarp.synth import SceneSpec, generate, save_dataset
from netwarp.tensor import Tensor
from netwarp.warp import WarpConfig, warp_forward

from test_warp import naive_warp


def report(n, name, ok, detail=""):
    line = f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" - {detail}"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk_experiment(tmp_path_factory):
    """Shared by criteria 5 and 6: the 3-seed directional experiment."""
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("desk")
    rows = []
    for seed in (1, 2, 3):
        ds = str(root / f"ds{seed}")
        seqs, ics = [], set()
        for i in range(3):
            spec = SceneSpec(height=64, width=64, num_classes=3, num_shapes=2,
                             shape_kinds=("thin_bar", "rectangle"), seq_len=30,
                             seed=seed * 100 + i, velocity_max=2.0,
                             noise_std=0.15)
            s = generate(spec)
            seqs.append(s)
            ics |= set(s.instance_classes)
        save_dataset(ds, seqs, 3, ics)
        cfg_path = str(root / f"cfg{seed}.yaml")
        with open(cfg_path, "w") as f:
            yaml.safe_dump({
                "seed": seed,
                "dataset": {"path": ds},
                "model": {"num_classes": 3, "channels": [8, 16, 32]},
                "netwarp": {"insertion_layers": ["conv2"],
                            "recurrent_inference": False},
                "flow": {"method": "block_match"},
                "train": {"steps": 1000, "mode": "baseline"},
            }, f)
        cfg = load_experiment_config(cfg_path)
        base_ck = str(root / f"base{seed}.nwa")
        train(cfg, checkpoint_out=base_ck)
        cfg2 = load_experiment_config(cfg_path)
        cfg2["train"].update(mode="netwarp", steps=1000, init_from=base_ck,
                             freeze_base=True)
        nw_ck = str(root / f"nw{seed}.nwa")
        train(cfg2, checkpoint_out=nw_ck)
        base = evaluate(cfg, checkpoint=base_ck, modes=["baseline"])["baseline"]
        nw = evaluate(cfg2, checkpoint=nw_ck,
                      modes=["netwarp", "netwarp-noflowcnn"])
        rows.append({"seed": seed, "baseline": base, "netwarp": nw["netwarp"],
                     "netwarp-noflowcnn": nw["netwarp-noflowcnn"]})
    return rows, time.monotonic() - t0


class TestAcceptance:
    def test_1_gradient_suite(self):
        t0 = time.monotonic()
        results = run_suite(seeds=20, master_seed=0)
        elapsed = time.monotonic() - t0
        ok = all(r["passed"] for r in results) and elapsed < 120
        worst = max(r["worst_rel_err"] for r in results)
        report(1, "gradient suite", ok,
               f"{len(results)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")

    def test_2_warp_oracle(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(42)
        n_int = n_clamp = 0
        for _ in range(100):
            B = 1
            C = int(rng.integers(1, 5))
            H = int(rng.integers(2, 9))
            W = int(rng.integers(2, 9))
            feat = rng.standard_normal((B, C, H, W)).astype(np.float32)
            kind = rng.integers(3)
            if kind == 0:
                flow = rng.uniform(-2, 2, (B, 2, H, W)).astype(np.float32)
            elif kind == 1:
                flow = rng.integers(-3, 4, (B, 2, H, W)).astype(np.float32)
                n_int += 1
            else:
                m = 2 * max(H, W)
                flow = rng.uniform(-m, m, (B, 2, H, W)).astype(np.float32)
                n_clamp += 1
            got = warp_forward(feat, flow, 1e-4)
            want = naive_warp(feat, flow, 1e-4)
            assert np.array_equal(got, want)
        elapsed = time.monotonic() - t0
        ok = elapsed < 10 and n_int > 10 and n_clamp > 10
        report(2, "warp bitwise oracle", ok,
               f"100 cases ({n_int} integer-flow, {n_clamp} clamping), {elapsed:.1f}s")

    def test_3_identity_at_init(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(7)
        net = SegNet(SegNetConfig(num_classes=4, channels=(8, 16, 32)))
        params = ParamSet()
        net.init_params(params, rng)
        init_flowcnn_params(params, rng)
        init_combine_weights(params, net, ["conv1", "conv2", "conv3"])
        spec = NetWarpSpec(insertion_layers=["conv1", "conv2", "conv3"],
                           warp_cfg=WarpConfig())
        ok = True
        for _ in range(10):
            fp = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
            ft = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
            flow = Tensor(rng.uniform(-2, 2, (1, 2, 32, 32)).astype(np.float32))
            logits = two_frame_forward(net, params, fp, ft, flow, spec)
            single = net.forward(ft, params)
            ok = ok and np.array_equal(logits.data, single.data)
        elapsed = time.monotonic() - t0
        report(3, "identity at init", ok and elapsed < 10,
               f"10 inputs bit-equal, {elapsed:.1f}s")

    def test_4_flow_label_consistency(self):
        t0 = time.monotonic()
        total = bad = 0
        for seed in range(5):
            spec = SceneSpec(height=64, width=64, num_classes=3, num_shapes=3,
                             seq_len=8, seed=seed, velocity_max=3.0)
            seq = generate(spec)
            for t in range(1, spec.seq_len):
                lab_prev = seq.labels[t - 1]
                oh = np.zeros((1, spec.num_classes) + lab_prev.shape, dtype=np.float32)
                for c in range(spec.num_classes):
                    oh[0, c] = lab_prev == c
                warped = np.argmax(
                    warp_forward(oh, seq.gt_flow[t].data, 1e-4), axis=1)[0]
                vis = ~seq.occlusion[t]
                total += int(vis.sum())
                bad += int((warped[vis] != seq.labels[t][vis]).sum())
        elapsed = time.monotonic() - t0
        ok = bad == 0 and elapsed < 30
        report(4, "flow/label consistency", ok,
               f"{total} non-occluded pixels, {bad} mismatches, {elapsed:.1f}s")

    def test_5_desk_scale_directional(self, desk_experiment):
        rows, elapsed = desk_experiment
        d_iou = np.mean([r["netwarp"].mean_iou - r["baseline"].mean_iou
                         for r in rows])
        d_tiou = np.mean([r["netwarp"].mean_tiou - r["baseline"].mean_tiou
                          for r in rows])
        ok = d_iou >= 0 and d_tiou >= 0.01 and elapsed < 1200
        report(5, "desk-scale directional result", ok,
               f"3 seeds: mean IoU {d_iou:+.4f}, mean tIoU {d_tiou:+.4f}, "
               f"{elapsed:.0f}s")

    def test_6_ablation_structure(self, desk_experiment):
        rows, _ = desk_experiment
        # with-FlowCNN trains and evaluates end to end; the table carries both
        # rows. with >= without is reported, never asserted.
        with_f = np.mean([r["netwarp"].mean_iou for r in rows])
        without_f = np.mean([r["netwarp-noflowcnn"].mean_iou for r in rows])
        for r in rows:
            assert np.isfinite(r["netwarp"].mean_iou)
            assert np.isfinite(r["netwarp-noflowcnn"].mean_iou)
        print(f"ablation report: with FlowCNN mIoU {with_f:.4f}, "
              f"without FlowCNN mIoU {without_f:.4f} "
              f"(delta {with_f - without_f:+.4f}, reported only)")
        report(6, "ablation structure", True,
               f"both rows present; with {with_f:.4f} vs without {without_f:.4f}")

    def test_7_metric_oracles(self):
        t0 = time.monotonic()
        # fixed toy case
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        per, mean = iou_from_confusion(confusion_matrix(pred, gt, 2))
        ok = per[0] == 0.5 and per[1] == 2 / 3 and mean == (0.5 + 2 / 3) / 2
        # trimap band -> infinity equals plain IoU
        rng = np.random.default_rng(3)
        g = rng.integers(0, 3, (12, 12))
        p = rng.integers(0, 3, (12, 12))
        conf_inf, _ = trimap_confusion(p, g, 3, band_px=100)
        ok = ok and np.array_equal(conf_inf, confusion_matrix(p, g, 3))
        # streaming equals batch accumulation
        frames = [(rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6)))
                  for _ in range(4)]
        streamed = sum(confusion_matrix(pp, gg, 3) for pp, gg in frames)
        batch = confusion_matrix(np.concatenate([pp.ravel() for pp, _ in frames]),
                                 np.concatenate([gg.ravel() for _, gg in frames]), 3)
        ok = ok and np.array_equal(streamed, batch)
        # iIoU toy: small instance fully missed
        lab = np.zeros((4, 4), dtype=int)
        inst = np.zeros((4, 4), dtype=int)
        lab[0, :3] = lab[1, :3] = 1
        inst[0, :3] = inst[1, :3] = 1
        lab[3, :2] = 1
        inst[3, :2] = 2
        pr = lab.copy()
        pr[inst == 2] = 0
        per_i, _ = iiou([pr], [lab], [inst], (1,), {1: 4.0})
        ok = ok and per_i[1] == 0.5
        elapsed = time.monotonic() - t0
        report(7, "metric oracles", ok and elapsed < 5, f"{elapsed:.1f}s")

    def test_8_benchmark_report(self, tmp_path):
        rows = bench_warp((1, 1024, 128, 128), iters=3)
        csv_path = write_bench_report(str(tmp_path), rows)
        with open(csv_path) as f:
            table = list(csv.reader(f))
        ok = (table[0] == ["case", "median_ms", "p95_ms", "iters", "threads"]
              and len(table) == 3
              and all(float(r[1]) > 0 and float(r[2]) >= float(r[1])
                      for r in table[1:]))
        # the 2.5 ms figure is reference context from a GPU implementation,
        # printed by the CLI and never asserted
        report(8, "benchmark report", ok,
               f"fwd median {rows[0]['median_ms']:.1f} ms, "
               f"fwd+bwd median {rows[1]['median_ms']:.1f} ms (CPU)")
