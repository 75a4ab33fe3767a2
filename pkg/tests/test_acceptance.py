"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together at the end
of the pytest run (see conftest.py) and when this file is run as a script.
Tolerances are fixed here and must not be loosened to make a run pass.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from oracles import fd_check, rand_tensor, random_block, randomize_bn
from repfuse import tensor as T
from repfuse.bench import compare, bench
from repfuse.blocks import PRESETS, block_forward, build_network
from repfuse.data import _resolve_dir, synthetic_dataset
from repfuse.fusion import fuse_block, fuse_conv_bn, fuse_network, merge_sequential
from repfuse.search import compute_importance, sample_logistic_noise, soft_gate
from repfuse.tensor import BatchNormParams, Tensor
from repfuse.train import TrainConfig, calibrate_bn, evaluate, load_datasets, predict, train_supernet

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def _cifar_root():
    for cand in (os.environ.get("REPFUSE_DATA_DIR"), Path(__file__).resolve().parents[1] / "data"):
        if not cand:
            continue
        try:
            return _resolve_dir(cand)
        except FileNotFoundError:
            continue
    return None


def _require_cifar(n: int):
    root = _cifar_root()
    if root is None:
        line = f"[FAIL] criterion {n}: CIFAR-10 binary batches not found (set REPFUSE_DATA_DIR)"
        RESULTS[n] = line
        print(line)
        pytest.fail(line)
    return root


# ---------------------------------------------------------------- 1


def test_criterion_1_fusion_exactness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {np.float64: 0.0, np.float32: 0.0}
    for _ in range(100):
        c_in, c_out = (int(v) for v in rng.integers(3, 33, 2))
        if rng.random() < 0.5:
            c_out = c_in  # lets the skip branch exist at stride 1
        stride = int(rng.integers(1, 3))
        seed = int(rng.integers(1 << 31))
        for dtype in worst:
            blk = random_block(np.random.default_rng(seed), c_in, c_out, stride, dtype=dtype)
            x = Tensor(rng.standard_normal((2, c_in, 12, 12)).astype(dtype))
            diff = np.abs(fuse_block(blk).forward(x).data - block_forward(blk, x, activation=False).data).max()
            worst[dtype] = max(worst[dtype], float(diff))

    blk = random_block(rng, 8, 8, 1)
    x = Tensor(rng.standard_normal((2, 8, 9, 9)))
    others = [j for j in range(7) if j != blk.protected_branch]
    subset_worst = 0.0
    for mask in itertools.product([0, 1], repeat=6):
        gates = [1] * 7
        for j, z in zip(others, mask):
            gates[j] = z
        d = np.abs(fuse_block(blk, gates).forward(x).data - block_forward(blk, x, gates, activation=False).data).max()
        subset_worst = max(subset_worst, float(d))
    elapsed = time.perf_counter() - t0
    ok = worst[np.float64] <= 1e-10 and worst[np.float32] <= 1e-4 and subset_worst <= 1e-10 and elapsed < 60
    record(1, ok, f"double {worst[np.float64]:.2e} (<=1e-10), single {worst[np.float32]:.2e} (<=1e-4), "
                  f"64 subsets {subset_worst:.2e}, {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------- 2


def test_criterion_2_end_to_end_fusion_cifar(tmp_path):
    from repfuse.cli import run_fuse, run_eval

    root = _require_cifar(2)
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=1, subset_fraction=0.02, arch="vgg-tiny", budget="mid", data_dir=str(root))
    train_supernet(cfg, tmp_path / "search")
    s = tmp_path / "search"
    fuse = run_fuse(s / "supernet.rpfz", s / "arch_final.json", tmp_path / "fused", verify_trials=100, tol=1e-3)
    ev_sup = run_eval(s / "supernet.rpfz", root, out=tmp_path / "eval_sup")
    ev_fus = run_eval(tmp_path / "fused" / "fused.rpfz", root, out=tmp_path / "eval_fus")
    sup_logits = np.load(tmp_path / "eval_sup" / "supernet_logits.npy")
    fus_logits = np.load(tmp_path / "eval_fus" / "fused_logits.npy")
    div = float(np.abs(sup_logits.astype(np.float64) - fus_logits).max())
    elapsed = time.perf_counter() - t0
    ok = ev_sup["top1"] == ev_fus["top1"] and ev_sup["samples"] == 10000 and div <= 1e-3 and fuse["verify"]["pass"] \
        and elapsed < 600
    record(2, ok, f"top1 supernet {ev_sup['top1']:.4f} vs fused {ev_fus['top1']:.4f}, logit div {div:.2e} "
                  f"(<=1e-3), {elapsed:.0f}s (<600s)")


# ---------------------------------------------------------------- 3


def _bn_fn(mode, rng):
    bn = BatchNormParams.create(3, np.float64)
    randomize_bn(bn, rng)
    mean, var = bn.running_mean.copy(), bn.running_var.copy()

    def f(x, g, b):
        bn.running_mean[:], bn.running_var[:] = mean, var
        return T.batch_norm(x, bn, mode)

    return f, [rand_tensor(rng, (4, 3, 4, 4)), bn.gamma, bn.beta]


def test_criterion_3_gradients():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 5, 4)
    relu_in = rng.standard_normal((2, 3, 4, 4))
    relu_in[np.abs(relu_in) < 0.05] = 0.5
    cases = {
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
                   [rand_tensor(rng, (2, 3, 6, 6)), rand_tensor(rng, (4, 3, 3, 3)), rand_tensor(rng, (4,))]),
        "pad2d": (lambda x: T.pad2d(x, 1), [rand_tensor(rng, (2, 2, 3, 3))]),
        "avg_pool2d": (lambda x: T.avg_pool2d(x, 3, 2, 1), [rand_tensor(rng, (2, 2, 7, 7))]),
        "batch_norm[train]": _bn_fn("train", rng),
        "batch_norm[eval]": _bn_fn("eval", rng),
        "relu": (T.relu, [Tensor(relu_in, requires_grad=True)]),
        "add_n": (lambda a, b: T.add_n(a, b), [rand_tensor(rng, (2, 2, 3, 3)), rand_tensor(rng, (2, 2, 3, 3))]),
        "scale": (T.scale, [rand_tensor(rng, (2, 2, 3, 3)), Tensor(np.array(0.3), requires_grad=True)]),
        "sigmoid": (T.sigmoid, [rand_tensor(rng, (4, 6), scale=2)]),
        "crop": (lambda k: T.crop(k, slice(1, 2), slice(0, 3)), [rand_tensor(rng, (2, 2, 3, 3))]),
        "global_avg_pool": (T.global_avg_pool, [rand_tensor(rng, (2, 3, 4, 4))]),
        "linear": (T.linear, [rand_tensor(rng, (4, 6)), rand_tensor(rng, (5, 6)), rand_tensor(rng, (5,))]),
        "softmax_cross_entropy": (lambda z: T.softmax_cross_entropy(z, labels), [rand_tensor(rng, (4, 5))]),
    }
    errs = {name: fd_check(fn, inputs, rng) for name, (fn, inputs) in cases.items()}

    blk = random_block(rng, 3, 3, 1)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    zeta = sample_logistic_noise(rng, 7)
    alphas = [Tensor(np.array(v), requires_grad=True) for v in rng.standard_normal(7)]

    def relaxed(*a):
        return block_forward(blk, x, [soft_gate(ai, z) for ai, z in zip(a, zeta)], mode="train")

    errs["alpha (soft gate)"] = fd_check(relaxed, alphas, rng)
    worst = max(errs, key=errs.get)
    record(3, errs[worst] <= 1e-4, f"{len(errs)} gradients, worst rel err {errs[worst]:.2e} ({worst}) (<=1e-4)")


# ---------------------------------------------------------------- 4


def test_criterion_4_gate_statistics():
    rng = np.random.default_rng(4)
    devs = {}
    for alpha in (-2.0, -1.0, 0.0, 1.0, 2.0):
        zeta = sample_logistic_noise(rng, 100_000)
        freq = float((compute_importance(alpha, zeta, 1.0) > 0.5).mean())
        devs[alpha] = abs(freq - 1 / (1 + np.exp(-alpha)))
    worst = max(devs.values())
    record(4, worst <= 0.01, f"max |keep freq - sigmoid(alpha)| = {worst:.4f} over 1e5 draws (<=0.01)")


# ---------------------------------------------------------------- 5


def test_criterion_5_budget_enforcement(tmp_path):
    syn = {"n_train": 128, "n_test": 64, "classes": 4, "image_size": 16}
    probe = build_network([8, 8, 8], [1, 2, 1])
    total = probe.total_branches()
    n_prot = int(probe.protected_mask().sum())
    details, ok = [], True
    for C in (n_prot, total // 2, total):
        cfg = TrainConfig(epochs=5, batch_size=32, dataset="synthetic", synthetic=syn, widths=[8, 8, 8],
                          strides=[1, 2, 1], budget=C, calib_batches=2)
        res = train_supernet(cfg, tmp_path / f"C{C}")
        rows = list(csv.DictReader(res.log_path.open()))
        counts = {int(r["active_branches"]) for r in rows}
        final = json.loads((tmp_path / f"C{C}" / "arch_final.json").read_text())
        prot_kept = all(b["gates"][b["branches"].index("ConvKxK")] == 1 for b in final["blocks"])
        good = counts == {min(C, total)} and len(rows) == 5 * 4 and prot_kept
        ok &= good
        details.append(f"C={C}: {len(rows)} iters, counts {sorted(counts)}")
    record(5, ok, "; ".join(details) + ", protected branches kept")


# ---------------------------------------------------------------- 6


def test_criterion_6_accuracy_ordering(tmp_path):
    root = _require_cifar(6)
    base = TrainConfig(epochs=30, subset_fraction=0.2, arch="vgg-tiny", data_dir=str(root))
    scores = {"odbb": [], "baseline": []}
    for seed in (0, 1, 2):
        for name, kw in (("odbb", dict(branches="all", budget="mid")), ("baseline", dict(branches=["ConvKxK"]))):
            cfg = dataclasses.replace(base, seed=seed, **kw)
            res = train_supernet(cfg, tmp_path / f"{name}{seed}")
            scores[name].append(evaluate(fuse_network(res.net, res.gates), res.test)["top1"])
    odbb, baseline = np.mean(scores["odbb"]), np.mean(scores["baseline"])
    record(6, odbb >= baseline, f"3-seed mean top1 fused ODBB {odbb:.4f} vs single-path {baseline:.4f}")


# ---------------------------------------------------------------- 7


def test_criterion_7_latency_direction():
    net = build_network(**PRESETS["vgg-tiny"], seed=0)
    calib = synthetic_dataset(320, classes=10, seed=0)
    calibrate_bn(net, net.all_on(), calib, batches=10, batch_size=32)
    fused = fuse_network(net)
    with threadpool_limits(1):
        reps = compare([bench(net, None, "supernet", batch=32), bench(fused, None, "fused", batch=32)])
    ratio = reps[0].speedup_ratio
    record(7, ratio > 1.0, f"batch 32, 1 thread: multi-branch {reps[0].mean_s * 1e3:.0f} ms, fused "
                           f"{reps[1].mean_s * 1e3:.0f} ms, ratio {ratio:.2f} (>1.0)")


# ---------------------------------------------------------------- 8


def test_criterion_8_hand_vectors():
    bn = BatchNormParams.create(1, np.float64)
    bn.gamma.data[:], bn.beta.data[:], bn.running_mean[:] = 2.0, 0.5, 1.0
    bn.running_var[:] = 4.0 - bn.eps
    k, b = fuse_conv_bn(np.ones((1, 1, 3, 3)), bn)
    fold_ok = np.array_equal(k, np.ones((1, 1, 3, 3))) and b.item() == -0.5
    k2, b2 = merge_sequential(np.full((1, 1, 1, 1), 2.0), np.array([1.0]), np.ones((1, 1, 3, 3)), np.zeros(1))
    seq_ok = np.array_equal(k2, np.full((1, 1, 3, 3), 2.0)) and b2.item() == 9.0
    record(8, fold_ok and seq_ok, f"fold bias {b.item()} (want -0.5), sequential kernel all {k2.flat[0]} "
                                  f"bias {b2.item()} (want 2, 9)")


# ---------------------------------------------------------------- 9


def test_criterion_9_budget_sweep(tmp_path):
    from repfuse.cli import run_sweep

    cfg = TrainConfig(epochs=3, batch_size=32, dataset="synthetic", widths=[8, 8], strides=[1, 2], calib_batches=4,
                      synthetic={"n_train": 256, "n_test": 128, "classes": 4, "image_size": 16})
    out = run_sweep(cfg, ["min", "mid", "total"], [0, 1], tmp_path)
    by_c: dict[int, list] = {}
    for r in out["rows"]:
        by_c.setdefault(r["C"], []).append(r["train_top1"])
    low, high = min(by_c), max(by_c)
    acc_low, acc_total = np.mean(by_c[low]), np.mean(by_c[high])
    record(9, acc_total >= acc_low - 0.01, f"train top1 C={high}: {acc_total:.4f} vs C={low}: {acc_low:.4f} (-1% slack)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
