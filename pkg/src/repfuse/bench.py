"""Wall-clock latency of eval-mode forward passes, plus sweep result tables."""

from __future__ import annotations

import contextlib
import csv
import gc
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .fusion import FusedNetwork
from .tensor import Tensor

MIN_TIMED_ITERS = 30
MIN_WARMUP = 5
RESULTS_SCHEMA_VERSION = 1


@dataclass
class BenchReport:
    model_id: str
    mode: str
    batch_size: int
    warmup_iters: int
    timed_iters: int
    mean_s: float
    p50_s: float
    p95_s: float
    speedup_ratio: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def time_forward(model, gates=None, batch: int = 32, iters: int = MIN_TIMED_ITERS, warmup: int = MIN_WARMUP,
                 image_size: int = 32, seed: int = 0, parallel: bool = False) -> np.ndarray:
    """Per-iteration latencies (seconds) of ``model.forward``; warmup excluded."""
    if iters < MIN_TIMED_ITERS:
        raise ValueError(f"timed iterations must be >= {MIN_TIMED_ITERS}, got {iters}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup iterations must be >= {MIN_WARMUP}, got {warmup}")
    dtype = model.head_weight.dtype
    in_ch = model.in_channels
    x = Tensor(np.random.default_rng(seed).standard_normal((batch, in_ch, image_size, image_size)).astype(dtype))
    limit = contextlib.nullcontext() if parallel else threadpool_limits(1)
    times = np.empty(iters)
    gc_was_on = gc.isenabled()
    gc.disable()  # as timeit does: collector pauses are not model latency
    try:
        with limit:
            for _ in range(warmup):
                model.forward(x, gates, mode="eval")
            for k in range(iters):
                t0 = time.perf_counter()
                model.forward(x, gates, mode="eval")
                times[k] = time.perf_counter() - t0
    finally:
        if gc_was_on:
            gc.enable()
    return times


def bench(model, gates=None, model_id: str = "model", **kw) -> BenchReport:
    times = time_forward(model, gates, **kw)
    return BenchReport(
        model_id=model_id,
        mode="fused" if isinstance(model, FusedNetwork) else "multi-branch",
        batch_size=kw.get("batch", 32),
        warmup_iters=kw.get("warmup", MIN_WARMUP),
        timed_iters=len(times),
        mean_s=float(times.mean()),
        p50_s=float(np.percentile(times, 50)),
        p95_s=float(np.percentile(times, 95)),
    )


def compare(reports: list[BenchReport]) -> list[BenchReport]:
    """Fill speedup_ratio (multi-branch mean / fused mean) when both modes are present."""
    multi = [r for r in reports if r.mode == "multi-branch"]
    fused = [r for r in reports if r.mode == "fused"]
    if multi and fused:
        ratio = multi[0].mean_s / fused[0].mean_s
        for r in reports:
            r.speedup_ratio = ratio
    return reports


def emit_metrics(rows: list[dict], out_dir) -> dict:
    """Write results.json and results.csv, one row per (C, seed), sorted by C."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r["C"], r["seed"]))
    payload = {"schema_version": RESULTS_SCHEMA_VERSION, "rows": rows}
    (out / "results.json").write_text(json.dumps(payload, indent=2))
    if rows:
        with (out / "results.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return payload
