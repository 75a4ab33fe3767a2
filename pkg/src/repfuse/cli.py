"""``repfuse`` command line: search, fuse, eval, bench, sweep.

Every command prints one JSON object on stdout. Failures print
``{"error": ..., "message": ...}`` and exit with status 1.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .bench import bench, compare, emit_metrics
from .data import load_cifar10
from .fusion import fuse_network, verify_equivalence
from .train import (
    TrainConfig,
    evaluate,
    fuse_from_files,
    load_model,
    predict,
    save_fused,
    score_logits,
    train_supernet,
)


def _emit(obj) -> None:
    click.echo(json.dumps(obj, indent=2, default=str))


def _json_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error object
            _emit({"error": type(exc).__name__, "message": str(exc)})
            sys.exit(1)

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run_search(config: TrainConfig, out: Path) -> dict:
    res = train_supernet(config, out)
    return {
        "checkpoint": str(res.checkpoint),
        "arch": str(out / "arch_final.json"),
        "search_log": str(res.log_path),
        "eval_report": res.eval_report,
    }


@main.command("search")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@_json_errors
def search_cmd(config_path, out, seed):
    """Train a supernet while searching its branches under the budget."""
    cfg = TrainConfig.from_json(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    _emit(run_search(cfg, Path(out)))


def run_fuse(ckpt, arch_path, out: Path, verify_trials: int = 100, tol: float = 1e-3, image_size: int = 32) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    desc = json.loads(Path(arch_path).read_text())
    net, gates, fused = fuse_from_files(ckpt, desc)
    extra = {k: desc[k] for k in ("normalization",) if k in desc}
    save_fused(out / "fused.rpfz", fused, extra)
    report = verify_equivalence(net, fused, gates, n_trials=verify_trials, tol=tol, image_size=image_size)
    (out / "verify_report.json").write_text(json.dumps(report, indent=2))
    return {"model": str(out / "fused.rpfz"), "parameters": fused.parameter_count, "verify": report}


@main.command("fuse")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--arch", "arch_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--verify-trials", type=int, default=100, show_default=True)
@click.option("--tol", type=float, default=1e-3, show_default=True)
@click.option("--image-size", type=int, default=32, show_default=True)
@_json_errors
def fuse_cmd(ckpt, arch_path, out, verify_trials, tol, image_size):
    """Fold a searched supernet into a single-path network and verify it."""
    result = run_fuse(ckpt, arch_path, Path(out), verify_trials, tol, image_size)
    _emit(result)
    if not result["verify"]["pass"]:
        sys.exit(2)


def run_eval(model_path, data_dir=None, records_per_file=10000, out=None) -> dict:
    model, gates, desc = load_model(model_path)
    _, test = load_cifar10(data_dir, records_per_file or None, test_only=True)
    norm = desc.get("normalization")
    if norm:
        test.mean, test.std = np.array(norm["mean"]), np.array(norm["std"])
    logits = predict(model, test, gates)
    report = {"model": str(model_path), **score_logits(logits, test.labels)}
    dest = Path(out) if out else Path(model_path).parent
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "eval_report.json").write_text(json.dumps(report, indent=2))
    np.save(dest / f"{Path(model_path).stem}_logits.npy", logits)
    return report


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", default=None, type=click.Path(file_okay=False),
              help="CIFAR-10 binary directory; falls back to $REPFUSE_DATA_DIR.")
@click.option("--records-per-file", type=int, default=10000, show_default=True, help="0 accepts any record count.")
@click.option("--out", default=None, type=click.Path(file_okay=False), help="defaults to the model's directory")
@_json_errors
def eval_cmd(model_path, data_dir, records_per_file, out):
    """Top-1 accuracy of a supernet (with its gates) or fused model on the test split."""
    _emit(run_eval(model_path, data_dir, records_per_file, out))


def run_bench(model_path, compare_path=None, batch=32, iters=30, warmup=5, image_size=32, parallel=False) -> dict:
    reports = []
    for p in [model_path] + ([compare_path] if compare_path else []):
        model, gates, _ = load_model(p)
        reports.append(bench(model, gates, model_id=str(p), batch=batch, iters=iters, warmup=warmup,
                             image_size=image_size, parallel=parallel))
    compare(reports)
    return {"reports": [r.to_dict() for r in reports], "speedup_ratio": reports[0].speedup_ratio}


@main.command("bench")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--compare", "compare_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--batch", type=int, default=32, show_default=True)
@click.option("--iters", type=int, default=30, show_default=True)
@click.option("--warmup", type=int, default=5, show_default=True)
@click.option("--image-size", type=int, default=32, show_default=True)
@click.option("--parallel", is_flag=True, help="allow multi-threaded BLAS")
@click.option("--out", default=None, type=click.Path(file_okay=False))
@_json_errors
def bench_cmd(model_path, compare_path, batch, iters, warmup, image_size, parallel, out):
    """Eval-mode latency; with --compare, the multi-branch / fused speedup."""
    result = run_bench(model_path, compare_path, batch, iters, warmup, image_size, parallel)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "bench_report.json").write_text(json.dumps(result, indent=2))
    _emit(result)


def run_sweep(cfg: TrainConfig, budgets, seeds, out: Path) -> dict:
    rows = []
    for budget in budgets:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, budget=budget, seed=seed)
            res = train_supernet(run_cfg, out / f"C{budget}_s{seed}")
            fused = fuse_network(res.net, res.gates)
            sup = evaluate(res.net, res.test, res.gates)
            fus = evaluate(fused, res.test)
            tr = evaluate(res.net, res.train, res.gates)
            rows.append({
                "C": res.eval_report["budget"],
                "budget_arg": str(budget),
                "seed": seed,
                "top1_supernet": sup["top1"],
                "top1_fused": fus["top1"],
                "train_top1": tr["top1"],
                "active_branches": int(sum(sum(g) for g in res.gates)),
            })
    return emit_metrics(rows, out)


def _parse_list(text: str, conv=str) -> list:
    return [conv(t.strip()) for t in text.split(",") if t.strip()]


def _budget_token(t: str):
    return int(t) if t.lstrip("-").isdigit() else t


@main.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--budgets", required=True, help="comma list of integers or min/mid/total")
@click.option("--seeds", required=True, help="comma list of integer seeds")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_json_errors
def sweep_cmd(config_path, budgets, seeds, out):
    """Accuracy versus branch budget: one search per (C, seed)."""
    cfg = TrainConfig.from_json(config_path)
    _emit(run_sweep(cfg, _parse_list(budgets, _budget_token), _parse_list(seeds, int), Path(out)))


if __name__ == "__main__":
    main()
