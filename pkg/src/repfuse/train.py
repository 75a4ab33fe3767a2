"""Search-while-training loop, evaluation and model files."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .blocks import ALL_KINDS, PRESETS, BranchKind, RepNet, build_network, network_from_architecture
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, augment, load_cifar10, synthetic_dataset
from .errors import ConfigError, NumericalError
from .fusion import FusedNetwork, fuse_network
from .optim import SGD, Adam, cosine_lr
from .search import ArchState, SearchConfig, finalize_architecture, search_step
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "iter", "loss", "top1", "active_branches", "mean_alpha", "min_alpha", "max_alpha"]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    init_lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    seed: int = 0
    budget: Union[int, str, None] = "total"
    arch: str = "vgg-tiny"
    widths: Optional[list] = None
    strides: Optional[list] = None
    branches: Union[str, list] = "all"
    K: int = 3
    subset_fraction: float = 1.0
    dataset: str = "cifar10"
    data_dir: Optional[str] = None
    records_per_file: Optional[int] = 10000
    synthetic: dict = field(default_factory=lambda: {"n_train": 512, "n_test": 256, "classes": 4, "image_size": 32})
    num_classes: Optional[int] = None
    alpha_lr: float = 1e-4
    alpha_betas: tuple = (0.5, 0.999)
    calib_batches: int = 10
    augment: bool = True

    def __post_init__(self):
        for name in ("batch_size", "init_lr", "K"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("epochs, weight_decay and momentum must be non-negative")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigError(f"subset_fraction must be in (0, 1], got {self.subset_fraction}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.alpha_betas = tuple(self.alpha_betas)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha_betas"] = list(self.alpha_betas)
        return d

    def kinds(self) -> list:
        if self.branches == "all":
            return list(ALL_KINDS)
        return [BranchKind(k) for k in self.branches]

    def layout(self) -> tuple[list, list]:
        if self.widths is not None:
            strides = self.strides or [1] * len(self.widths)
            return list(self.widths), list(strides)
        if self.arch not in PRESETS:
            raise ConfigError(f"unknown arch preset {self.arch!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[self.arch]
        return list(p["widths"]), list(p["strides"])


def resolve_budget(budget, net: RepNet) -> int:
    total = net.total_branches()
    n_prot = int(net.protected_mask().sum())
    if budget is None or budget == "total":
        return total
    if budget == "min":
        return n_prot
    if budget in ("mid", "half"):
        return max(n_prot, total // 2)
    try:
        c = int(budget)
    except (TypeError, ValueError):
        raise ConfigError(f"budget must be an integer or one of min/mid/total, got {budget!r}") from None
    if c < n_prot:
        raise ConfigError(f"budget C={c} is below the {n_prot} protected branches")
    return c


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        s = cfg.synthetic
        kw = dict(classes=s.get("classes", 4), image_size=s.get("image_size", 32))
        train = synthetic_dataset(s.get("n_train", 512), seed=cfg.seed, split="train", **kw)
        test = synthetic_dataset(s.get("n_test", 256), seed=cfg.seed + 10_000, split="test", **kw)
    elif cfg.dataset == "cifar10":
        train, test = load_cifar10(cfg.data_dir, cfg.records_per_file)
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    return train.subset(cfg.subset_fraction, cfg.seed), test


def build_from_config(cfg: TrainConfig, num_classes: int) -> RepNet:
    widths, strides = cfg.layout()
    return build_network(widths, strides, kinds=cfg.kinds(), num_classes=num_classes, K=cfg.K, seed=cfg.seed)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, dataset: Dataset, gates=None, batch_size: int = 256) -> dict:
    """Eval-mode pass; returns top-1 accuracy and mean cross-entropy."""
    return score_logits(predict(model, dataset, gates, batch_size), dataset.labels)


def score_logits(logits: np.ndarray, labels: np.ndarray) -> dict:
    labels = np.asarray(labels)
    logp = T.log_softmax(logits.astype(np.float64))
    n = len(labels)
    return {"top1": int((logits.argmax(axis=1) == labels).sum()) / n,
            "loss": float(-logp[np.arange(n), labels].sum()) / n, "samples": n}


def predict(model, dataset: Dataset, gates=None, batch_size: int = 256) -> np.ndarray:
    dtype = model.head_weight.dtype if isinstance(model, FusedNetwork) else model.dtype
    return np.concatenate([model.forward(Tensor(x), gates, mode="eval").data
                           for x, _ in dataset.batches(batch_size, dtype=dtype)])


def calibrate_bn(net: RepNet, gates, dataset: Dataset, batches: int, batch_size: int, seed: int = 0) -> None:
    """Re-estimate running statistics of the gated branches.

    Statistics restart from zero/one and average uniformly over the
    calibration batches.
    """
    if batches <= 0:
        return
    active = []
    for block, g in zip(net.blocks, gates):
        for br, z in zip(block.branches, g):
            if z:
                active += br.bns
    saved = [bn.momentum for bn in active]
    for bn in active:
        bn.running_mean[...] = 0
        bn.running_var[...] = 1
    rng = np.random.default_rng(seed)
    for k, (x, _) in enumerate(dataset.batches(batch_size, rng, dtype=net.dtype)):
        if k >= batches:
            break
        for bn in active:
            bn.momentum = 1.0 / (k + 1)
        net.forward(Tensor(x), gates, mode="calibrate")
    for bn, m in zip(active, saved):
        bn.momentum = m


# ---------------------------------------------------------------------------
# model files


def save_supernet(path, net: RepNet, arch: ArchState, gates, extra: Optional[dict] = None) -> dict:
    path = Path(path)
    arrays = dict(net.state_arrays())
    arrays["arch.alpha"] = arch.values
    save_checkpoint(path, arrays)
    desc = net.architecture(gates, arch.values)
    desc.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(desc, indent=2))
    return desc


def save_fused(path, fused: FusedNetwork, extra: Optional[dict] = None) -> dict:
    path = Path(path)
    save_checkpoint(path, fused.state_arrays())
    desc = fused.description()
    desc.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(desc, indent=2))
    return desc


def load_supernet(ckpt, arch_desc: dict) -> tuple[RepNet, list, np.ndarray]:
    net, gates = network_from_architecture(arch_desc)
    arrays = load_checkpoint(ckpt)
    net.load_state_arrays(arrays)
    alpha = arrays.get("arch.alpha", np.zeros(net.total_branches()))
    return net, gates, alpha


def load_model(path) -> tuple[Union[RepNet, FusedNetwork], Optional[list], dict]:
    """Load a model file and its JSON sidecar (same stem)."""
    path = Path(path)
    side = path.with_suffix(".json")
    if not side.exists():
        raise FileNotFoundError(f"missing architecture sidecar {side}")
    desc = json.loads(side.read_text())
    if desc.get("fused"):
        return FusedNetwork.from_arrays(desc, load_checkpoint(path)), None, desc
    net, gates, _ = load_supernet(path, desc)
    return net, gates, desc


def normalization_of(dataset: Dataset) -> Optional[dict]:
    if dataset.mean is None:
        return None
    return {"mean": [float(v) for v in dataset.mean], "std": [float(v) for v in dataset.std]}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    arch_final: dict
    eval_report: dict
    net: RepNet
    arch: ArchState
    gates: list
    train: Dataset = field(repr=False, default=None)
    test: Dataset = field(repr=False, default=None)


def train_supernet(cfg: TrainConfig, out_dir, datasets: Optional[tuple[Dataset, Dataset]] = None) -> TrainResult:
    """Train weights and architecture parameters together, keep the best epoch.

    After each epoch the noise-free architecture is selected, batch-norm
    statistics are recalibrated under it, and test accuracy of that gated
    network decides whether the epoch's state becomes the saved checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = datasets or load_datasets(cfg)
    num_classes = cfg.num_classes or train.num_classes
    net = build_from_config(cfg, num_classes)
    C = resolve_budget(cfg.budget, net)
    scfg = SearchConfig(C, cfg.alpha_lr, cfg.alpha_betas, seed=cfg.seed)
    scfg.resolve_budget(net)
    arch = ArchState.create(net)
    w_opt = SGD(net.parameters(), cfg.init_lr, cfg.momentum, cfg.weight_decay)
    a_opt = Adam(arch.alpha, cfg.alpha_lr, cfg.alpha_betas)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    data_rng = np.random.default_rng([cfg.seed, 2])
    aug_rng = np.random.default_rng([cfg.seed, 3])

    iters_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_iters = cfg.epochs * iters_per_epoch
    extra = {"normalization": normalization_of(train), "budget": C, "seed": cfg.seed}
    ckpt = out / "supernet.rpfz"
    log_path = out / "search_log.csv"

    def snapshot():
        gates = net.split_gates(finalize_architecture(arch, C).tolist())
        calibrate_bn(net, gates, train, cfg.calib_batches, cfg.batch_size, cfg.seed)
        report = evaluate(net, test, gates)
        return gates, report

    best, best_epoch, desc = None, 0, None
    if cfg.epochs == 0:
        gates, best = snapshot()
        desc = save_supernet(ckpt, net, arch, gates, extra)

    step = 0
    with log_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for epoch in range(1, cfg.epochs + 1):
            arch.reset_keep_stats()
            for it, (x, y) in enumerate(train.batches(cfg.batch_size, data_rng, dtype=net.dtype)):
                if cfg.augment:
                    x = augment(x, aug_rng)
                lr = cosine_lr(cfg.init_lr, step, total_iters) if cfg.lr_schedule == "cosine" else cfg.init_lr
                w_opt.lr = lr
                m = search_step(net, arch, (x, y), w_opt, a_opt, noise_rng, C)
                if not np.isfinite(m["loss"]):
                    raise NumericalError(f"loss became {m['loss']} at epoch {epoch}, batch {it} (lr={lr:.3g})")
                writer.writerow({"epoch": epoch, "iter": it, **m})
                step += 1
            fh.flush()
            gates, report = snapshot()
            log.info("epoch %d: test top1 %.4f loss %.4f", epoch, report["top1"], report["loss"])
            if best is None or report["top1"] >= best["top1"]:
                best, best_epoch = report, epoch
                desc = save_supernet(ckpt, net, arch, gates, extra)
                np.save(out / "keep_rate.npy", arch.keep_rate())

    (out / "arch_final.json").write_text(json.dumps(desc, indent=2))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    eval_report = {**best, "best_epoch": best_epoch, "budget": C, "active_branches": int(sum(sum(g) for g in desc_gates(desc)))}
    (out / "eval_report.json").write_text(json.dumps(eval_report, indent=2))

    # leave the in-memory model in the saved (best) state
    net, saved_gates, alpha = load_supernet(ckpt, desc)
    arch = ArchState.create(net)
    arch.set_values(alpha)
    return TrainResult(ckpt, log_path, desc, eval_report, net, arch, saved_gates, train, test)


def desc_gates(desc: dict) -> list:
    return [b["gates"] for b in desc["blocks"]]


def fuse_from_files(ckpt, arch_desc: dict) -> tuple[RepNet, list, FusedNetwork]:
    net, gates, _ = load_supernet(ckpt, arch_desc)
    return net, gates, fuse_network(net, gates)
