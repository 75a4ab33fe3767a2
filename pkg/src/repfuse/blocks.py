"""Seven-branch searchable blocks and the networks built from them.

Every conv branch whose kernel has shape (C_out, C_in, h, w) reads a centered
window of the block's main K x K kernel, so all of them train one shared
tensor. Sequential branches zero-pad their input first and run the inner
convs unpadded; with that ordering the fused single conv is exact at image
borders too.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import BatchNormParams, Tensor

log = logging.getLogger(__name__)

ARCH_SCHEMA_VERSION = 1


class BranchKind(str, Enum):
    CONV_1X1 = "Conv1x1"
    CONV_KXK = "ConvKxK"
    SEQ_1X1_KXK = "Seq1x1KxK"
    SEQ_1X1_AVG = "Seq1x1Avg"
    CONV_1XK = "Conv1xK"
    CONV_KX1 = "ConvKx1"
    SKIP = "SkipConnect"

    def __str__(self) -> str:
        return self.value


ALL_KINDS = tuple(BranchKind)
# ConvKxK leads so the protected branch is always index 0 within a block.
BLOCK_ORDER = (BranchKind.CONV_KXK,) + tuple(k for k in BranchKind if k is not BranchKind.CONV_KXK)
_SHARING = {BranchKind.CONV_1X1, BranchKind.CONV_KXK, BranchKind.CONV_1XK, BranchKind.CONV_KX1, BranchKind.SEQ_1X1_KXK}


def crop_window(K: int, h: int, w: int) -> tuple[slice, slice]:
    """Row/column slices of the centered h x w window inside a K x K kernel.

    Offsets follow floor arithmetic, start = K//2 - h//2, taken inclusively
    so that a 1 x 1 window is the single center tap.
    """
    for name, v in (("h", h), ("w", w)):
        if v < 1 or v > K:
            raise ValueError(f"crop {name}={v} outside [1, {K}]")
        if v % 2 == 0:
            raise ValueError(f"crop {name}={v} is even; the center is undefined")
    r0 = K // 2 - h // 2
    c0 = K // 2 - w // 2
    return slice(r0, r0 + h), slice(c0, c0 + w)


def crop_shared_kernel(main: Tensor, h: int, w: int) -> Tensor:
    K = main.shape[2]
    if main.shape[3] != K:
        raise ValueError(f"main kernel must be square, got {main.shape[2:]}")
    rows, cols = crop_window(K, h, w)
    return T.crop(main, rows, cols)


@dataclass
class BranchSpec:
    kind: BranchKind
    bns: list[BatchNormParams]
    gate_index: tuple[int, int]
    pre_kernel: Optional[Tensor] = None

    @property
    def shares_main_kernel(self) -> bool:
        return self.kind in _SHARING

    @property
    def own_params(self) -> list[Tensor]:
        out = [self.pre_kernel] if self.pre_kernel is not None else []
        for bn in self.bns:
            out += [bn.gamma, bn.beta]
        return out

    def kernel_hw(self, K: int) -> tuple[int, int]:
        return {
            BranchKind.CONV_1X1: (1, 1),
            BranchKind.CONV_1XK: (1, K),
            BranchKind.CONV_KX1: (K, 1),
        }.get(self.kind, (K, K))


@dataclass
class RepBlock:
    c_in: int
    c_out: int
    stride: int
    K: int
    main_kernel: Tensor
    branches: list[BranchSpec] = field(default_factory=list)

    @property
    def kinds(self) -> list[BranchKind]:
        return [b.kind for b in self.branches]

    @property
    def protected_branch(self) -> int:
        return self.kinds.index(BranchKind.CONV_KXK)

    def parameters(self) -> list[Tensor]:
        params = [self.main_kernel]
        for b in self.branches:
            params += b.own_params
        return params

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.main_kernel": self.main_kernel.data}
        for b in self.branches:
            base = f"{prefix}.{b.kind.value}"
            if b.pre_kernel is not None:
                out[f"{base}.pre_kernel"] = b.pre_kernel.data
            for k, bn in enumerate(b.bns):
                out[f"{base}.bn{k}.gamma"] = bn.gamma.data
                out[f"{base}.bn{k}.beta"] = bn.beta.data
                out[f"{base}.bn{k}.running_mean"] = bn.running_mean
                out[f"{base}.bn{k}.running_var"] = bn.running_var
        return out


def _kaiming(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_block(
    c_in: int,
    c_out: int,
    stride: int = 1,
    K: int = 3,
    kinds: Iterable = ALL_KINDS,
    *,
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
    block_index: int = 0,
) -> RepBlock:
    kinds = {BranchKind(k) for k in kinds}
    if BranchKind.CONV_KXK not in kinds:
        raise ValueError("a block needs its ConvKxK branch")
    if K < 1 or K % 2 == 0:
        raise ValueError(f"K must be a positive odd integer, got {K}")
    if BranchKind.SKIP in kinds and (c_in != c_out or stride != 1):
        log.info("block %d: dropping SkipConnect (c_in=%d, c_out=%d, stride=%d)", block_index, c_in, c_out, stride)
        kinds.discard(BranchKind.SKIP)
    rng = rng or np.random.default_rng(0)
    main = Tensor(_kaiming(rng, (c_out, c_in, K, K), dtype), requires_grad=True, name=f"blocks.{block_index}.main_kernel")
    block = RepBlock(c_in, c_out, stride, K, main)
    for j, kind in enumerate(k for k in BLOCK_ORDER if k in kinds):
        name = f"blocks.{block_index}.{kind.value}"
        pre = None
        if kind is BranchKind.SEQ_1X1_KXK:
            # identity start, as in DBB's identity-based 1x1
            pre = np.eye(c_in, dtype=dtype).reshape(c_in, c_in, 1, 1)
            pre = pre + _kaiming(rng, (c_in, c_in, 1, 1), dtype) * 0.1
        elif kind is BranchKind.SEQ_1X1_AVG:
            pre = _kaiming(rng, (c_out, c_in, 1, 1), dtype)
        if pre is not None:
            pre = Tensor(pre.astype(dtype), requires_grad=True, name=f"{name}.pre_kernel")
        if kind is BranchKind.SEQ_1X1_KXK:
            bns = [BatchNormParams.create(c_in, dtype, f"{name}.bn0"), BatchNormParams.create(c_out, dtype, f"{name}.bn1")]
        elif kind is BranchKind.SEQ_1X1_AVG:
            bns = [BatchNormParams.create(c_out, dtype, f"{name}.bn0"), BatchNormParams.create(c_out, dtype, f"{name}.bn1")]
        else:
            bns = [BatchNormParams.create(c_out, dtype, f"{name}.bn0")]
        block.branches.append(BranchSpec(kind, bns, (block_index, j), pre))
    return block


def branch_forward(block: RepBlock, branch: BranchSpec, x: Tensor, mode: str = "eval") -> Tensor:
    if x.shape[1] != block.c_in:
        raise T.DimensionError(f"channel axis mismatch: block expects {block.c_in}, got {x.shape[1]}")
    K, s, p = block.K, block.stride, block.K // 2
    kind = branch.kind
    bn = branch.bns
    if kind is BranchKind.SKIP:
        return T.batch_norm(x, bn[0], mode)
    if kind is BranchKind.SEQ_1X1_KXK:
        y = T.conv2d(T.pad2d(x, p), branch.pre_kernel)
        y = T.batch_norm(y, bn[0], mode)
        y = T.conv2d(y, block.main_kernel, stride=s)
        return T.batch_norm(y, bn[1], mode)
    if kind is BranchKind.SEQ_1X1_AVG:
        y = T.conv2d(T.pad2d(x, p), branch.pre_kernel)
        y = T.batch_norm(y, bn[0], mode)
        y = T.avg_pool2d(y, K, stride=s)
        return T.batch_norm(y, bn[1], mode)
    h, w = branch.kernel_hw(K)
    kernel = block.main_kernel if (h, w) == (K, K) else crop_shared_kernel(block.main_kernel, h, w)
    y = T.conv2d(x, kernel, stride=s, padding=(h // 2, w // 2))
    return T.batch_norm(y, bn[0], mode)


def _gate_value(g) -> float:
    if hasattr(g, "hard"):
        return float(g.hard)
    if isinstance(g, Tensor):
        return float(g.data.reshape(()))
    return float(g)


def block_forward(block: RepBlock, x: Tensor, gates: Optional[Sequence] = None, mode: str = "eval",
                  activation: bool = True) -> Tensor:
    """relu of the gate-weighted branch sum; zero-gated branches never run.

    A gate may be a number, a scalar Tensor (soft relaxation on the tape) or an
    object exposing ``hard`` and ``apply(output)`` (straight-through gate).
    """
    if gates is None:
        gates = [1.0] * len(block.branches)
    if len(gates) != len(block.branches):
        raise ValueError(f"expected {len(block.branches)} gates, got {len(gates)}")
    outs = []
    for branch, g in zip(block.branches, gates):
        if _gate_value(g) == 0.0:
            continue
        o = branch_forward(block, branch, x, mode)
        outs.append(g.apply(o) if hasattr(g, "apply") else T.scale(o, g))
    if not outs:
        raise ValueError("every branch of the block is gated off")
    y = T.add_n(*outs) if len(outs) > 1 else outs[0]
    return T.relu(y) if activation else y


# ---------------------------------------------------------------------------
# networks

PRESETS: dict[str, dict] = {
    "vgg-tiny": {"widths": [32, 32, 64, 64, 128, 128, 256, 256], "strides": [1, 1, 2, 1, 2, 1, 2, 1]},
}


def _repvgg_preset(layers, channels):
    widths, strides = [], []
    for n, c in zip(layers, channels):
        widths += [c] * n
        strides += [2] + [1] * (n - 1)
    return {"widths": widths, "strides": strides}


for _name, _layers, _chans in [
    ("A0", (1, 2, 4, 14, 1), (64, 48, 96, 192, 1280)),
    ("A1", (1, 2, 4, 14, 1), (64, 64, 128, 256, 1280)),
    ("A2", (1, 2, 4, 14, 1), (64, 96, 192, 384, 1408)),
    ("B1", (1, 4, 6, 16, 1), (64, 128, 256, 512, 2048)),
    ("B2", (1, 4, 6, 16, 1), (64, 160, 320, 640, 2560)),
    ("B3", (1, 4, 6, 16, 1), (64, 192, 384, 768, 2560)),
]:
    PRESETS[f"odbb-{_name.lower()}"] = _repvgg_preset(_layers, _chans)


@dataclass
class RepNet:
    """Stack of RepBlocks followed by global average pooling and a linear head."""

    blocks: list[RepBlock]
    head_weight: Tensor
    head_bias: Tensor
    in_channels: int = 3

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def dtype(self):
        return self.head_weight.dtype

    def branch_ids(self) -> list[tuple[int, int]]:
        return [(i, j) for i, b in enumerate(self.blocks) for j in range(len(b.branches))]

    def protected_mask(self) -> np.ndarray:
        return np.array([j == self.blocks[i].protected_branch for i, j in self.branch_ids()])

    def total_branches(self) -> int:
        return sum(len(b.branches) for b in self.blocks)

    def all_on(self) -> list[list[float]]:
        return [[1.0] * len(b.branches) for b in self.blocks]

    def split_gates(self, flat: Sequence) -> list[list]:
        out, k = [], 0
        for b in self.blocks:
            n = len(b.branches)
            out.append(list(flat[k : k + n]))
            k += n
        return out

    def forward(self, x: Tensor, gates: Optional[Sequence[Sequence]] = None, mode: str = "eval") -> Tensor:
        gates = gates if gates is not None else self.all_on()
        if len(gates) != len(self.blocks):
            raise ValueError(f"expected gates for {len(self.blocks)} blocks, got {len(gates)}")
        for block, g in zip(self.blocks, gates):
            x = block_forward(block, x, g, mode)
        return T.linear(T.global_avg_pool(x), self.head_weight, self.head_bias)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        params = []
        for b in self.blocks:
            params += b.parameters()
        return params + [self.head_weight, self.head_bias]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.state_arrays(f"blocks.{i}"))
        out["head.weight"] = self.head_weight.data
        out["head.bias"] = self.head_bias.data
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, dst in own.items():
            src = arrays[name]
            if src.shape != dst.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {src.shape} vs model {dst.shape}")
            dst[...] = src

    def architecture(self, gates: Optional[Sequence[Sequence]] = None, alpha: Optional[Sequence[float]] = None) -> dict:
        gates = gates if gates is not None else self.all_on()
        alpha_split = self.split_gates(list(alpha)) if alpha is not None else None
        blocks = []
        for i, b in enumerate(self.blocks):
            entry = {
                "c_in": b.c_in,
                "c_out": b.c_out,
                "stride": b.stride,
                "K": b.K,
                "branches": [k.value for k in b.kinds],
                "gates": [int(round(_gate_value(g))) for g in gates[i]],
            }
            if alpha_split is not None:
                entry["alpha"] = [float(a) for a in alpha_split[i]]
            blocks.append(entry)
        return {
            "schema_version": ARCH_SCHEMA_VERSION,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "dtype": np.dtype(self.dtype).name,
            "blocks": blocks,
        }


def build_network(
    widths: Sequence[int],
    strides: Sequence[int],
    *,
    kinds: Iterable = ALL_KINDS,
    in_channels: int = 3,
    num_classes: int = 10,
    K: int = 3,
    seed: int = 0,
    dtype=np.float32,
) -> RepNet:
    if len(widths) != len(strides):
        raise ValueError("widths and strides must have equal length")
    rng = np.random.default_rng(seed)
    kinds = list(kinds)
    blocks, c = [], in_channels
    for i, (w, s) in enumerate(zip(widths, strides)):
        blocks.append(build_block(c, w, s, K, kinds, rng=rng, dtype=dtype, block_index=i))
        c = w
    bound = 1.0 / np.sqrt(c)
    hw = Tensor(rng.uniform(-bound, bound, (num_classes, c)).astype(dtype), requires_grad=True, name="head.weight")
    hb = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="head.bias")
    return RepNet(blocks, hw, hb, in_channels)


def network_from_architecture(arch: dict, seed: int = 0, dtype=None) -> tuple[RepNet, list[list[int]]]:
    """Rebuild an (untrained) network and its gates from an architecture dict."""
    dtype = np.dtype(dtype or arch.get("dtype", "float32"))
    rng = np.random.default_rng(seed)
    blocks = []
    for i, e in enumerate(arch["blocks"]):
        blk = build_block(e["c_in"], e["c_out"], e["stride"], e["K"], e["branches"], rng=rng, dtype=dtype, block_index=i)
        if blk.kinds != [BranchKind(k) for k in e["branches"]]:
            raise ValueError(f"block {i}: branch list {e['branches']} is not in canonical order or not constructible")
        blocks.append(blk)
    c = blocks[-1].c_out
    n_cls = arch["num_classes"]
    hw = Tensor(np.zeros((n_cls, c), dtype=dtype), requires_grad=True, name="head.weight")
    hb = Tensor(np.zeros(n_cls, dtype=dtype), requires_grad=True, name="head.bias")
    gates = [list(e.get("gates", [1] * len(e["branches"]))) for e in arch["blocks"]]
    return RepNet(blocks, hw, hb, arch.get("in_channels", 3)), gates


def architecture_hash(arch: dict) -> str:
    payload = {"blocks": [{k: e[k] for k in ("c_in", "c_out", "stride", "K", "branches", "gates")} for e in arch["blocks"]],
               "num_classes": arch["num_classes"]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]
