"""Collapse gated RepBlocks into single K x K convolutions.

All kernel algebra runs in float64 and is cast to the network dtype only at
the end; the 1x1 -> KxK contraction otherwise loses several digits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import BranchKind, RepBlock, RepNet, _gate_value, architecture_hash, crop_window
from .tensor import BatchNormParams, Tensor


def _f64(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)


def fuse_conv_bn(kernel, bn: BatchNormParams, bias=None) -> tuple[np.ndarray, np.ndarray]:
    """Fold eval-mode batch norm into the preceding conv's kernel and bias."""
    k = _f64(kernel)
    if k.shape[0] != bn.channels:
        raise ValueError(f"conv has {k.shape[0]} output channels, batch norm has {bn.channels}")
    t = _f64(bn.gamma) / bn.running_std
    b = np.zeros(k.shape[0]) if bias is None else _f64(bias)
    return k * t.reshape(-1, 1, 1, 1), (b - np.asarray(bn.running_mean, np.float64)) * t + _f64(bn.beta)


def merge_parallel(branches: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    if not branches:
        raise ValueError("nothing to merge")
    shape = branches[0][0].shape
    k = np.zeros(shape)
    b = np.zeros(shape[0])
    for kn, bn in branches:
        if kn.shape != shape:
            raise ValueError(f"kernel shape mismatch: {kn.shape} vs {shape}")
        k += kn
        b += bn
    return k, b


def merge_sequential(k1, b1, k2, b2) -> tuple[np.ndarray, np.ndarray]:
    """Merge a 1x1 conv (D_mid, D_in) followed by a KxK conv (C_out, D_mid)."""
    k1, k2 = _f64(k1), _f64(k2)
    if k1.shape[2:] != (1, 1):
        raise NotImplementedError(f"only 1x1-leading sequences are fusable, got {k1.shape[2:]}")
    if k1.shape[0] != k2.shape[1]:
        raise ValueError(f"channel chain broken: first emits {k1.shape[0]}, second expects {k2.shape[1]}")
    b1 = np.zeros(k1.shape[0]) if b1 is None else _f64(b1)
    b2 = np.zeros(k2.shape[0]) if b2 is None else _f64(b2)
    kernel = np.einsum("jduv,dc->jcuv", k2, k1[:, :, 0, 0])
    bias = np.einsum("d,jduv->j", b1, k2) + b2
    return kernel, bias


def avgpool_to_conv(k: int, channels: int) -> np.ndarray:
    kernel = np.zeros((channels, channels, k, k))
    kernel[np.arange(channels), np.arange(channels)] = 1.0 / (k * k)
    return kernel


def pad_kernel_center(kernel, K: int) -> np.ndarray:
    kernel = _f64(kernel)
    h, w = kernel.shape[2:]
    if h == K and w == K:
        return kernel
    rows, cols = crop_window(K, h, w)
    out = np.zeros(kernel.shape[:2] + (K, K))
    out[:, :, rows, cols] = kernel
    return out


def identity_to_conv(channels: int) -> np.ndarray:
    return np.eye(channels).reshape(channels, channels, 1, 1)


@dataclass
class FusedConv:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int
    padding: int
    provenance: list[str] = field(default_factory=list)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, Tensor(self.kernel), Tensor(self.bias), self.stride, self.padding)

    __call__ = forward

    @property
    def parameter_count(self) -> int:
        return self.kernel.size + self.bias.size


def _branch_kernel_bias(block: RepBlock, idx: int) -> tuple[np.ndarray, np.ndarray]:
    branch = block.branches[idx]
    K = block.K
    kind = branch.kind
    main = _f64(block.main_kernel)
    if kind is BranchKind.SKIP:
        k, b = fuse_conv_bn(identity_to_conv(block.c_in), branch.bns[0])
    elif kind is BranchKind.SEQ_1X1_KXK:
        k1, b1 = fuse_conv_bn(branch.pre_kernel, branch.bns[0])
        k2, b2 = fuse_conv_bn(main, branch.bns[1])
        k, b = merge_sequential(k1, b1, k2, b2)
    elif kind is BranchKind.SEQ_1X1_AVG:
        k1, b1 = fuse_conv_bn(branch.pre_kernel, branch.bns[0])
        k, b = merge_sequential(k1, b1, avgpool_to_conv(K, block.c_out), None)
        k, b = fuse_conv_bn(k, branch.bns[1], b)
    else:
        h, w = branch.kernel_hw(K)
        rows, cols = crop_window(K, h, w)
        k, b = fuse_conv_bn(main[:, :, rows, cols], branch.bns[0])
    return pad_kernel_center(k, K), b


def fuse_block(block: RepBlock, gates: Optional[Sequence] = None, dtype=None) -> FusedConv:
    """Equivalent conv (with bias) for the eval-mode pre-activation of a block."""
    gates = gates if gates is not None else [1] * len(block.branches)
    if len(gates) != len(block.branches):
        raise ValueError(f"expected {len(block.branches)} gates, got {len(gates)}")
    hard = [_gate_value(g) for g in gates]
    if hard[block.protected_branch] == 0:
        raise ValueError("gates exclude the protected ConvKxK branch")
    parts, prov = [], []
    for j, z in enumerate(hard):
        if z == 0:
            continue
        k, b = _branch_kernel_bias(block, j)
        parts.append((k * z, b * z))
        prov.append(block.branches[j].kind.value)
    k, b = merge_parallel(parts)
    dtype = dtype or block.main_kernel.dtype
    return FusedConv(k.astype(dtype), b.astype(dtype), block.stride, block.K // 2, prov)


@dataclass
class FusedNetwork:
    convs: list[FusedConv]
    head_weight: np.ndarray
    head_bias: np.ndarray
    source_hash: str = ""
    in_channels: int = 3

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def forward(self, x: Tensor, gates=None, mode: str = "eval") -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        return T.linear(T.global_avg_pool(x), Tensor(self.head_weight), Tensor(self.head_bias))

    __call__ = forward

    @property
    def parameter_count(self) -> int:
        return sum(c.parameter_count for c in self.convs)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, c in enumerate(self.convs):
            out[f"fused.{i}.kernel"] = c.kernel
            out[f"fused.{i}.bias"] = c.bias
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def description(self) -> dict:
        return {
            "schema_version": 1,
            "fused": True,
            "source_hash": self.source_hash,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "dtype": np.dtype(self.head_weight.dtype).name,
            "layers": [
                {"c_in": c.kernel.shape[1], "c_out": c.kernel.shape[0], "stride": c.stride,
                 "K": c.kernel.shape[2], "provenance": c.provenance}
                for c in self.convs
            ],
        }

    @classmethod
    def from_arrays(cls, desc: dict, arrays: dict[str, np.ndarray]) -> "FusedNetwork":
        convs = []
        for i, layer in enumerate(desc["layers"]):
            convs.append(FusedConv(arrays[f"fused.{i}.kernel"], arrays[f"fused.{i}.bias"], layer["stride"],
                                   layer["K"] // 2, list(layer.get("provenance", []))))
        return cls(convs, arrays["head.weight"], arrays["head.bias"], desc.get("source_hash", ""),
                   desc.get("in_channels", 3))


def fuse_network(net: RepNet, gates: Optional[Sequence[Sequence]] = None) -> FusedNetwork:
    gates = gates if gates is not None else net.all_on()
    if len(gates) != len(net.blocks):
        raise ValueError(f"expected gates for {len(net.blocks)} blocks, got {len(gates)}")
    convs = [fuse_block(b, g) for b, g in zip(net.blocks, gates)]
    src = architecture_hash(net.architecture(gates))
    return FusedNetwork(convs, net.head_weight.data.copy(), net.head_bias.data.copy(), src, net.in_channels)


def verify_equivalence(net: RepNet, fused: FusedNetwork, gates=None, n_trials: int = 100, tol: float = 1e-3,
                       image_size: int = 32, seed: int = 0, batch_size: int = 32) -> dict:
    """Compare logits of the gated supernet and its fused form on N(0,1) inputs."""
    gates = gates if gates is not None else net.all_on()
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_trials:
        n = min(batch_size, n_trials - done)
        x = Tensor(rng.standard_normal((n, net.in_channels, image_size, image_size)).astype(net.dtype))
        a = net.forward(x, gates, mode="eval").data
        b = fused.forward(x).data
        worst = max(worst, float(np.abs(a.astype(np.float64) - b).max()))
        done += n
    return {"max_abs_diff": worst, "trials": n_trials, "tol": tol, "pass": bool(worst <= tol)}
