"""One-stage branch search under a global branch budget.

Each branch carries a scalar architecture parameter ``alpha``. Per iteration
a logistic sample ``zeta`` is drawn per branch, the branches are ranked
network-wide by ``R = alpha + zeta``, and the top ``C`` (protected ConvKxK
branches first) run forward with gate value 1. The gate is straight-through:
the forward pass multiplies by the hard value, backward sends

    dL/dalpha = <dL/dx, O> * f * (1 - f) / lambda,   f = sigmoid(R / lambda)

to alpha. Pruned branches do not run and get neither alpha- nor
weight-gradient.

The importance uses ``sigmoid(+R/lambda)``. With the opposite sign a branch
with large R would be switched off as lambda -> 0+, which contradicts the
limit behaviour the ranking relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import RepNet
from .errors import ConfigError
from .optim import SGD, Adam
from .tensor import GradTape, Tensor

_U_CLAMP = 1e-12


def logistic_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), _U_CLAMP, 1 - _U_CLAMP)
    return np.log(u) - np.log1p(-u)


def sample_logistic_noise(rng: np.random.Generator, size=None) -> np.ndarray:
    return logistic_from_uniform(rng.uniform(size=size))


def compute_importance(alpha, zeta, lam=1.0) -> np.ndarray:
    r = (np.asarray(alpha, dtype=np.float64) + zeta) / lam
    return T._stable_sigmoid(np.asarray(r))


def rank_and_select(R: Sequence[float], C: int, protected: Sequence[bool]) -> np.ndarray:
    """Hard 0/1 gates: protected branches plus the global top-(C - #protected) by R.

    Ties go to the lower flat index (lower block, then lower branch).
    """
    R = np.asarray(R, dtype=np.float64)
    protected = np.asarray(protected, dtype=bool)
    n_prot = int(protected.sum())
    if C < n_prot:
        raise ConfigError(f"budget C={C} is below the {n_prot} protected branches")
    z = protected.astype(np.int64)
    slots = min(C, R.size) - n_prot
    if slots > 0:
        cand = np.flatnonzero(~protected)
        order = cand[np.argsort(-R[cand], kind="stable")]
        z[order[:slots]] = 1
    return z


class _GateOp:
    """Straight-through gate bound to one branch's alpha."""

    def __init__(self, alpha: Tensor, hard: float, soft: float, lam: float):
        self.alpha = alpha
        self.hard = hard
        self.soft = soft
        self.lam = lam

    def apply(self, out: Tensor) -> Tensor:
        return gate_forward_backward(out, self.alpha, self.hard, self.soft, self.lam)


def gate_forward_backward(out: Tensor, alpha: Tensor, z_hard: float, z_soft: float, lam: float = 1.0) -> Tensor:
    """Forward multiplies by the hard gate; backward gives alpha the relaxed derivative."""
    zh = out.data.dtype.type(z_hard)
    res = Tensor(out.data * zh) if z_hard != 1 else Tensor(out.data.copy())
    deriv = z_soft * (1.0 - z_soft) / lam

    def _backward(g):
        ga = np.array(np.vdot(g, out.data) * deriv).reshape(alpha.shape) if z_hard else None
        return g * zh, ga

    return T._maybe_record("gate", res, (out, alpha), _backward)


def soft_gate(alpha: Tensor, zeta: float, lam: float = 1.0) -> Tensor:
    """sigmoid((alpha + zeta) / lam) on the tape; pairs with tensor.scale for the relaxed objective."""
    y = T._stable_sigmoid((alpha.data + zeta) / lam)
    out = Tensor(y)
    return T._maybe_record("soft_gate", out, (alpha,), lambda g: (g * y * (1 - y) / lam,))


@dataclass
class SearchConfig:
    budget: Optional[int] = None
    alpha_lr: float = 1e-4
    alpha_betas: tuple = (0.5, 0.999)
    lam: float = 1.0
    seed: int = 0

    def resolve_budget(self, net: RepNet) -> int:
        total = net.total_branches()
        n_prot = int(net.protected_mask().sum())
        c = total if self.budget is None else int(self.budget)
        if c < n_prot:
            raise ConfigError(f"budget C={c} is below the {n_prot} protected branches")
        return c


@dataclass
class ArchState:
    alpha: list[Tensor]
    protected: np.ndarray
    lam: np.ndarray
    last_noise: np.ndarray = field(default=None)
    last_Z: np.ndarray = field(default=None)
    last_soft: np.ndarray = field(default=None)
    keep_counts: np.ndarray = field(default=None)
    iterations: int = 0

    @classmethod
    def create(cls, net: RepNet, lam: float = 1.0) -> "ArchState":
        ids = net.branch_ids()
        alpha = [Tensor(np.zeros((), dtype=np.float64), requires_grad=True, name=f"alpha.{i}.{j}") for i, j in ids]
        n = len(ids)
        return cls(alpha, net.protected_mask(), np.full(n, lam), np.zeros(n), np.zeros(n, np.int64), np.full(n, 0.5),
                   np.zeros(n))

    @property
    def values(self) -> np.ndarray:
        return np.array([float(a.data) for a in self.alpha])

    def set_values(self, vals) -> None:
        for a, v in zip(self.alpha, np.asarray(vals, dtype=np.float64)):
            a.data[...] = v

    def sample(self, rng: np.random.Generator, C: int) -> np.ndarray:
        self.last_noise = sample_logistic_noise(rng, len(self.alpha))
        r = self.values + self.last_noise
        self.last_soft = T._stable_sigmoid(r / self.lam)
        self.last_Z = rank_and_select(r, C, self.protected)
        self.keep_counts += self.last_Z
        self.iterations += 1
        return self.last_Z

    def reset_keep_stats(self) -> None:
        self.keep_counts = np.zeros(len(self.alpha))
        self.iterations = 0

    def keep_rate(self) -> np.ndarray:
        return self.keep_counts / max(self.iterations, 1)

    def gates(self) -> list:
        out = []
        for k, a in enumerate(self.alpha):
            z = int(self.last_Z[k])
            out.append(_GateOp(a, 1.0, float(self.last_soft[k]), float(self.lam[k])) if z else 0.0)
        return out


def finalize_architecture(arch: ArchState, C: int) -> np.ndarray:
    """Noise-free selection: protected branches plus the top alphas."""
    return rank_and_select(arch.values, C, arch.protected)


def search_step(net: RepNet, arch: ArchState, batch, w_opt: SGD, a_opt: Adam, rng: np.random.Generator,
                C: int) -> dict:
    x, y = batch
    z = arch.sample(rng, C)
    gates = net.split_gates(arch.gates())
    w_opt.zero_grad()
    a_opt.zero_grad()
    with GradTape() as tape:
        logits = net.forward(Tensor(x), gates, mode="train")
        loss = T.softmax_cross_entropy(logits, y)
    tape.backward(loss)
    w_opt.step()
    a_opt.step()
    vals = arch.values
    return {
        "loss": float(loss.data),
        "top1": float((logits.data.argmax(axis=1) == y).mean()),
        "active_branches": int(z.sum()),
        "mean_alpha": float(vals.mean()),
        "min_alpha": float(vals.min()),
        "max_alpha": float(vals.max()),
    }
