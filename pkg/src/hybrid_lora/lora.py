"""SVD-style low-rank branches: ``x @ W + b + alpha * z * (x @ A) * e @ B``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .model import LinearModule, Model, ModuleId
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


class LoraBranch:
    def __init__(self, A: np.ndarray, e: np.ndarray, B: np.ndarray, alpha: float = 1.0, name: str = ""):
        A, e, B = np.asarray(A, float), np.asarray(e, float).reshape(-1), np.asarray(B, float)
        r = e.shape[0]
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != r or B.shape[0] != r:
            raise ShapeError(f"branch shapes A{A.shape} e{e.shape} B{B.shape} disagree on rank")
        self.A = Tensor(A, requires_grad=True, name=f"{name}.lora_A")
        self.e = Tensor(e, requires_grad=True, name=f"{name}.lora_e")
        self.B = Tensor(B, requires_grad=True, name=f"{name}.lora_B")
        self.alpha = Tensor(float(alpha), requires_grad=True, name=f"{name}.lora_alpha")
        self.z = 1.0

    @property
    def rank(self) -> int:
        return self.e.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.A, self.e, self.B, self.alpha]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def delta_weight(self) -> np.ndarray:
        return float(self.alpha.data) * (self.A.data * self.e.data) @ self.B.data

    def __call__(self, x: Tensor) -> Tensor:
        h = (x @ self.A) * self.e
        out = (h @ self.B) * self.alpha
        return T.apply_mask(out, self.z)


@dataclass
class AdapterSet:
    branches: dict[ModuleId, LoraBranch]
    rank: int
    seed: int
    model: Model | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.branches)

    def __iter__(self):
        return iter(self.branches)

    def __getitem__(self, mid: ModuleId) -> LoraBranch:
        return self.branches[mid]

    def keys(self) -> list[ModuleId]:
        return sorted(self.branches, key=ModuleId.sort_key)

    def parameters(self) -> list[Tensor]:
        return [p for k in self.keys() for p in self.branches[k].parameters()]

    def e_vectors(self) -> list[Tensor]:
        return [self.branches[k].e for k in self.keys()]


def _branch_rng(seed: int, mid: ModuleId) -> np.random.Generator:
    # per-module stream so initial values do not depend on which targets are attached
    return np.random.default_rng(np.random.SeedSequence([seed, mid.layer, mid.sort_key()[1]]))


def attach_lora(model: Model, targets: Iterable[ModuleId], rank: int, seed: int = 0) -> AdapterSet:
    """Attach zero-effect branches (e = 0) and freeze the targets' base weights."""
    if not isinstance(rank, (int, np.integer)) or rank < 1:
        raise ValueError(f"rank must be a positive integer, got {rank!r}")
    targets = sorted(set(targets), key=ModuleId.sort_key)
    universe = set(model.universe())
    for mid in targets:
        if mid not in universe:
            raise KeyError(f"unknown target module {mid}")
        if model.module(mid).branch is not None:
            raise ValueError(f"module {mid} already has a LoRA branch")
    branches = {}
    for mid in targets:
        mod = model.module(mid)
        rng = _branch_rng(seed, mid)
        A = rng.normal(0.0, INIT_STD, size=(mod.d_in, rank))
        B = rng.normal(0.0, INIT_STD, size=(rank, mod.d_out))
        branch = LoraBranch(A, np.zeros(rank), B, 1.0, name=mid.key())
        mod.branch = branch
        mod.trainable = False
        branches[mid] = branch
    return AdapterSet(branches, int(rank), int(seed), model)


def detach_all(model: Model) -> None:
    for mod in model.modules():
        mod.branch = None


def adapted_forward(x: Tensor, module: LinearModule) -> Tensor:
    if x.shape[-1] != module.d_in:
        raise ShapeError(f"input {x.shape} does not match weight {module.weight.shape}")
    base = x @ module.weight + module.bias
    br = module.branch
    if br is None:
        return base
    # a disabled branch stays on the tape; its mask zeroes value and gradient
    return base + br(x)


def set_masks(adapters: AdapterSet, disabled: Iterable[ModuleId]) -> None:
    disabled = set(disabled)
    missing = disabled - set(adapters.branches)
    if missing:
        raise KeyError(f"no LoRA branch on {sorted(missing, key=ModuleId.sort_key)}")
    for mid, br in adapters.branches.items():
        br.z = 0.0 if mid in disabled else 1.0


def merge_branch(module: LinearModule) -> LinearModule:
    """Fold the branch into W (exact, since the branch is linear in x) and drop it."""
    br = module.branch
    if br is None:
        raise ValueError(f"module {module.id} has no LoRA branch to merge")
    if br.z != 1.0:
        raise ValueError(f"module {module.id} branch is masked off; refusing to merge")
    module.weight.data = module.weight.data + br.delta_weight()
    module.branch = None
    return module
