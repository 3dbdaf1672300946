"""Module sensitivity scores from complementary masked backward passes.

For each validation batch the candidate modules are split into two random
buckets. Two passes run, each with one bucket's LoRA branches switched off,
and their gradients are summed, so every module's ``e`` gradient comes from
the single pass where it was active. The per-batch sensitivity is
``|e * g|_1 / r``; across batches we keep the mean, the population std and
an aggregate score (``mu * sigma`` by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .lora import AdapterSet, set_masks
from .model import Model, ModuleId
from .tasks import Batch

VARIANTS = ("product", "ratio", "inverse_ratio", "additive")


def validation_loss(model: Model, batch: Batch) -> T.Tensor:
    return T.cross_entropy(model(batch.inputs), batch.targets, batch.mask)


def mean_validation_loss(model: Model, batches: Sequence[Batch]) -> float:
    with T.no_grad():
        return math.fsum(validation_loss(model, b).item() for b in batches) / len(batches)


# ------------------------------------------------------------ partitioning


def random_partition(universe: Iterable[ModuleId], seed: int, t: int) -> tuple[list[ModuleId], list[ModuleId]]:
    """Split into two complementary buckets, each module to bucket A with p = 0.5.

    Draws come from a Philox stream keyed by (seed, t), so the split for a
    batch index never depends on earlier draws.
    """
    mods = sorted(set(universe), key=ModuleId.sort_key)
    if not mods:
        raise ValueError("cannot partition an empty universe")
    rng = np.random.Generator(np.random.Philox(key=[int(seed) % 2**64, int(t) % 2**64]))
    in_a = rng.random(len(mods)) < 0.5
    a = [m for m, f in zip(mods, in_a) if f]
    b = [m for m, f in zip(mods, in_a) if not f]
    return a, b


def masked_pass(model: Model, adapters: AdapterSet, batch: Batch, disabled: Iterable[ModuleId]) -> float:
    """One forward/backward with ``disabled`` branches off; gradients accumulate.

    Masks are restored to all-on before returning, also on error.
    """
    disabled = list(disabled)
    set_masks(adapters, disabled)
    try:
        loss = validation_loss(model, batch)
        T.backward(loss)
    finally:
        set_masks(adapters, ())
    return loss.item()


def e_gradient(adapters: AdapterSet, mid: ModuleId) -> np.ndarray:
    g = adapters[mid].e.grad
    return np.zeros(adapters[mid].rank) if g is None else g


# ----------------------------------------------------------------- scores


def batch_sensitivity(e, g, r: int) -> float:
    e, g = np.asarray(e, float).reshape(-1), np.asarray(g, float).reshape(-1)
    if e.shape != g.shape or e.shape[0] != r:
        raise ValueError(f"length mismatch: e {e.shape[0]}, g {g.shape[0]}, r {r}")
    return math.fsum(np.abs(e * g)) / r


@dataclass
class SensitivityRecord:
    module: ModuleId
    samples: list[float] = field(default_factory=list)


@dataclass
class ModuleScore:
    module: ModuleId
    samples: list[float]
    mu: float
    sigma: float
    score: float
    rank: int = 0
    flags: list[str] = field(default_factory=list)


@dataclass
class HybridScoreReport:
    variant: str
    num_batches: int
    seed: int | None
    entries: list[ModuleScore]

    def by_module(self) -> dict[ModuleId, ModuleScore]:
        return {e.module: e for e in self.entries}

    def scores(self) -> dict[ModuleId, float]:
        return {e.module: e.score for e in self.entries}

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "T": self.num_batches,
            "partition_seed": self.seed,
            "modules": [
                {"layer": e.module.layer, "kind": e.module.kind, "T": len(e.samples),
                 "samples": list(e.samples), "mu": e.mu, "sigma": e.sigma, "score": e.score,
                 "variant": self.variant, "rank": e.rank, "flags": list(e.flags)}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> HybridScoreReport:
        entries = [
            ModuleScore(ModuleId(int(m["layer"]), m["kind"]), [float(s) for s in m["samples"]],
                        float(m["mu"]), float(m["sigma"]), float(m["score"]), int(m["rank"]),
                        list(m.get("flags", [])))
            for m in d["modules"]
        ]
        return cls(d["variant"], int(d["T"]), d.get("partition_seed"), entries)


def aggregate(mu: float, sigma: float, variant: str) -> tuple[float, list[str]]:
    if variant == "product":
        return mu * sigma, []
    if variant == "additive":
        return mu + 0.5 * sigma, []
    if variant in ("ratio", "inverse_ratio"):
        if mu == 0.0 or sigma == 0.0:
            return math.inf, ["degenerate-ratio"]
        return (mu / sigma if variant == "ratio" else sigma / mu), []
    raise ValueError(f"unknown score variant {variant!r}; expected one of {VARIANTS}")


def mean_std(samples: Sequence[float]) -> tuple[float, float]:
    n = len(samples)
    mu = math.fsum(samples) / n
    var = math.fsum((s - mu) ** 2 for s in samples) / n
    return mu, math.sqrt(var)


def ascending_ranks(scores: dict[ModuleId, float]) -> dict[ModuleId, int]:
    order = sorted(scores, key=lambda m: (scores[m], m.sort_key()))
    return {m: i + 1 for i, m in enumerate(order)}


def hybrid_score(records: Sequence[SensitivityRecord], variant: str = "product",
                 seed: int | None = None) -> HybridScoreReport:
    if variant not in VARIANTS:
        raise ValueError(f"unknown score variant {variant!r}; expected one of {VARIANTS}")
    lengths = {len(r.samples) for r in records}
    if len(lengths) != 1:
        raise ValueError(f"records have unequal lengths {sorted(lengths)}")
    (n,) = lengths
    if n < 2:
        raise ValueError(f"need at least 2 samples per module, got {n}")
    entries = []
    for rec in sorted(records, key=lambda r: r.module.sort_key()):
        mu, sigma = mean_std(rec.samples)
        score, flags = aggregate(mu, sigma, variant)
        entries.append(ModuleScore(rec.module, list(rec.samples), mu, sigma, score, 0, flags))
    ranks = ascending_ranks({e.module: e.score for e in entries})
    for e in entries:
        e.rank = ranks[e.module]
    return HybridScoreReport(variant, n, seed, entries)


def collect_sensitivities(model: Model, adapters: AdapterSet, batches: Sequence[Batch],
                          seed: int) -> list[SensitivityRecord]:
    """Sensitivity lists, one sample per batch, with a fresh partition per batch."""
    universe = adapters.keys()
    records = {m: SensitivityRecord(m) for m in universe}
    params = adapters.parameters()
    for t, batch in enumerate(batches):
        bucket_a, bucket_b = random_partition(universe, seed, t)
        T.zero_grad(params)
        masked_pass(model, adapters, batch, bucket_a)
        masked_pass(model, adapters, batch, bucket_b)
        for m in universe:
            br = adapters[m]
            records[m].samples.append(batch_sensitivity(br.e.data, e_gradient(adapters, m), br.rank))
    T.zero_grad(params)
    return [records[m] for m in universe]


def score_modules(model: Model, adapters: AdapterSet, batches: Sequence[Batch], seed: int,
                  variant: str = "product") -> HybridScoreReport:
    return hybrid_score(collect_sensitivities(model, adapters, batches, seed), variant, seed)


# -------------------------------------------------------------- baselines


def alpha_importance(adapters: AdapterSet) -> dict[ModuleId, float]:
    return {m: abs(float(adapters[m].alpha.data)) for m in adapters.keys()}


def perturbation_score(model: Model, adapters: AdapterSet, batches: Sequence[Batch],
                       module: ModuleId, base_loss: float | None = None) -> float:
    """Validation-loss increase when only ``module``'s branch is switched off."""
    if module not in adapters.branches:
        raise KeyError(f"no LoRA branch on {module}")
    if not batches:
        raise ValueError("empty validation set")
    if base_loss is None:
        base_loss = mean_validation_loss(model, batches)
    set_masks(adapters, [module])
    try:
        removed = mean_validation_loss(model, batches)
    finally:
        set_masks(adapters, ())
    return removed - base_loss


def perturbation_scores(model: Model, adapters: AdapterSet,
                        batches: Sequence[Batch]) -> tuple[dict[ModuleId, float], int]:
    """Scores for every branch and the number of full validation evaluations used."""
    base = mean_validation_loss(model, batches)
    evals = 1
    out = {}
    for m in adapters.keys():
        out[m] = perturbation_score(model, adapters, batches, m, base_loss=base)
        evals += 1
    return out, evals


def spearman(a: dict[ModuleId, float], b: dict[ModuleId, float]) -> float:
    keys = sorted(a, key=ModuleId.sort_key)
    x = np.array([a[k] for k in keys])
    y = np.array([b[k] for k in keys])
    if np.all(x == x[0]) or np.all(y == y[0]):
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)
