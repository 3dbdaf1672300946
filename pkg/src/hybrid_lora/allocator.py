"""Budgeted split of the candidate modules into full fine-tuning and LoRA sets."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

from .model import KINDS, ModuleId

DIRECTIONS = ("ascending-from-lora", "descending-from-fft")


@dataclass
class AllocationPlan:
    fft_set: set[ModuleId]
    lora_set: set[ModuleId]
    budget_ratio: float
    used_ratio: float
    total_params: int
    direction: str = "ascending-from-lora"
    report_digest: str = ""
    order: list[ModuleId] = field(default_factory=list)

    def to_dict(self) -> dict:
        key = ModuleId.sort_key
        return {
            "fft": [m.key() for m in sorted(self.fft_set, key=key)],
            "lora": [m.key() for m in sorted(self.lora_set, key=key)],
            "R_fft": self.budget_ratio,
            "used_ratio": self.used_ratio,
            "total_params": self.total_params,
            "direction": self.direction,
            "report_digest": self.report_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AllocationPlan:
        return cls(
            {ModuleId.parse(k) for k in d["fft"]},
            {ModuleId.parse(k) for k in d["lora"]},
            float(d["R_fft"]), float(d["used_ratio"]), int(d["total_params"]),
            d.get("direction", DIRECTIONS[0]), d.get("report_digest", ""),
        )

    def grid_csv(self, num_layers: int) -> str:
        """One row per layer, one column per module kind; cells are FFT or LoRA."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", *KINDS])
        for layer in range(1, num_layers + 1):
            w.writerow([layer, *("FFT" if ModuleId(layer, k) in self.fft_set else "LoRA" for k in KINDS)])
        return buf.getvalue()


def _check_inputs(scores: Mapping[ModuleId, float], params: Mapping[ModuleId, int], r_fft: float) -> None:
    if set(scores) != set(params):
        missing = set(params) - set(scores)
        extra = set(scores) - set(params)
        raise ValueError(f"report/universe mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    if not 0.0 < r_fft < 1.0:
        raise ValueError(f"R_fft must lie in (0, 1), got {r_fft}")
    bad = [m for m, p in params.items() if p <= 0]
    if bad:
        raise ValueError(f"non-positive parameter counts for {bad}")


def _ascending(scores: Mapping[ModuleId, float]) -> list[ModuleId]:
    return sorted(scores, key=lambda m: (scores[m], m.sort_key()))


def _plan(fft: list[ModuleId], order, params, r_fft, direction, digest) -> AllocationPlan:
    total = sum(params.values())
    used = sum(params[m] for m in fft) / total
    return AllocationPlan(set(fft), set(params) - set(fft), r_fft, used, total, direction, digest, list(order))


def allocate(scores: Mapping[ModuleId, float], params: Mapping[ModuleId, int], r_fft: float,
             report_digest: str = "") -> AllocationPlan:
    """Longest ascending-score prefix whose parameter share stays within ``r_fft``.

    Selection stops at the first module that would overflow the budget.
    """
    _check_inputs(scores, params, r_fft)
    order = _ascending(scores)
    total = sum(params.values())
    fft, used = [], 0
    for m in order:
        if (used + params[m]) / total > r_fft:
            break
        fft.append(m)
        used += params[m]
    return _plan(fft, order, params, r_fft, "ascending-from-lora", report_digest)


def allocate_from_full(scores: Mapping[ModuleId, float], params: Mapping[ModuleId, int], r_fft: float,
                       report_digest: str = "") -> AllocationPlan:
    """Start with everything fully fine-tuned; move the highest scores to LoRA until within budget."""
    _check_inputs(scores, params, r_fft)
    order = _ascending(scores)
    total = sum(params.values())
    fft = list(order)
    used = total
    while fft and used / total > r_fft:
        used -= params[fft.pop()]
    return _plan(fft, order, params, r_fft, "descending-from-fft", report_digest)


class PlanCheck(NamedTuple):
    ok: bool
    message: str

    def __bool__(self) -> bool:
        return self.ok


def validate_plan(plan: AllocationPlan, universe, params: Mapping[ModuleId, int]) -> PlanCheck:
    universe = set(universe)
    both = plan.fft_set & plan.lora_set
    if both:
        return PlanCheck(False, f"partition not disjoint: {sorted(both)} in both sets")
    covered = plan.fft_set | plan.lora_set
    if covered != universe:
        return PlanCheck(False, f"partition not exhaustive: missing {sorted(universe - covered)}, "
                                f"unknown {sorted(covered - universe)}")
    total = sum(params[m] for m in universe)
    ratio = sum(params[m] for m in plan.fft_set) / total
    if ratio > plan.budget_ratio:
        return PlanCheck(False, f"budget constraint violated: fft ratio {ratio!r} > R_fft {plan.budget_ratio!r}")
    if abs(ratio - plan.used_ratio) > 1e-12:
        return PlanCheck(False, f"used_ratio {plan.used_ratio!r} disagrees with recomputed {ratio!r}")
    return PlanCheck(True, "ok")
