"""Pipeline stages over an output directory.

Each stage reads only files written by earlier stages and records what it
wrote, with sha256 digests, in ``manifest.json``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io as _io
import json
import logging
from pathlib import Path

import numpy as np

from . import io
from .allocator import AllocationPlan, allocate, allocate_from_full, validate_plan
from .config import RunConfig
from .lora import attach_lora
from .model import ModuleId, build_model
from .scoring import (HybridScoreReport, alpha_importance, collect_sensitivities, hybrid_score,
                      perturbation_scores, spearman)
from .tasks import batches
from .trainer import InvariantViolation, hybrid_train, pretrain, probing_warmup

log = logging.getLogger(__name__)

M0 = "m0.ckpt"
PROBE = "probe.ckpt"
REPORT = "report.json"
ALPHA = "alpha_importance.json"
PLAN = "plan.json"
GRID = "grid.csv"
FINAL = "final.ckpt"
METRICS = "metrics.jsonl"
METRICS_CSV = "metrics.csv"
ORACLE = "oracle.json"
MANIFEST = "manifest.json"
CONFIG = "config.resolved.json"


class OutputExists(FileExistsError):
    pass


class UniverseMismatch(ValueError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _record_stage(out: Path, stage: str, started: str, artifacts: dict[str, str], **info) -> None:
    path = out / MANIFEST
    manifest = io.read_json(path) if path.is_file() else {"stages": {}, "artifacts": {}}
    manifest["stages"][stage] = {"started": started, "finished": _now(), "artifacts": sorted(artifacts), **info}
    manifest["artifacts"].update(artifacts)
    io.write_json(path, manifest)


def verify_manifest(out) -> list[str]:
    """Problems found re-hashing every artifact the manifest references."""
    out = Path(out)
    manifest = io.read_json(out / MANIFEST)
    problems = []
    for name, digest in sorted(manifest["artifacts"].items()):
        p = out / name
        if not p.is_file():
            problems.append(f"{name}: missing")
        elif io.file_digest(p) != digest:
            problems.append(f"{name}: digest mismatch")
    return problems


def _write_config(cfg: RunConfig, out: Path) -> str:
    return io.write_json(out / CONFIG, cfg.to_dict())


def _score_batches(cfg: RunConfig):
    return batches(cfg.task, "val", cfg.partitions, cfg.score_batch_size)


# ------------------------------------------------------------------ stages


def run_probe(cfg: RunConfig, overwrite: bool = False) -> dict[str, str]:
    """Build and pretrain the base checkpoint, then attach branches everywhere and warm up."""
    out = cfg.output_path()
    if (out / PROBE).exists() and not overwrite:
        raise OutputExists(f"{out / PROBE} exists; pass --overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    arts = {CONFIG: _write_config(cfg, out)}

    model = build_model(cfg.model)
    losses = pretrain(model, cfg.task, cfg.train.pretrain_steps, cfg.train.pretrain_lr,
                      cfg.train.batch_size, cfg.seeds.model)
    arts[M0] = io.save_checkpoint(out / M0, model, {"stage": "m0"})

    adapters = attach_lora(model, model.universe(), cfg.rank, cfg.seeds.lora)
    warm = probing_warmup(model, adapters, cfg.train, cfg.task)
    arts[PROBE] = io.save_checkpoint(out / PROBE, model, {"stage": "probe", "rank": cfg.rank, "lora_seed": cfg.seeds.lora})
    _record_stage(out, "probe", started, arts,
                  pretrain_final_loss=losses[-1] if losses else None,
                  warmup_final_loss=warm[-1] if warm else None)
    return arts


def run_score(cfg: RunConfig, probe_path=None) -> dict[str, str]:
    out = cfg.output_path()
    model, adapters, _ = io.load_checkpoint(probe_path or out / PROBE)
    if adapters is None:
        raise InvariantViolation("probe checkpoint carries no LoRA branches")
    started = _now()
    records = collect_sensitivities(model, adapters, _score_batches(cfg), cfg.seeds.partition)
    report = hybrid_score(records, cfg.variant, cfg.seeds.partition)
    data = report.to_dict()
    params = dict(model.candidate_modules())
    for row in data["modules"]:
        row["params"] = params[ModuleId(row["layer"], row["kind"])]
    arts = {REPORT: io.write_json(out / REPORT, data)}
    alpha = alpha_importance(adapters)
    arts[ALPHA] = io.write_json(out / ALPHA, {
        "criterion": "abs_alpha",
        "modules": [{"layer": m.layer, "kind": m.kind, "score": s, "params": params[m]}
                    for m, s in alpha.items()],
    })
    _record_stage(out, "score", started, arts, T=report.num_batches, variant=report.variant)
    return arts


def load_report(path) -> tuple[HybridScoreReport, dict[ModuleId, int]]:
    data = io.read_json(path)
    report = HybridScoreReport.from_dict(data)
    params = {ModuleId(int(r["layer"]), r["kind"]): int(r["params"]) for r in data["modules"]}
    return report, params


def run_allocate(report_path, r_fft: float, direction: str, out) -> dict[str, str]:
    out = Path(out)
    report, params = load_report(report_path)
    started = _now()
    digest = io.file_digest(report_path)
    fn = allocate if direction == "ascending-from-lora" else allocate_from_full
    if direction not in ("ascending-from-lora", "descending-from-fft"):
        raise ValueError(f"unknown direction {direction!r}")
    plan = fn(report.scores(), params, r_fft, digest)
    check = validate_plan(plan, params, params)
    if not check:
        raise InvariantViolation(check.message)
    num_layers = max(m.layer for m in params)
    arts = {PLAN: io.write_json(out / PLAN, plan.to_dict())}
    grid = plan.grid_csv(num_layers)
    (out / GRID).write_text(grid)
    arts[GRID] = io.file_digest(out / GRID)
    _record_stage(out, "allocate", started, arts, used_ratio=plan.used_ratio, direction=direction)
    return arts


def _universe_mismatch(plan: AllocationPlan, universe) -> str | None:
    planned = plan.fft_set | plan.lora_set
    if planned != set(universe):
        fmt = lambda s: ", ".join(m.key() for m in sorted(s, key=ModuleId.sort_key))  # noqa: E731
        return f"plan universe [{fmt(planned)}] != model universe [{fmt(universe)}]"
    return None


def run_train(cfg: RunConfig, m0_path=None, plan_path=None) -> dict[str, str]:
    out = cfg.output_path()
    m0, stale, _ = io.load_checkpoint(m0_path or out / M0)
    if stale is not None:
        raise InvariantViolation("base checkpoint unexpectedly carries LoRA branches")
    plan = AllocationPlan.from_dict(io.read_json(plan_path or out / PLAN))
    mismatch = _universe_mismatch(plan, m0.universe())
    if mismatch:
        raise UniverseMismatch(mismatch)
    started = _now()
    result = hybrid_train(m0, plan, cfg.train, cfg.task, cfg.rank, cfg.seeds.lora, cfg.grpo)
    arts = {FINAL: io.save_checkpoint(out / FINAL, result.model, {"stage": "final", "best_step": result.best_step})}
    lines = "".join(json.dumps(r) + "\n" for r in result.metrics)
    (out / METRICS).write_text(lines)
    arts[METRICS] = io.file_digest(out / METRICS)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "objective", "metric", "value", "best"])
    for r in result.metrics:
        w.writerow([r["step"], r["objective"], r["metric"], repr(r["value"]), int(r["best"])])
    (out / METRICS_CSV).write_text(buf.getvalue())
    arts[METRICS_CSV] = io.file_digest(out / METRICS_CSV)
    _record_stage(out, "train", started, arts, initial_metric=result.initial_metric,
                  best_metric=result.best_metric, best_step=result.best_step,
                  plan_digest=io.file_digest(plan_path or out / PLAN))
    return arts


def run_oracle(cfg: RunConfig, probe_path=None) -> dict[str, str]:
    out = cfg.output_path()
    model, adapters, _ = io.load_checkpoint(probe_path or out / PROBE)
    if adapters is None:
        raise InvariantViolation("probe checkpoint carries no LoRA branches")
    started = _now()
    val = _score_batches(cfg)
    pert, evals = perturbation_scores(model, adapters, val)
    if (out / REPORT).is_file():
        report, _ = load_report(out / REPORT)
    else:
        report = hybrid_score(collect_sensitivities(model, adapters, val, cfg.seeds.partition),
                              cfg.variant, cfg.seeds.partition)
    mu = {e.module: e.mu for e in report.entries}
    rho = spearman(mu, pert)
    log.info("oracle used %d full validation evaluations", evals)
    arts = {ORACLE: io.write_json(out / ORACLE, {
        "validation_evaluations": evals,
        "spearman_mu_vs_perturbation": None if np.isnan(rho) else rho,
        "modules": [{"layer": m.layer, "kind": m.kind, "perturbation": p, "mu": mu[m]}
                    for m, p in pert.items()],
    })}
    _record_stage(out, "oracle", started, arts, validation_evaluations=evals)
    return arts


def run_pipeline(cfg: RunConfig, overwrite: bool = False) -> dict[str, str]:
    out = cfg.output_path()
    arts = run_probe(cfg, overwrite)
    arts.update(run_score(cfg))
    arts.update(run_allocate(out / REPORT, cfg.r_fft, cfg.direction, out))
    arts.update(run_train(cfg))
    arts.update(run_oracle(cfg))
    return arts


def summarize(out) -> str:
    out = Path(out)
    lines = [f"run: {out}"]
    if (out / REPORT).is_file():
        report, params = load_report(out / REPORT)
        lines.append(f"scores ({report.variant}, T={report.num_batches}):")
        lines.append(f"  {'module':<12}{'mu':>14}{'sigma':>14}{'score':>14}{'rank':>6}")
        for e in sorted(report.entries, key=lambda e: e.rank):
            lines.append(f"  {e.module.key():<12}{e.mu:>14.6g}{e.sigma:>14.6g}{e.score:>14.6g}{e.rank:>6}")
    if (out / PLAN).is_file():
        plan = AllocationPlan.from_dict(io.read_json(out / PLAN))
        fft = ", ".join(m.key() for m in sorted(plan.fft_set, key=ModuleId.sort_key)) or "-"
        lines.append(f"plan ({plan.direction}): FFT = {fft}; used {plan.used_ratio:.4f} of R_fft {plan.budget_ratio}")
    if (out / GRID).is_file():
        lines.append("grid:")
        lines += ["  " + row for row in (out / GRID).read_text().splitlines()]
    if (out / METRICS).is_file():
        lines.append("metrics:")
        lines += ["  " + row for row in (out / METRICS).read_text().splitlines()]
    if (out / ORACLE).is_file():
        o = io.read_json(out / ORACLE)
        lines.append(f"oracle: {o['validation_evaluations']} evaluations, "
                     f"spearman(mu, P) = {o['spearman_mu_vs_perturbation']}")
    if (out / MANIFEST).is_file():
        problems = verify_manifest(out)
        lines.append("manifest: " + ("all artifacts verified" if not problems else "; ".join(problems)))
    return "\n".join(lines)
