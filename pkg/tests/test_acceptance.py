"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]`` or ``[FAIL]`` line with the measured
quantities, then asserts. Run on its own with::

    pytest tests/test_acceptance.py -v -s
"""

import itertools
import json
import math
import shutil
import time

import numpy as np
import pytest

from hybrid_lora import io, pipeline
from hybrid_lora import tensor as T
from hybrid_lora.allocator import allocate, allocate_from_full, validate_plan
from hybrid_lora.config import load_config
from hybrid_lora.io import clone_model
from hybrid_lora.lora import attach_lora
from hybrid_lora.model import KINDS, ModelConfig, ModuleId, build_model
from hybrid_lora.scoring import (SensitivityRecord, batch_sensitivity, collect_sensitivities, e_gradient,
                                 hybrid_score, masked_pass, perturbation_scores, random_partition,
                                 spearman, validation_loss)
from hybrid_lora.tasks import VerifiableTask, batches
from hybrid_lora.tensor import Tensor, backward, finite_difference_check
from hybrid_lora.trainer import (GrpoConfig, TrainConfig, clipped_surrogate, compute_advantages,
                                 evaluate_reward, policy_kl, pretrain, probing_warmup, response_logprobs,
                                 sample_group)

from conftest import plant_signal

SMOKE = "configs/smoke.json"
E2E_SEEDS = (0, 1, 2)
# fresh sampling seed and a larger prompt set for the before/after comparison,
# so the best-checkpoint selection (made on the training-time evaluation seed)
# does not inflate the measured gain
HELDOUT_SEED = 1234
HELDOUT_PROMPTS = 64


@pytest.fixture
def verdict(capsys, request):
    def emit(ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def task():
    return VerifiableTask("modular-addition", seed=0, modulus=7)


@pytest.fixture(scope="module")
def probed_all(task):
    model = build_model(ModelConfig(num_layers=2, d_model=32, num_heads=4, d_ff=64, vocab_size=32, max_seq_len=16))
    pretrain(model, task, 60, 1e-2, 16, seed=0)
    adapters = attach_lora(model, model.universe(), 16, seed=0)
    probing_warmup(model, adapters, TrainConfig(warmup_steps=50, lr_lora=2e-2, total_steps=10, eval_every=10), task)
    return model, adapters


def test_gradient_fidelity(probed_all, task, verdict):
    t0 = time.perf_counter()
    model, adapters = probed_all
    assert len(adapters) == 14
    assert all(np.any(e.data != 0) for e in adapters.e_vectors())
    batch = batches(task, "val", 1, 16)[0]
    worst = max(finite_difference_check(lambda e: validation_loss(model, batch), e, 1e-5)
                for e in adapters.e_vectors())
    elapsed = time.perf_counter() - t0
    coords = sum(e.size for e in adapters.e_vectors())
    verdict(worst < 1e-4 and elapsed < 120,
            f"max relative error {worst:.3e} over {coords} e coordinates (tol 1e-4), {elapsed:.1f}s (limit 120s)")


def test_complementary_masking(probed_all, task, verdict):
    model, adapters = probed_all
    params = adapters.parameters()
    val = batches(task, "val", 10, 16)
    worst, disabled_nonzero = 0.0, 0
    for t in range(100):
        batch = val[t % len(val)]
        bucket_a, bucket_b = random_partition(adapters.keys(), 7, t)
        T.zero_grad(params)
        masked_pass(model, adapters, batch, bucket_a)
        first = {m: e_gradient(adapters, m).copy() for m in adapters.keys()}
        disabled_nonzero += sum(int(np.any(first[m] != 0.0)) for m in bucket_a)
        masked_pass(model, adapters, batch, bucket_b)
        accumulated = {m: e_gradient(adapters, m).copy() for m in adapters.keys()}
        T.zero_grad(params)
        masked_pass(model, adapters, batch, bucket_b)
        for m in bucket_a:
            g = e_gradient(adapters, m)
            worst = max(worst, float(np.max(np.abs(accumulated[m] - g))))
        for m in bucket_b:
            disabled_nonzero += int(np.any(e_gradient(adapters, m) != 0.0))
            worst = max(worst, float(np.max(np.abs(accumulated[m] - first[m]))))
    T.zero_grad(params)
    verdict(worst <= 1e-10 and disabled_nonzero == 0,
            f"100 partitions: max |two-pass - active-pass| = {worst:.3e} (tol 1e-10), "
            f"disabled-pass nonzero e-gradients = {disabled_nonzero}")


def test_score_arithmetic(verdict):
    s = batch_sensitivity([1.0, 2.0], [0.5, -0.5], 2)
    mid = ModuleId(1, "query")
    got = {v: hybrid_score([SensitivityRecord(mid, [0.2, 0.4])], v).entries[0].score
           for v in ("product", "ratio", "inverse_ratio", "additive")}
    expect = {"product": 0.03, "ratio": 3.0, "inverse_ratio": 1 / 3, "additive": 0.35}
    errs = {v: abs(got[v] - expect[v]) for v in expect}
    ok = abs(s - 0.75) <= 1e-12 and all(e <= 1e-12 for e in errs.values())
    verdict(ok, f"s={s!r}; " + ", ".join(f"H_{v}={got[v]!r}" for v in expect) + " (tol 1e-12)")


def _universe(L):
    return [ModuleId(layer, k) for layer in range(1, L + 1) for k in KINDS]


def _brute_force(scores, params, r):
    total = sum(params.values())
    mods = list(scores)
    for k in range(len(mods), -1, -1):
        feasible = [set(c) for c in itertools.combinations(mods, k) if sum(params[m] for m in c) / total <= r]
        if feasible:
            return min(feasible, key=lambda c: sorted(scores[m] for m in c))
    return set()


def test_allocation_feasibility(verdict):
    rng = np.random.default_rng(2024)
    infeasible = non_monotone = disagree = 0
    for _ in range(1000):
        U = _universe(int(rng.integers(1, 5)))
        raw = rng.random(len(U))
        if rng.random() < 0.3:
            raw = np.round(raw, 1)  # force ties
        scores = dict(zip(U, raw.tolist()))
        params = dict(zip(U, rng.integers(1, 5000, size=len(U)).tolist()))
        r1, r2 = sorted(rng.uniform(0.001, 0.999, size=2))
        p1, p2 = allocate(scores, params, r1), allocate(scores, params, r2)
        infeasible += (not validate_plan(p1, U, params)) + (not validate_plan(p2, U, params))
        non_monotone += not p1.fft_set <= p2.fft_set
        # uniform P and distinct scores: both directions against exhaustive search
        U7 = _universe(1)
        distinct = dict(zip(U7, rng.permutation(7).astype(float).tolist()))
        uniform = dict.fromkeys(U7, 100)
        expect = _brute_force(distinct, uniform, r1)
        disagree += (allocate(distinct, uniform, r1).fft_set != expect
                     or allocate_from_full(distinct, uniform, r1).fft_set != expect)
    verdict(infeasible == 0 and non_monotone == 0 and disagree == 0,
            f"1000 instances: {infeasible} infeasible plans, {non_monotone} monotonicity violations, "
            f"{disagree} direction/brute-force disagreements")


def test_grpo_mechanics(probed_all, task, verdict):
    adv = compute_advantages([1, 0, 0, 0], eps=0.0)
    adv_err = float(np.max(np.abs(adv - [1.7321, -0.5774, -0.5774, -0.5774])))

    def single(rho, a):
        new = Tensor(np.array([math.log(rho)]), requires_grad=True)
        out = clipped_surrogate(new, [0.0], [a], 0.2)
        backward(T.sum_(out))
        return float(out.data[0]), float(new.grad[0])

    l1, _ = single(1.5, 1.0)
    l2, _ = single(0.5, -1.0)
    clip_bad = 0
    for rho in np.linspace(0.1, 2.5, 97):
        for a in (-2.0, -0.5, 0.5, 2.0):
            if min(abs(rho - 1.2), abs(rho - 0.8)) < 1e-9:
                continue
            _, g = single(rho, a)
            zeroed = (rho > 1.2 and a > 0) or (rho < 0.8 and a < 0)
            clip_bad += (g != 0.0) if zeroed else (abs(g - rho * a) > 1e-12 * abs(rho * a))

    rng = np.random.default_rng(0)
    kl_min = math.inf
    for _ in range(200):
        a, b = rng.normal(size=(2, 4, 3, 32)) * rng.uniform(0.1, 5)
        la = a - np.log(np.exp(a).sum(-1, keepdims=True))
        lb = b - np.log(np.exp(b).sum(-1, keepdims=True))
        kl_min = min(kl_min, policy_kl(Tensor(la), lb, np.ones((4, 3))).item())
    model, _ = probed_all
    twin, _ = clone_model(model)
    g = sample_group(model, task.make_prompt((2, 5)), 4, 1.0, 0, 2)
    lp, _, mask = response_logprobs(model, g.prompt, g.responses)
    lr, _, _ = response_logprobs(twin, g.prompt, g.responses)
    kl_equal = policy_kl(lp, lr.data, mask).item()

    ok = (adv_err <= 1e-4 and abs(l1 - 1.2) <= 1e-12 and abs(l2 + 0.8) <= 1e-12 and clip_bad == 0
          and kl_min >= 0.0 and kl_equal == 0.0)
    verdict(ok, f"A={np.round(adv, 7).tolist()} (err {adv_err:.1e}), l={l1!r},{l2!r}, "
                f"clip-gradient violations {clip_bad}, min KL {kl_min:.3e}, KL at equal params {kl_equal!r}")


def test_planted_signal_recovery(task, verdict):
    t0 = time.perf_counter()
    m0 = build_model(ModelConfig())
    pretrain(m0, task, 60, 1e-2, 16, seed=0)
    val = batches(task, "val", 20, 16)
    lines, ok = [], True
    for target in (ModuleId(2, "up"), ModuleId(1, "value")):
        model, adapters = plant_signal(m0, task, target, steps=80)
        report = hybrid_score(collect_sensitivities(model, adapters, val, seed=0), "product", 0)
        mu = {e.module: e.mu for e in report.entries}
        pert, evals = perturbation_scores(model, adapters, val)
        rho = spearman(mu, pert)
        top_mu = max(mu, key=mu.get) == target and sorted(mu.values())[-2] < mu[target]
        top_p = max(pert, key=pert.get) == target and sorted(pert.values())[-2] < pert[target]
        ok &= top_mu and top_p and rho >= 0.8 and evals == 15
        lines.append(f"{target.key()}: argmax mu {top_mu}, argmax P {top_p}, spearman {rho:.3f}")
    elapsed = time.perf_counter() - t0
    verdict(ok and elapsed < 600, "; ".join(lines) + f" (need >= 0.8), {elapsed:.1f}s (limit 600s)")


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    runs = {}
    t0 = time.perf_counter()
    for seed in E2E_SEEDS:
        cfg = load_config(SMOKE, [f"seeds={json.dumps(dict(model=seed, partition=seed, sampling=seed, lora=seed))}",
                                  f"out_dir={root / f'seed{seed}'}"])
        pipeline.run_pipeline(cfg)
        runs[seed] = cfg
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_end_to_end_pipeline(e2e_runs, verdict):
    runs, elapsed = e2e_runs
    gains, lines, weights_ok = [], [], True
    for seed, cfg in runs.items():
        out = cfg.output_path()
        assert cfg.train.warmup_steps == 200 and cfg.partitions == 20 and cfg.r_fft == 0.10
        assert (cfg.grpo.group_size, cfg.grpo.clip_eps, cfg.grpo.beta) == (4, 0.2, 0.01)
        m0, _, _ = io.load_checkpoint(out / "m0.ckpt")
        final, _, _ = io.load_checkpoint(out / "final.ckpt")
        plan = io.read_json(out / "plan.json")
        heldout = GrpoConfig(**{**cfg.grpo.__dict__, "eval_prompts": HELDOUT_PROMPTS})
        before = evaluate_reward(m0, cfg.task, heldout, HELDOUT_SEED)
        after = evaluate_reward(final, cfg.task, heldout, HELDOUT_SEED)
        gains.append(after - before)
        fft = [ModuleId.parse(k) for k in plan["fft"]]
        lora = [ModuleId.parse(k) for k in plan["lora"]]
        changed = bool(fft) and all(not np.array_equal(m0.module(m).weight.data, final.module(m).weight.data)
                                    for m in fft)
        frozen = all(np.array_equal(m0.module(m).weight.data, final.module(m).weight.data)
                     and np.array_equal(m0.module(m).bias.data, final.module(m).bias.data) for m in lora)
        weights_ok &= changed and frozen
        lines.append(f"seed {seed}: reward {before:.3f} -> {after:.3f}, fft={plan['fft']} changed={changed}, "
                     f"lora bases bitwise frozen={frozen}")
    mean_gain = float(np.mean(gains))
    verdict(mean_gain >= 0.2 and weights_ok and elapsed < 1800,
            f"mean reward gain {mean_gain:.3f} over seeds {list(E2E_SEEDS)} (need >= 0.2); "
            + "; ".join(lines) + f"; {elapsed:.0f}s (limit 1800s)")


DETERMINISTIC = ("config.resolved.json", "m0.ckpt", "probe.ckpt", "report.json", "alpha_importance.json",
                 "plan.json", "grid.csv", "final.ckpt", "metrics.jsonl", "metrics.csv", "oracle.json")


@pytest.mark.slow
def test_determinism(e2e_runs, tmp_path, verdict):
    runs, _ = e2e_runs
    first = runs[E2E_SEEDS[0]]
    out = tmp_path / "rerun"
    cfg = load_config(SMOKE, [f"out_dir={out}"])
    cfg.seeds, cfg.model, cfg.train = first.seeds, first.model, first.train
    # stage by stage, each reading only the previous stage's files
    pipeline.run_probe(cfg)
    pipeline.run_score(cfg)
    pipeline.run_allocate(out / "report.json", cfg.r_fft, cfg.direction, out)
    pipeline.run_train(cfg)
    pipeline.run_oracle(cfg)
    differ = [n for n in DETERMINISTIC if (out / n).read_bytes() != (first.output_path() / n).read_bytes()]
    # config.resolved.json records out_dir, which differs between the two runs by design
    differ = [n for n in differ if n != "config.resolved.json"]
    a = json.loads((out / "config.resolved.json").read_text())
    b = json.loads((first.output_path() / "config.resolved.json").read_text())
    a.pop("out_dir"), b.pop("out_dir")
    if a != b:
        differ.append("config.resolved.json")
    shutil.rmtree(out)
    verdict(not differ, f"{len(DETERMINISTIC)} artifacts compared byte-for-byte; differing: {differ or 'none'}")
