"""Training stages: stand-in pretraining, LoRA probing, and hybrid final training.

The final stage optimizes either teacher-forced cross-entropy or a GRPO
objective: per prompt, G sampled responses get exact-match rewards, the
rewards are normalized within the group, and a clipped importance-ratio
surrogate is maximized minus a KL penalty towards a frozen reference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .allocator import AllocationPlan
from .io import clone_model, digest_tensors, load_state, state_dict
from .lora import AdapterSet, attach_lora
from .model import ConfigError, Model, ModuleId
from .scoring import mean_validation_loss, validation_loss
from .tasks import EOS, PAD, Batch, VerifiableTask, batches, make_batch, reward
from .tensor import Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("supervised", "grpo")


class InvariantViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_fft: float = 4e-5
    lr_lora: float = 1e-3
    warmup_steps: int = 500
    total_steps: int = 500
    eval_every: int = 50
    batch_size: int = 16
    seed: int = 0
    objective: str = "grpo"
    pretrain_steps: int = 300
    pretrain_lr: float = 1e-2
    val_batches: int = 4

    def __post_init__(self):
        for f in ("lr_fft", "lr_lora", "total_steps", "eval_every", "batch_size", "pretrain_lr", "val_batches"):
            v = getattr(self, f)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise ConfigError(f"train.{f}", f"must be positive, got {v!r}")
        for f in ("warmup_steps", "pretrain_steps", "seed"):
            v = getattr(self, f)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"train.{f}", f"must be a non-negative integer, got {v!r}")
        if self.eval_every > self.total_steps:
            raise ConfigError("train.eval_every", f"{self.eval_every} exceeds total_steps={self.total_steps}")
        if self.objective not in OBJECTIVES:
            raise ConfigError("train.objective", f"must be one of {OBJECTIVES}, got {self.objective!r}")


@dataclass
class GrpoConfig:
    group_size: int = 4
    clip_eps: float = 0.2
    beta: float = 0.01
    adv_eps: float = 1e-8
    temperature: float = 1.0
    max_gen_len: int | None = None
    prompts_per_step: int = 8
    eval_prompts: int = 32
    format_weight: float = 0.0
    length_weight: float = 0.0

    def __post_init__(self):
        if not isinstance(self.group_size, int) or self.group_size < 2:
            raise ConfigError("grpo.group_size", f"must be an integer >= 2, got {self.group_size!r}")
        if not self.clip_eps > 0:
            raise ConfigError("grpo.clip_eps", "must be positive")
        if not self.beta >= 0:
            raise ConfigError("grpo.beta", "must be non-negative")
        if not self.adv_eps > 0:
            raise ConfigError("grpo.adv_eps", "must be positive")
        if not self.temperature >= 0:
            raise ConfigError("grpo.temperature", "must be non-negative")
        if self.max_gen_len is not None and self.max_gen_len < 1:
            raise ConfigError("grpo.max_gen_len", "must be positive")
        if self.prompts_per_step < 1 or self.eval_prompts < 1:
            raise ConfigError("grpo.prompts_per_step", "prompt counts must be positive")


class Adam:
    """Adam over parameter groups with their own learning rates."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def zero_grad(self) -> None:
        T.zero_grad(self.params())

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for ps, lr in self.groups:
            for p in ps:
                if p.grad is None:
                    continue
                k = id(p)
                m = self.m.get(k)
                if m is None:
                    m = self.m[k] = np.zeros_like(p.data)
                    self.v[k] = np.zeros_like(p.data)
                v = self.v[k]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------- supervised


def supervised_step(model: Model, batch: Batch, optimizer: Adam) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    optimizer.zero_grad()
    loss = validation_loss(model, batch)
    T.backward(loss)
    optimizer.step()
    return loss.item()


def _train_stream(task: VerifiableTask, seed: int, step: int, batch_size: int) -> Batch:
    rng = np.random.default_rng([task.seed, 11, seed, step])
    return make_batch(task, [task.sample_prompt(rng) for _ in range(batch_size)])


def pretrain(model: Model, task: VerifiableTask, steps: int, lr: float, batch_size: int, seed: int) -> list[float]:
    """Short supervised run over all base parameters; stands in for a pretrained checkpoint."""
    model.set_all_trainable(True)
    opt = Adam([(model.trainable_tensors(), lr)])
    losses = [supervised_step(model, _train_stream(task, seed, s, batch_size), opt) for s in range(steps)]
    model.set_all_trainable(False)
    T.zero_grad(model.named_tensors().values())
    return losses


def probing_warmup(model: Model, adapters: AdapterSet, cfg: TrainConfig, task: VerifiableTask) -> list[float]:
    """Train only the branch parameters for ``cfg.warmup_steps`` steps."""
    missing = set(model.universe()) - set(adapters.branches)
    if missing:
        raise ValueError(f"probing needs branches on every candidate module; missing {sorted(missing)}")
    if model.trainable_tensors():
        raise ValueError("base weights must be frozen during probing")
    before = digest_tensors(model.named_tensors().values())
    opt = Adam([(adapters.parameters(), cfg.lr_lora)])
    losses = [supervised_step(model, _train_stream(task, cfg.seed, s, cfg.batch_size), opt)
              for s in range(cfg.warmup_steps)]
    opt.zero_grad()
    if digest_tensors(model.named_tensors().values()) != before:
        raise InvariantViolation("probing changed base weights")
    return losses


# ------------------------------------------------------------------- GRPO


@dataclass
class GroupSample:
    prompt: tuple[int, ...]
    responses: list[tuple[int, ...]]
    old_logprobs: list[np.ndarray]
    rewards: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)
    ref_logprobs: list[np.ndarray] = field(default_factory=list)  # (len_i, V) full distributions

    @property
    def group_size(self) -> int:
        return len(self.responses)


def _policy_logp(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature if temperature > 0 else logits
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_group(model: Model, prompt: Sequence[int], G: int, temperature: float, seed,
                 max_len: int) -> GroupSample:
    """G ancestral samples; stops at EOS or ``max_len`` tokens.

    Recorded log-probabilities are under the temperature-scaled policy
    (the plain policy when decoding greedily).
    """
    if G < 2:
        raise ValueError("group size must be at least 2")
    prompt = tuple(int(t) for t in prompt)
    rng = np.random.default_rng(seed)
    seqs = np.tile(np.array(prompt, dtype=np.int64), (G, 1))
    done = np.zeros(G, dtype=bool)
    responses: list[list[int]] = [[] for _ in range(G)]
    logps: list[list[float]] = [[] for _ in range(G)]
    with T.no_grad():
        for _ in range(max_len):
            logp = _policy_logp(model(seqs).data[:, -1, :], temperature)
            u = rng.random(G)
            if temperature > 0:
                cdf = np.cumsum(np.exp(logp), axis=-1)
                toks = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1), logp.shape[-1] - 1)
            else:
                toks = logp.argmax(axis=-1)
            for i in range(G):
                if not done[i]:
                    responses[i].append(int(toks[i]))
                    logps[i].append(float(logp[i, toks[i]]))
                    done[i] = toks[i] == EOS
            if done.all():
                break
            seqs = np.concatenate([seqs, np.where(done, PAD, toks)[:, None]], axis=1)
    return GroupSample(prompt, [tuple(r) for r in responses], [np.array(l) for l in logps])


def response_logprobs(model: Model, prompt: Sequence[int], responses: Sequence[Sequence[int]],
                      temperature: float = 1.0) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Full next-token log-distributions at every response position.

    Returns ``(logp (G, L, V), tokens (G, L), mask (G, L))`` with responses
    right-padded to the longest one.
    """
    P = len(prompt)
    L = max(len(r) for r in responses)
    G = len(responses)
    tokens = np.full((G, L), PAD, dtype=np.int64)
    mask = np.zeros((G, L))
    for i, r in enumerate(responses):
        tokens[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    inputs = np.concatenate([np.tile(np.array(prompt, dtype=np.int64), (G, 1)), tokens[:, :-1]], axis=1)
    logits = model(inputs)[:, P - 1 :, :]
    if temperature > 0 and temperature != 1.0:
        logits = logits * (1.0 / temperature)
    return T.log_softmax(logits), tokens, mask


def compute_advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    mu = r.mean()
    var = ((r - mu) ** 2).mean()
    return (r - mu) / math.sqrt(var + eps)


def clipped_surrogate(new_logp: Tensor, old_logp, advantages, clip_eps: float) -> Tensor:
    """Per-token ``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`` with rho = exp(new - old)."""
    ratio = T.exp(new_logp - np.asarray(old_logp, dtype=np.float64))
    adv = np.asarray(advantages, dtype=np.float64)
    return T.minimum(ratio * adv, T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def _masked_group_mean(per_token: Tensor, mask: np.ndarray) -> Tensor:
    """(1/G) sum_i (1/|y_i|) sum_t x[i, t]."""
    lengths = mask.sum(axis=1)
    per_seq = T.sum_(T.apply_mask(per_token, mask), axis=1) * (1.0 / lengths)
    return T.mean(per_seq)


def policy_kl(logp: Tensor, ref_logp, mask: np.ndarray) -> Tensor:
    """Exact KL(current || reference) per position, averaged like the surrogate."""
    ref = np.asarray(ref_logp, dtype=np.float64)
    per_token = T.sum_(T.exp(logp) * (logp - ref), axis=-1)
    return _masked_group_mean(per_token, mask)


def grpo_loss(logp: Tensor, tokens: np.ndarray, mask: np.ndarray, old_logp, ref_logp, advantages,
              clip_eps: float = 0.2, beta: float = 0.01) -> Tensor:
    """Negated GRPO objective for one group.

    ``logp`` is the (G, L, V) log-softmax of the current policy at the
    response positions; ``old_logp`` (G, L) holds the sampling-time token
    log-probabilities and ``ref_logp`` (G, L, V) the reference policy.
    """
    G, L = tokens.shape
    old = np.asarray(old_logp, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if logp.shape[:2] != (G, L) or old.shape != (G, L) or mask.shape != (G, L) or adv.shape != (G,):
        raise T.ShapeError(
            f"grpo_loss: logp {logp.shape}, tokens {tokens.shape}, old {old.shape}, "
            f"mask {mask.shape}, advantages {adv.shape} are not aligned")
    new_tok = T.take_last(logp, tokens)
    surrogate = clipped_surrogate(new_tok, np.where(mask > 0, old, 0.0), adv[:, None], clip_eps)
    objective = _masked_group_mean(surrogate, mask)
    loss = -objective
    if beta:
        loss = loss + policy_kl(logp, ref_logp, mask) * beta
    return loss


def _pad_rows(rows: Sequence[np.ndarray], L: int) -> np.ndarray:
    out = np.zeros((len(rows), L) + rows[0].shape[1:])
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def grpo_step(policy: Model, reference: Model, task: VerifiableTask, prompts, cfg: GrpoConfig,
              optimizer: Adam, seed) -> dict:
    """Sample, score and apply one update over a batch of prompts."""
    max_len = cfg.max_gen_len or task.max_answer_len()
    groups = []
    for j, prompt in enumerate(prompts):
        g = sample_group(policy, prompt, cfg.group_size, cfg.temperature, [*np.atleast_1d(seed), j], max_len)
        g.rewards = [reward(task, prompt, y, cfg.format_weight, cfg.length_weight) for y in g.responses]
        g.advantages = list(compute_advantages(g.rewards, cfg.adv_eps))
        if cfg.beta:
            with T.no_grad():
                ref, _, mask = response_logprobs(reference, prompt, g.responses, cfg.temperature)
            g.ref_logprobs = [ref.data[i, : int(mask[i].sum())] for i in range(g.group_size)]
        groups.append(g)

    optimizer.zero_grad()
    total = None
    for g in groups:
        logp, tokens, mask = response_logprobs(policy, g.prompt, g.responses, cfg.temperature)
        L = tokens.shape[1]
        old = _pad_rows(g.old_logprobs, L)
        ref = _pad_rows(g.ref_logprobs, L) if cfg.beta else None
        loss = grpo_loss(logp, tokens, mask, old, ref, g.advantages, cfg.clip_eps, cfg.beta)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(groups))
    T.backward(total)
    optimizer.step()
    rewards = [r for g in groups for r in g.rewards]
    return {"loss": total.item(), "mean_reward": float(np.mean(rewards))}


def evaluate_reward(model: Model, task: VerifiableTask, cfg: GrpoConfig, seed: int = 0) -> float:
    """Mean reward of G samples per evaluation prompt, with fixed sampling seeds."""
    max_len = cfg.max_gen_len or task.max_answer_len()
    total = []
    for j, prompt in enumerate(task.prompts(cfg.eval_prompts, "eval")):
        g = sample_group(model, prompt, cfg.group_size, cfg.temperature, [seed, 7, j], max_len)
        total.extend(reward(task, prompt, y) for y in g.responses)
    return float(np.mean(total))


# ------------------------------------------------------------ final stage


@dataclass
class TrainResult:
    model: Model
    adapters: AdapterSet | None
    metrics: list[dict]
    best_step: int
    initial_metric: float
    best_metric: float


def _base_module_digest(model: Model, mods) -> str:
    ts = []
    for m in sorted(mods, key=ModuleId.sort_key):
        mod = model.module(m)
        ts += [mod.weight, mod.bias]
    return digest_tensors(ts)


def hybrid_train(m0: Model, plan: AllocationPlan, cfg: TrainConfig, task: VerifiableTask, rank: int = 16,
                 lora_seed: int = 0, grpo: GrpoConfig | None = None) -> TrainResult:
    """Fresh copy of ``m0``; FFT on ``plan.fft_set``, new branches on ``plan.lora_set``.

    Evaluates every ``cfg.eval_every`` steps and returns the best checkpoint
    (lowest validation loss, or highest mean reward under GRPO).
    """
    grpo = grpo or GrpoConfig()
    # the budget is the allocator's business; here the plan only has to partition the universe
    universe = set(m0.universe())
    if plan.fft_set & plan.lora_set or plan.fft_set | plan.lora_set != universe:
        raise ValueError("plan does not partition the model universe")

    model, stale = clone_model(m0)
    if stale is not None:
        for mod in model.modules():
            mod.branch = None
    model.set_all_trainable(False)
    for m in plan.fft_set:
        model.module(m).trainable = True
    adapters = attach_lora(model, plan.lora_set, rank, lora_seed) if plan.lora_set else None
    reference, _ = clone_model(m0)
    for mod in reference.modules():
        mod.branch = None

    fft_params = [t for m in sorted(plan.fft_set, key=ModuleId.sort_key)
                  for t in (model.module(m).weight, model.module(m).bias)]
    lora_params = adapters.parameters() if adapters else []
    opt = Adam([(fft_params, cfg.lr_fft), (lora_params, cfg.lr_lora)])
    frozen_digest = _base_module_digest(model, plan.lora_set)

    supervised = cfg.objective == "supervised"
    val = batches(task, "val", cfg.val_batches, cfg.batch_size)

    def evaluate() -> float:
        if supervised:
            return mean_validation_loss(model, val)
        return evaluate_reward(model, task, grpo, cfg.seed)

    def better(a: float, b: float) -> bool:
        return a < b if supervised else a > b

    initial = evaluate()
    best_metric, best_step, best_state = None, 0, None
    metrics = []
    for step in range(1, cfg.total_steps + 1):
        if supervised:
            train_loss = supervised_step(model, _train_stream(task, cfg.seed, 10_000 + step, cfg.batch_size), opt)
            stats = {"train_loss": train_loss}
        else:
            rng = np.random.default_rng([task.seed, 13, cfg.seed, step])
            prompts = [task.sample_prompt(rng) for _ in range(grpo.prompts_per_step)]
            stats = grpo_step(model, reference, task, prompts, grpo, opt, [cfg.seed, 17, step])
        if step % cfg.eval_every == 0:
            metric = evaluate()
            rec = {"step": step, "objective": cfg.objective, "stage": "final",
                   "metric": "val_loss" if supervised else "mean_reward", "value": metric,
                   "train_loss" if supervised else "train_reward":
                       stats["train_loss"] if supervised else stats["mean_reward"]}
            if best_metric is None or better(metric, best_metric):
                best_metric, best_step, best_state = metric, step, state_dict(model)
                rec["best"] = True
            else:
                rec["best"] = False
            metrics.append(rec)
            log.info("step %d %s=%.6f", step, rec["metric"], metric)
    opt.zero_grad()

    if _base_module_digest(model, plan.lora_set) != frozen_digest:
        raise InvariantViolation("final training changed base weights of LoRA-assigned modules")
    if best_state is not None:
        adapters_restored = load_state(model, best_state)
        if adapters_restored is not None:
            adapters_restored.seed = lora_seed
            adapters = adapters_restored
    for m in plan.fft_set:
        model.module(m).trainable = False
    return TrainResult(model, adapters, metrics, best_step, initial, best_metric if best_metric is not None else initial)


def train_config_dict(cfg) -> dict:
    return asdict(cfg)
