"""Synthetic tasks with programmatic verifiers, plus the fixed symbol vocabulary."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .model import ConfigError

PAD, BOS, EOS, EQ, PLUS, MOD, COPY, REV = range(8)
NUM0 = 8  # token of the number 0; number n is token NUM0 + n
SPECIALS = {PAD: "<pad>", BOS: "<s>", EOS: "</s>", EQ: "=", PLUS: "+", MOD: "mod", COPY: "copy", REV: "rev"}
TASK_KINDS = ("modular-addition", "sequence-copy", "sequence-reverse")


def num(n: int) -> int:
    return NUM0 + int(n)


def detokenize(tokens: Sequence[int]) -> str:
    return " ".join(SPECIALS.get(int(t), str(int(t) - NUM0)) for t in tokens)


@dataclass(frozen=True)
class VerifiableTask:
    kind: str = "modular-addition"
    seed: int = 0
    modulus: int = 11
    num_symbols: int = 8
    min_len: int = 2
    max_len: int = 4

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError("task.kind", f"must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.modulus < 2:
            raise ConfigError("task.modulus", "must be at least 2")
        if self.num_symbols < 2:
            raise ConfigError("task.num_symbols", "must be at least 2")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("task.min_len", "need 1 <= min_len <= max_len")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def max_number(self) -> int:
        return self.modulus - 1 if self.kind == "modular-addition" else self.num_symbols - 1

    def min_vocab(self) -> int:
        return NUM0 + self.max_number + 1

    def max_answer_len(self) -> int:
        # answer tokens plus EOS
        return 2 if self.kind == "modular-addition" else self.max_len + 1

    def max_seq_len(self) -> int:
        if self.kind == "modular-addition":
            return 5 + 2
        return 3 + 2 * self.max_len + 1

    # ---- generation

    def make_prompt(self, operands: Sequence[int]) -> tuple[int, ...]:
        if self.kind == "modular-addition":
            a, b = operands
            return (BOS, num(a), PLUS, num(b), EQ)
        op = COPY if self.kind == "sequence-copy" else REV
        return (BOS, op, *(num(s) for s in operands), EQ)

    def sample_prompt(self, rng: np.random.Generator) -> tuple[int, ...]:
        if self.kind == "modular-addition":
            a, b = rng.integers(0, self.modulus, size=2)
            return self.make_prompt((a, b))
        n = int(rng.integers(self.min_len, self.max_len + 1))
        return self.make_prompt(rng.integers(0, self.num_symbols, size=n))

    def answer(self, prompt: Sequence[int]) -> tuple[int, ...]:
        """The unique correct answer tokens (without EOS)."""
        p = tuple(int(t) for t in prompt)
        if self.kind == "modular-addition":
            return (num(((p[1] - NUM0) + (p[3] - NUM0)) % self.modulus),)
        body = p[2:-1]
        return body if self.kind == "sequence-copy" else body[::-1]

    def prompts(self, n: int, split: str) -> list[tuple[int, ...]]:
        rng = np.random.default_rng([self.seed, _SPLITS[split]])
        return [self.sample_prompt(rng) for _ in range(n)]

    def render(self, prompt: Sequence[int]) -> str:
        if self.kind == "modular-addition":
            return f"{prompt[1] - NUM0}+{prompt[3] - NUM0} mod {self.modulus} ="
        return detokenize(prompt[1:])


_SPLITS = {"train": 1, "val": 2, "eval": 3, "probe": 4}


def parse_response(response) -> tuple[int, ...] | None:
    """Answer span of a response: tokens before the first EOS.

    Strings are read as whitespace-separated integers. Returns None when
    the response is malformed (unterminated token stream, non-numeric text).
    """
    if isinstance(response, str):
        parts = response.split()
        if not parts or not all(p.isdigit() for p in parts):
            return None
        return tuple(num(int(p)) for p in parts)
    toks = [int(t) for t in response]
    if EOS not in toks:
        return None
    return tuple(toks[: toks.index(EOS)])


def reward(task: VerifiableTask, prompt, response, format_weight: float = 0.0,
           length_weight: float = 0.0) -> float:
    """Exact-match verifier. Never raises on arbitrary generations.

    ``format_weight`` adds a bonus for a terminated response and
    ``length_weight`` subtracts per token beyond the answer length; both
    default to 0 so the reward is binary.
    """
    try:
        span = parse_response(response)
        target = task.answer(prompt)
    except (TypeError, ValueError, IndexError):
        return 0.0
    r = 1.0 if span is not None and span == target else 0.0
    if format_weight and span is not None:
        r += format_weight
    if length_weight and not isinstance(response, str):
        extra = max(0, len(list(response)) - (len(target) + 1))
        r -= length_weight * extra
    return r


@dataclass
class Batch:
    inputs: np.ndarray  # (B, L) int
    targets: np.ndarray  # (B, L) int
    mask: np.ndarray  # (B, L) float, 1 where the target is an answer token

    def __len__(self) -> int:
        return self.inputs.shape[0]


def make_batch(task: VerifiableTask, prompts: Sequence[Sequence[int]]) -> Batch:
    """Teacher-forced batch; loss positions cover the answer tokens and EOS only."""
    if len(prompts) == 0:
        raise ValueError("empty batch")
    seqs = [tuple(p) + task.answer(p) + (EOS,) for p in prompts]
    L = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), L), PAD, dtype=np.int64)
    targets = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, (p, s) in enumerate(zip(prompts, seqs)):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, len(p) - 1 : n] = 1.0
    return Batch(inputs, targets, mask)


def batches(task: VerifiableTask, split: str, num_batches: int, batch_size: int) -> list[Batch]:
    ps = task.prompts(num_batches * batch_size, split)
    return [make_batch(task, ps[i * batch_size : (i + 1) * batch_size]) for i in range(num_batches)]
