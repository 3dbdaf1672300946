"""Decoder-only mini-transformer with seven adaptable projections per layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("query", "key", "value", "output", "gate", "up", "down")
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}


class ConfigError(ValueError):
    """A configuration field is invalid; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 32
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for field in ("num_layers", "d_model", "num_heads", "d_ff", "vocab_size", "max_seq_len"):
            v = getattr(self, field)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(field, f"must be a positive integer, got {v!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.d_model % self.num_heads:
            raise ConfigError("num_heads", f"{self.num_heads} does not divide d_model={self.d_model}")

    def to_dict(self) -> dict:
        return asdict(self)


class ModuleId(NamedTuple):
    layer: int  # 1-based
    kind: str

    def key(self) -> str:
        return f"{self.layer}.{self.kind}"

    @classmethod
    def parse(cls, key: str) -> ModuleId:
        layer, kind = key.split(".", 1)
        if kind not in KIND_INDEX:
            raise ValueError(f"unknown module kind {kind!r}")
        return cls(int(layer), kind)

    def sort_key(self) -> tuple[int, int]:
        return (self.layer, KIND_INDEX[self.kind])


class LinearModule:
    """``x @ W + b`` with an optional low-rank branch attached."""

    def __init__(self, id: ModuleId, weight: np.ndarray, bias: np.ndarray):
        self.id = id
        self.weight = Tensor(weight, name=f"{id.key()}.weight")
        self.bias = Tensor(bias, name=f"{id.key()}.bias")
        self.branch = None  # LoraBranch, set by lora.attach_lora

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.weight.requires_grad = flag
        self.bias.requires_grad = flag

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, x: Tensor) -> Tensor:
        from .lora import adapted_forward

        return adapted_forward(x, self)


class Layer:
    def __init__(self, index: int, cfg: ModelConfig, rng: np.random.Generator):
        d, f = cfg.d_model, cfg.d_ff
        dims = {"query": (d, d), "key": (d, d), "value": (d, d), "output": (d, d),
                "gate": (d, f), "up": (d, f), "down": (f, d)}
        self.index = index
        self.num_heads = cfg.num_heads
        self.modules: dict[str, LinearModule] = {}
        for kind in KINDS:
            d_in, d_out = dims[kind]
            w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
            self.modules[kind] = LinearModule(ModuleId(index, kind), w, np.zeros(d_out))
        self.ln1_g = Tensor(np.ones(d), name=f"{index}.ln1.gain")
        self.ln1_b = Tensor(np.zeros(d), name=f"{index}.ln1.bias")
        self.ln2_g = Tensor(np.ones(d), name=f"{index}.ln2.gain")
        self.ln2_b = Tensor(np.zeros(d), name=f"{index}.ln2.bias")

    def named_tensors(self) -> dict[str, Tensor]:
        out = {t.name: t for t in (self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b)}
        for m in self.modules.values():
            out[m.weight.name] = m.weight
            out[m.bias.name] = m.bias
        return out

    def attention(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        H = self.num_heads
        hd = D // H
        m = self.modules

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, hd).transpose(0, 2, 1, 3)

        q, k, v = heads(m["query"](x)), heads(m["key"](x)), heads(m["value"](x))
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        causal = np.triu(np.full((L, L), -1e30), k=1)
        att = T.softmax(att + causal, axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        return m["output"](y)

    def ffn(self, x: Tensor) -> Tensor:
        m = self.modules
        return m["down"](T.silu(m["gate"](x)) * m["up"](x))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(T.layer_norm(x, self.ln1_g, self.ln1_b))
        return x + self.ffn(T.layer_norm(x, self.ln2_g, self.ln2_b))


class Model:
    """Pre-LN decoder. Only the seven projections per layer are adaptation candidates."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, V = config.d_model, config.vocab_size
        self.tok_emb = Tensor(rng.normal(0.0, 1.0, size=(V, d)), name="tok_emb")
        self.pos_emb = Tensor(rng.normal(0.0, 0.1, size=(config.max_seq_len, d)), name="pos_emb")
        self.layers = [Layer(i + 1, config, rng) for i in range(config.num_layers)]
        self.lnf_g = Tensor(np.ones(d), name="lnf.gain")
        self.lnf_b = Tensor(np.zeros(d), name="lnf.bias")
        self.unembed = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, V)), name="unembed")

    # ---- structure

    def module(self, mid: ModuleId) -> LinearModule:
        if not (1 <= mid.layer <= len(self.layers)) or mid.kind not in KIND_INDEX:
            raise KeyError(f"unknown module {mid}")
        return self.layers[mid.layer - 1].modules[mid.kind]

    def modules(self) -> list[LinearModule]:
        return [layer.modules[k] for layer in self.layers for k in KINDS]

    def candidate_modules(self) -> list[tuple[ModuleId, int]]:
        return [(m.id, m.param_count()) for m in self.modules()]

    def universe(self) -> list[ModuleId]:
        return [m.id for m in self.modules()]

    def param_count(self, mid: ModuleId) -> int:
        return self.module(mid).param_count()

    def named_tensors(self) -> dict[str, Tensor]:
        """Every base-model parameter (LoRA state excluded), by stable name."""
        out = {t.name: t for t in (self.tok_emb, self.pos_emb)}
        for layer in self.layers:
            out.update(layer.named_tensors())
        out[self.lnf_g.name] = self.lnf_g
        out[self.lnf_b.name] = self.lnf_b
        out[self.unembed.name] = self.unembed
        return out

    def set_all_trainable(self, flag: bool) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = flag

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    # ---- forward

    def forward(self, tokens) -> Tensor:
        """Logits of shape (len, V) for a 1-D sequence or (B, len, V) for a batch."""
        toks = np.asarray(tokens)
        single = toks.ndim == 1
        if single:
            toks = toks[None, :]
        if toks.ndim != 2 or toks.shape[1] == 0:
            raise ValueError(f"expected a non-empty token sequence, got shape {np.shape(tokens)}")
        if not np.issubdtype(toks.dtype, np.integer):
            raise ValueError("tokens must be integers")
        V, S = self.config.vocab_size, self.config.max_seq_len
        if toks.min() < 0 or toks.max() >= V:
            raise ValueError(f"token out of range [0, {V})")
        if toks.shape[1] > S:
            raise ValueError(f"sequence length {toks.shape[1]} exceeds max_seq_len={S}")
        L = toks.shape[1]
        x = T.embedding(self.tok_emb, toks) + T.reshape(
            T.embedding(self.pos_emb, np.arange(L)), (1, L, self.config.d_model))
        for layer in self.layers:
            x = layer(x)
        logits = T.layer_norm(x, self.lnf_g, self.lnf_b) @ self.unembed
        return T.reshape(logits, logits.shape[1:]) if single else logits

    __call__ = forward


def build_model(config: ModelConfig) -> Model:
    model = Model(config)
    model.set_all_trainable(False)
    return model
