import numpy as np
import pytest
from hypothesis import settings

from hybrid_lora.io import clone_model
from hybrid_lora.lora import attach_lora
from hybrid_lora.model import ModelConfig, build_model
from hybrid_lora.tasks import VerifiableTask, batches
from hybrid_lora.trainer import TrainConfig, pretrain, probing_warmup

# fixed example generation so every run of the suite checks the same cases
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")

TINY = ModelConfig(num_layers=2, d_model=32, num_heads=4, d_ff=64, vocab_size=32, max_seq_len=16, seed=0)


@pytest.fixture(scope="session")
def add_task():
    return VerifiableTask("modular-addition", seed=0, modulus=7)


@pytest.fixture(scope="session")
def copy_task():
    return VerifiableTask("sequence-copy", seed=0, num_symbols=8, min_len=2, max_len=4)


@pytest.fixture(scope="session")
def m0(add_task):
    model = build_model(TINY)
    pretrain(model, add_task, 60, 1e-2, 16, seed=0)
    return model


@pytest.fixture
def fresh_m0(m0):
    return clone_model(m0)[0]


@pytest.fixture(scope="session")
def _probed(m0, add_task):
    model, _ = clone_model(m0)
    adapters = attach_lora(model, model.universe(), 16, seed=0)
    probing_warmup(model, adapters, TrainConfig(warmup_steps=60, lr_lora=2e-2, total_steps=10, eval_every=10), add_task)
    return model


@pytest.fixture
def probed(_probed):
    """A private copy of the warmed-up all-LoRA model and its adapter set."""
    return clone_model(_probed)


@pytest.fixture(scope="session")
def val_batches(add_task):
    return batches(add_task, "val", 4, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def plant_signal(m0, task, target, steps=80, lr=2e-2, rank=16, seed=0):
    """Copy of ``m0`` with branches everywhere but only ``target``'s branch trained."""
    from hybrid_lora.trainer import Adam, _train_stream, supervised_step

    model, _ = clone_model(m0)
    adapters = attach_lora(model, model.universe(), rank, seed=seed)
    opt = Adam([(adapters[target].parameters(), lr)])
    for p in adapters.parameters():
        p.requires_grad = False
    for p in adapters[target].parameters():
        p.requires_grad = True
    for step in range(steps):
        supervised_step(model, _train_stream(task, seed, step, 16), opt)
    for p in adapters.parameters():
        p.requires_grad = True
    return model, adapters
