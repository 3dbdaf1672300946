"""Checkpoints, structured-text artifacts and digests.

Checkpoints are zip containers of ``.npy`` members plus a ``meta.json``
holding the model config. Entries use a fixed timestamp and a sorted order
so identical states produce identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .lora import AdapterSet, LoraBranch
from .model import Model, ModelConfig, ModuleId, build_model

_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArtifactMissing(FileNotFoundError):
    pass


def state_dict(model: Model) -> dict[str, np.ndarray]:
    state = {f"base/{name}": t.data.copy() for name, t in model.named_tensors().items()}
    for mod in model.modules():
        br = mod.branch
        if br is None:
            continue
        k = mod.id.key()
        state[f"lora/{k}/A"] = br.A.data.copy()
        state[f"lora/{k}/e"] = br.e.data.copy()
        state[f"lora/{k}/B"] = br.B.data.copy()
        state[f"lora/{k}/alpha"] = np.array(br.alpha.data, dtype=np.float64)
        state[f"lora/{k}/z"] = np.array(br.z, dtype=np.float64)
    return state


def load_state(model: Model, state: dict[str, np.ndarray]) -> AdapterSet | None:
    """Overwrite base tensors in place and rebuild any saved branches."""
    tensors = model.named_tensors()
    for name, t in tensors.items():
        arr = state[f"base/{name}"]
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.copy()
    for mod in model.modules():
        mod.branch = None
    branches = {}
    for key in sorted({k.split("/")[1] for k in state if k.startswith("lora/")}):
        mid = ModuleId.parse(key)
        p = f"lora/{key}/"
        br = LoraBranch(state[p + "A"], state[p + "e"], state[p + "B"], float(state[p + "alpha"]), name=key)
        br.z = float(state[p + "z"])
        model.module(mid).branch = br
        model.module(mid).trainable = False
        branches[mid] = br
    if not branches:
        return None
    rank = next(iter(branches.values())).rank
    return AdapterSet(branches, rank, -1, model)


def clone_model(model: Model) -> tuple[Model, AdapterSet | None]:
    twin = build_model(model.config)
    adapters = load_state(twin, state_dict(model))
    return twin, adapters


def digest_state(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.asarray(state[name], dtype=np.float64, order="C")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def digest_tensors(tensors) -> str:
    return digest_state({str(i): t.data for i, t in enumerate(tensors)})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path, model: Model, extra: dict | None = None) -> str:
    """Write the checkpoint and return the sha256 of its bytes."""
    path = Path(path)
    state = state_dict(model)
    meta = {"config": model.config.to_dict(), "extra": extra or {}}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _EPOCH), dumps(meta))
        for name in sorted(state):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(state[name], order="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", _EPOCH), member.getvalue())
    data = buf.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[Model, AdapterSet | None, dict]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactMissing(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        state = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                state[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    model = build_model(ModelConfig(**meta["config"]))
    adapters = load_state(model, state)
    extra = meta.get("extra", {})
    if adapters is not None and "lora_seed" in extra:
        adapters.seed = int(extra["lora_seed"])
    return model, adapters, extra


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json(path, obj) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = dumps(obj)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ArtifactMissing(f"artifact not found: {path}")
    return json.loads(path.read_text())
