"""Bit-exact run serialization.

Layout: magic "MDDM", u32 version, u64-length-prefixed canonical-JSON blob
(resolved run config plus the step counter), then one record per tensor:
u64 name length, name bytes, u8 dtype tag (0 = float32 little-endian),
u32 rank, u64 dims, raw data. Parameters come first in module definition
order, then first and second optimizer moments in the same order, so
save -> load -> save reproduces the file byte for byte.

Randomness is counter-based (seed and step fully determine every stream),
so the config blob is the complete RNG state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import Denoiser
from .errors import CheckpointError
from .runconfig import RunConfig
from .training import TrainState

MAGIC = b"MDDM"
VERSION = 1
DTYPE_F32 = 0


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", DTYPE_F32))
    fh.write(struct.pack("<I", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(data.tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<Q", _read_exact(fh, 8))
    name = _read_exact(fh, name_len).decode("utf-8")
    (dtype_tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if dtype_tag != DTYPE_F32:
        raise CheckpointError(f"unsupported dtype tag {dtype_tag} for {name}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = 1
    for dim in dims:
        count *= dim
    raw = _read_exact(fh, 4 * count)
    array = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return name, array


def save_checkpoint(state: TrainState, path) -> None:
    blob = json.dumps(
        {"run_config": state.run_config, "step": state.step},
        sort_keys=True,
        separators=(",", ":"),
        allow_nan=False,
    ).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        names = [name for name, _ in state.model.named_parameters()]
        params = dict(state.model.named_parameters())
        for name in names:
            _write_tensor(fh, f"param/{name}", params[name].detach().numpy())
        for name in names:
            _write_tensor(fh, f"adam_m/{name}", state.adam_m[name].numpy())
        for name in names:
            _write_tensor(fh, f"adam_v/{name}", state.adam_v[name].numpy())


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            blob = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt config blob: {exc}") from exc
        if "run_config" not in blob or "step" not in blob:
            raise CheckpointError("config blob is missing run_config or step")
        tensors: dict[str, np.ndarray] = {}
        while True:
            probe = fh.read(1)
            if not probe:
                break
            fh.seek(-1, 1)
            name, array = _read_tensor(fh)
            tensors[name] = array

    cfg = RunConfig.from_dict(blob["run_config"])
    model = Denoiser(cfg.backbone_config(), cfg.layout())
    state = TrainState(
        model=model,
        config=cfg.train_config(),
        schedule=cfg.schedule(),
        vocab=cfg.vocab(),
        run_config=cfg.to_dict(),
        step=int(blob["step"]),
    )
    with torch.no_grad():
        for name, param in model.named_parameters():
            for prefix, target in (
                ("param/", None),
                ("adam_m/", state.adam_m),
                ("adam_v/", state.adam_v),
            ):
                key = prefix + name
                if key not in tensors:
                    raise CheckpointError(f"checkpoint is missing tensor {key}")
                array = tensors.pop(key)
                if tuple(array.shape) != tuple(param.shape):
                    raise CheckpointError(
                        f"tensor {key} has shape {array.shape}, "
                        f"expected {tuple(param.shape)}"
                    )
                value = torch.from_numpy(array)
                if target is None:
                    param.copy_(value)
                else:
                    target[name] = value
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    return state
