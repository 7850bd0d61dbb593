"""Self-describing binary checkpoint container.

Layout (little-endian)::

    b"DFCKPT01" | u32 version | u64 len | JSON header (utf-8)
    u32 n_arrays, then per array:
        u32 name_len | name | u32 rank | u32 dims[rank] | u64 nbytes | f32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .foundation import RngStream
from .network import DeepFlow, param_count

MAGIC = b"DFCKPT01"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _arrays(trainer) -> list[tuple[str, np.ndarray]]:
    out = []
    named = list(trainer.model.named_parameters())
    for name, p in named:
        out.append((f"model/{name}", p.detach().numpy()))
    for name, p in trainer.ema.named_parameters():
        out.append((f"ema/{name}", p.detach().numpy()))
    for name, p in named:
        st = trainer.opt.state.get(p)
        if not st:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            out.append((f"opt/{name}/{key}", torch.as_tensor(st[key]).detach().numpy()))
    return out


def encode(run: RunConfig, trainer) -> bytes:
    header = {
        "format_version": VERSION,
        "config": run.to_dict(),
        "step": trainer.step,
        "rng": trainer.stream.state(),
        "param_count": param_count(run.model),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(hb)), hb]
    arrays = _arrays(trainer)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d arrays 0-d
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts += [struct.pack("<Q", arr.nbytes), arr.tobytes()]
    return b"".join(parts)


def save_checkpoint(path, run: RunConfig, trainer) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(run, trainer))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def decode(data: bytes, source: str = "<bytes>"):
    """Returns ``(header dict, {name: ndarray})``."""
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a DFCKPT01 checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint format version {version}, this build reads {VERSION}")
    (hlen,) = struct.unpack_from("<Q", data, 12)
    off = 20
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nl].decode("utf-8")
        off += nl
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        arrays[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{source}: {len(data) - off} trailing bytes")
    return header, arrays


def load_checkpoint(path):
    """Rebuild ``(run config, trainer)`` from a checkpoint file."""
    from .training import Trainer

    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    header, arrays = decode(data, str(path))
    run = RunConfig.from_dict(header["config"])
    model = DeepFlow(run.model)
    n = sum(p.numel() for p in model.parameters())
    if n != header["param_count"] or n != param_count(run.model):
        raise CheckpointError(f"{path}: parameter count {header['param_count']} does not match config ({n})")
    trainer = Trainer(model, run.train, RngStream.from_state(header["rng"]))
    trainer.step = int(header["step"])
    with torch.no_grad():
        for prefix, mod in (("model", trainer.model), ("ema", trainer.ema)):
            for name, p in mod.named_parameters():
                arr = arrays[f"{prefix}/{name}"]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"{path}: {prefix}/{name} has shape {arr.shape}, expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr))
    if any(k.startswith("opt/") for k in arrays):
        sd = trainer.opt.state_dict()
        state = {}
        for idx, (name, _) in enumerate(trainer.model.named_parameters()):
            if f"opt/{name}/step" not in arrays:
                continue
            state[idx] = {
                "step": torch.tensor(float(arrays[f"opt/{name}/step"]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(arrays[f"opt/{name}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt/{name}/exp_avg_sq"]),
            }
        sd["state"] = state
        trainer.opt.load_state_dict(sd)
    return run, trainer
