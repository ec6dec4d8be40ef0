"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"DAVSE001"
    u32 header length, UTF-8 JSON header (config, schedule, step, RNG state, log)
    u32 tensor count
    per tensor: u16 name length, name, u8 dtype code (0 = float32), u8 ndim,
                ndim x u32 dims, row-major float32 data

Tensor names are prefixed by section: ``model/``, ``best/`` and ``optim/``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainSchedule
from .model import DualAVSE

MAGIC = b"DAVSE001"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: dict[str, torch.Tensor]
    best_parameters: dict[str, torch.Tensor] | None = None
    optimizer: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    best_val: float | None = None
    best_step: int | None = None
    schedule: TrainSchedule | None = None
    log: list[dict] = field(default_factory=list)

    def build_model(self, best: bool = True) -> DualAVSE:
        model = DualAVSE(self.config)
        state = self.best_parameters if (best and self.best_parameters) else self.parameters
        model.load_state_dict(_cast_like(state, model.state_dict()))
        return model

    def save(self, path) -> Path:
        path = Path(path)
        header = {
            "format_version": FORMAT_VERSION,
            "config": asdict(self.config),
            "schedule": _plain(asdict(self.schedule)) if self.schedule else None,
            "step": self.step,
            "rng_state": self.rng_state,
            "best_val": self.best_val,
            "best_step": self.best_step,
            "log": self.log,
        }
        tensors: list[tuple[str, torch.Tensor]] = []
        tensors += [(f"model/{k}", v) for k, v in self.parameters.items()]
        if self.best_parameters:
            tensors += [(f"best/{k}", v) for k, v in self.best_parameters.items()]
        for pname, st in self.optimizer.items():
            tensors += [(f"optim/{pname}/{k}", v) for k, v in st.items()]
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            blob = json.dumps(header, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(tensors)))
            for name, t in tensors:
                arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).reshape(tuple(t.shape))
                nb = name.encode("utf-8")
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        data = path.read_bytes()
        if data[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        try:
            pos = 8
            (hlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            header = json.loads(data[pos:pos + hlen].decode("utf-8"))
            pos += hlen
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
            tensors = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                code, ndim = struct.unpack_from("<BB", data, pos)
                pos += 2
                if code != _DTYPE_F32:
                    raise CheckpointError(f"{path}: unsupported dtype code {code} for {name}")
                shape = struct.unpack_from(f"<{ndim}I", data, pos)
                pos += 4 * ndim
                n = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
                pos += 4 * n
                tensors[name] = torch.from_numpy(arr.astype(np.float32))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

        params, best, optim = {}, {}, {}
        for name, t in tensors.items():
            section, _, rest = name.partition("/")
            if section == "model":
                params[rest] = t
            elif section == "best":
                best[rest] = t
            elif section == "optim":
                pname, _, key = rest.rpartition("/")
                optim.setdefault(pname, {})[key] = t
        sched = header.get("schedule")
        return cls(
            config=ModelConfig.from_dict(header["config"]),
            parameters=params,
            best_parameters=best or None,
            optimizer=optim,
            step=int(header["step"]),
            rng_state=header.get("rng_state"),
            best_val=header.get("best_val"),
            best_step=header.get("best_step"),
            schedule=TrainSchedule.from_dict(sched) if sched else None,
            log=header.get("log") or [],
        )


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _cast_like(state: dict[str, torch.Tensor], ref: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    missing = set(ref) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    return {k: state[k].to(ref[k].dtype).reshape(ref[k].shape) for k in ref}


def snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def optimizer_state(model: torch.nn.Module, opt: torch.optim.Optimizer) -> dict[str, dict[str, torch.Tensor]]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            out[name] = {k: (v.detach().clone() if torch.is_tensor(v) else torch.tensor(float(v)))
                         for k, v in st.items()}
    return out


def restore_optimizer(model: torch.nn.Module, opt: torch.optim.Optimizer,
                      state: dict[str, dict[str, torch.Tensor]]) -> None:
    for name, p in model.named_parameters():
        if name in state:
            st = state[name]
            opt.state[p] = {
                "step": st["step"].to(torch.float32).reshape(()),
                "exp_avg": st["exp_avg"].to(p.dtype).reshape(p.shape).clone(),
                "exp_avg_sq": st["exp_avg_sq"].to(p.dtype).reshape(p.shape).clone(),
            }
