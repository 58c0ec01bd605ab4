"""Checkpoint serialization: named parameter arrays plus a version/config
header, in the tensor container format (see tensorfile.py). Round trips are
bit-exact."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .model import ModelConfig, ToyUNet
from .tensorfile import load_tensors, save_tensors

CHECKPOINT_VERSION = 1


@dataclass
class CheckpointMeta:
    model_config: ModelConfig
    schedule: dict  # {"num_steps", "beta_start", "beta_end"}
    codec: dict  # {"patch_size", "seed"}
    step: int = 0
    extra: dict | None = None

    def to_meta_dict(self) -> dict:
        return {
            "kind": "checkpoint",
            "checkpoint_version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "schedule": self.schedule,
            "codec": self.codec,
            "step": self.step,
            "extra": self.extra or {},
        }


def save_checkpoint(path: str | Path, model: ToyUNet, meta: CheckpointMeta) -> None:
    arrays = {f"param/{name}": p.detach().cpu().numpy() for name, p in model.named_parameters()}
    save_tensors(path, arrays, meta.to_meta_dict())


def load_checkpoint(path: str | Path) -> tuple[ToyUNet, CheckpointMeta]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint container")
    if meta["checkpoint_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta['checkpoint_version']}")
    config = ModelConfig.from_dict(meta["model_config"])
    model = ToyUNet(config, seed=0)
    state = {}
    for key, arr in tensors.items():
        if not key.startswith("param/"):
            raise ValueError(f"{path}: unexpected tensor entry {key!r}")
        state[key[len("param/"):]] = torch.from_numpy(arr)
    missing = set(dict(model.named_parameters())) ^ set(state)
    if missing:
        raise ValueError(f"{path}: parameter names do not match model config: {sorted(missing)}")
    model.load_state_dict(state)
    return model, CheckpointMeta(
        model_config=config,
        schedule=meta["schedule"],
        codec=meta["codec"],
        step=int(meta["step"]),
        extra=meta.get("extra") or {},
    )
