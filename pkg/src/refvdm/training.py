"""Training: masked video loss, the auxiliary reference-recognition loss,
condition dropout, the optimizer loop, and resumable checkpointing.

Per step: a timestep t is drawn uniformly from [1, T], the video latents are
noised to t, the reference latent receives light remind noise at
t' = round(alpha * t), and a single joint forward pass over the (F+1)-slot
input yields both the frame predictions (video loss, reference slot
excluded) and the reference-slot prediction (auxiliary loss). Only the
parameters selected by `select_trainable` are updated.

All randomness flows through one serialized torch generator, so a resumed
run reproduces the uninterrupted run bitwise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import CheckpointMeta, save_checkpoint, load_checkpoint
from .data import LatentCodec, SpriteSample, augment_reference, encode_prompt
from .diffusion import (
    LatentVideo,
    NoiseSchedule,
    ReferenceLatent,
    forward_diffuse,
    make_noise_schedule,
    remind_noise,
    remind_timestep,
)
from .model import ModelConfig, NamedParameterSet, ToyUNet, apply_trainable, select_trainable
from .tensorfile import load_tensors, save_tensors

CONFIG_SCHEMA_VERSION = 1


class NumericError(RuntimeError):
    """Raised when training or sampling produces non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01  # remind-noise timestep factor
    beta: float = 0.1  # auxiliary-loss weight
    p_drop: float = 0.1
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 500
    girl_enabled: bool = True
    update_motion: bool = True
    subject_highlight: bool = True
    augment_reference: bool = True
    # Base-model pretraining mode: train every parameter instead of the
    # customization partition. Stands in for the pretrained backbone that the
    # customization arms fine-tune from (via RunConfig.init_checkpoint).
    train_all: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must be in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (0.0 <= self.p_drop <= 1.0):
            raise ValueError("p_drop must be in [0, 1]")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    """Full training run description (the on-disk config file)."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: dict = field(default_factory=lambda: {"num_steps": 1000, "beta_start": 1e-4, "beta_end": 0.02})
    codec: dict = field(default_factory=lambda: {"patch_size": 2})
    init_checkpoint: str | None = None  # warm-start weights (the "pretrained" base)

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "schedule": dict(self.schedule),
            "codec": dict(self.codec),
            "init_checkpoint": self.init_checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if d.get("schema_version") != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"config schema_version {d.get('schema_version')!r} != supported {CONFIG_SCHEMA_VERSION}"
            )
        return cls(
            model=ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig(),
            train=TrainConfig(**d.get("train", {})),
            schedule=dict(d.get("schedule", {"num_steps": 1000, "beta_start": 1e-4, "beta_end": 0.02})),
            codec=dict(d.get("codec", {"patch_size": 2})),
            init_checkpoint=d.get("init_checkpoint"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LossReport:
    l_video: float
    l_reg: float
    total: float
    step: int = 0

    def __post_init__(self):
        if self.l_video < 0 or self.l_reg < 0:
            raise ValueError("loss terms must be nonnegative")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def video_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """MSE over the F generated slots only; the reference-slot prediction is
    present in eps_pred but excluded."""
    if eps_pred.shape[0] != eps_true.shape[0] + 1 or eps_pred.shape[1:] != eps_true.shape[1:]:
        raise ValueError(
            f"prediction {tuple(eps_pred.shape)} must be target {tuple(eps_true.shape)} plus a reference slot"
        )
    return ((eps_pred[: eps_true.shape[0]] - eps_true) ** 2).mean()


def girl_loss(eps_pred_ref: torch.Tensor, eps_ref_true: torch.Tensor) -> torch.Tensor:
    """MSE between the reference-slot prediction and the injected remind
    noise. When t' rounded to 0 the target stays the sampled noise."""
    if eps_pred_ref.shape != eps_ref_true.shape:
        raise ValueError("reference prediction and target shapes must match")
    return ((eps_pred_ref - eps_ref_true) ** 2).mean()


def total_loss(l_video: torch.Tensor | float, l_reg: torch.Tensor | float, beta: float):
    return l_video + beta * l_reg


def apply_condition_dropout(
    text: torch.Tensor,
    ref: Optional[ReferenceLatent],
    p_drop: float,
    gen: torch.Generator,
) -> tuple[torch.Tensor, Optional[ReferenceLatent]]:
    """With probability p_drop, jointly replace both conditions by their
    nulls: zero text tokens and ref=None (the model substitutes its learned
    null-reference latent)."""
    if not (0.0 <= p_drop <= 1.0):
        raise ValueError("p_drop must be in [0, 1]")
    u = torch.rand((), generator=gen).item()
    if u < p_drop:
        return torch.zeros_like(text), None
    return text, ref


# ---------------------------------------------------------------------------
# Train step / loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: ToyUNet
    optimizer: torch.optim.Optimizer
    gen: torch.Generator
    schedule: NoiseSchedule
    codec: LatentCodec
    step: int = 0


def train_step(batch: SpriteSample, state: TrainState, config: TrainConfig) -> LossReport:
    """One optimization step on a single sample (batch size 1)."""
    model, gen, schedule = state.model, state.gen, state.schedule
    t_max = schedule.num_steps

    # fixed per-step draw order keeps streams aligned across ablation arms
    aug_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen).item())
    t = int(torch.randint(1, t_max + 1, (1,), generator=gen).item())

    ref_pixels = batch.reference_image
    if config.augment_reference:
        ref_pixels = augment_reference(ref_pixels, np.random.default_rng(aug_seed))
    r = ReferenceLatent(torch.from_numpy(state.codec.encode(ref_pixels))[None])
    z0 = LatentVideo(torch.from_numpy(state.codec.encode(batch.video)))
    text = encode_prompt(batch.prompt, model.config.text_embed_dim)

    eps_video = torch.randn(z0.data.shape, generator=gen, dtype=z0.data.dtype)
    z_t = forward_diffuse(z0, t, eps_video, schedule)
    text, ref = apply_condition_dropout(text, r, config.p_drop, gen)
    eps_ref = torch.randn(r.data.shape, generator=gen, dtype=r.data.dtype)

    if ref is None:
        ref_slot = model.null_ref
        t_ref = 0
        use_girl = False
    elif config.girl_enabled:
        ref_slot = remind_noise(ref, t, config.alpha, schedule, eps_ref).data
        t_ref = remind_timestep(t, config.alpha)
        use_girl = True
    else:
        ref_slot = ref.data
        t_ref = 0
        use_girl = False

    z_prime = torch.cat([z_t.data, ref_slot], dim=0)
    pred = model(z_prime, t, t_ref, text)
    l_video = video_loss(pred, eps_video)
    if use_girl:
        l_reg = girl_loss(pred[z0.num_frames :], eps_ref)
    else:
        l_reg = torch.zeros((), dtype=l_video.dtype)
    loss = total_loss(l_video, l_reg, config.beta)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return LossReport(l_video=l_video.item(), l_reg=l_reg.item(), total=loss.item(), step=state.step)


def _optimizer_arrays(opt: torch.optim.Optimizer, names: list[str], params: list[torch.Tensor]) -> dict:
    arrays = {}
    for name, p in zip(names, params):
        st = opt.state.get(p, {})
        for key in ("step", "exp_avg", "exp_avg_sq"):
            if key in st:
                val = st[key]
                arrays[f"opt/{name}/{key}"] = (
                    np.asarray(val.detach().cpu().numpy()) if torch.is_tensor(val) else np.asarray(val)
                )
    return arrays


def _restore_optimizer(opt: torch.optim.Optimizer, names: list[str], params: list[torch.Tensor], arrays: dict):
    for name, p in zip(names, params):
        st = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            k = f"opt/{name}/{key}"
            if k in arrays:
                t = torch.from_numpy(arrays[k].copy())
                st[key] = t if key != "step" else t.reshape(())
        if st:
            opt.state[p] = st


def _save_train_state(path: Path, state: TrainState, trainable_names: list[str], trainable: list[torch.Tensor]):
    arrays = {"rng/torch": state.gen.get_state().numpy()}
    arrays.update(_optimizer_arrays(state.optimizer, trainable_names, trainable))
    save_tensors(path, arrays, meta={"kind": "train_state", "step": state.step})


def _load_train_state(path: Path, state: TrainState, trainable_names: list[str], trainable: list[torch.Tensor]):
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path}: not a train-state container")
    state.gen.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
    _restore_optimizer(state.optimizer, trainable_names, trainable, arrays)
    state.step = int(meta["step"])


def _partition(model: ToyUNet, config: TrainConfig) -> NamedParameterSet:
    pset = NamedParameterSet.from_module(model)
    if config.train_all:
        return NamedParameterSet(arrays=dict(pset.arrays), tags={n: "trainable" for n in pset.arrays})
    return select_trainable(pset, config.update_motion)


def build_train_state(run: RunConfig) -> tuple[TrainState, NamedParameterSet, list[str], list[torch.Tensor]]:
    model = ToyUNet(run.model, seed=run.train.seed)
    if run.init_checkpoint:
        base, _ = load_checkpoint(run.init_checkpoint)
        own = dict(model.named_parameters())
        for name, p in base.named_parameters():
            if name not in own or own[name].shape != p.shape:
                raise ValueError(f"init checkpoint parameter {name!r} does not match the model")
        model.load_state_dict(base.state_dict())
    pset = _partition(model, run.train)
    trainable = apply_trainable(model, pset)
    names = pset.trainable_names
    opt = torch.optim.AdamW(trainable, lr=run.train.learning_rate, weight_decay=run.train.weight_decay)
    gen = torch.Generator().manual_seed(run.train.seed + 1)
    schedule = make_noise_schedule(**run.schedule)
    codec = LatentCodec(**run.codec)
    return TrainState(model=model, optimizer=opt, gen=gen, schedule=schedule, codec=codec), pset, names, trainable


def _checkpoint_meta(run: RunConfig, step: int) -> CheckpointMeta:
    return CheckpointMeta(
        model_config=run.model,
        schedule=dict(run.schedule),
        codec=dict(run.codec),
        step=step,
    )


def train_loop(
    samples: list[SpriteSample],
    run: RunConfig,
    out_dir: str | Path,
    resume: bool = False,
) -> tuple[Path, list[LossReport]]:
    """Train to max_steps with periodic checkpoints and a loss-curve CSV.

    Returns (final checkpoint path, loss reports). With resume=True the loop
    restarts from <out_dir>/checkpoints/last.ntc and reproduces the
    uninterrupted run bitwise.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    loss_csv = out / "loss.csv"

    state, pset, names, trainable = build_train_state(run)
    rows: list[LossReport] = []
    if resume:
        model, _ = load_checkpoint(ckpt_dir / "last.ntc")
        state.model.load_state_dict(model.state_dict())
        # re-apply the trainable partition and rebind the optimizer to the
        # restored tensors
        pset = _partition(state.model, run.train)
        trainable = apply_trainable(state.model, pset)
        names = pset.trainable_names
        state.optimizer = torch.optim.AdamW(
            trainable, lr=run.train.learning_rate, weight_decay=run.train.weight_decay
        )
        _load_train_state(ckpt_dir / "last_state.ntc", state, names, trainable)
        if loss_csv.exists():
            with open(loss_csv) as fh:
                for rec in csv.DictReader(fh):
                    if int(rec["step"]) <= state.step:
                        rows.append(
                            LossReport(
                                l_video=float(rec["l_video"]),
                                l_reg=float(rec["l_reg"]),
                                total=float(rec["total"]),
                                step=int(rec["step"]),
                            )
                        )

    def write_csv():
        with open(loss_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "l_video", "l_reg", "total"])
            for rep in rows:
                wr.writerow([rep.step, f"{rep.l_video:.10e}", f"{rep.l_reg:.10e}", f"{rep.total:.10e}"])

    def save_rolling():
        save_checkpoint(ckpt_dir / "last.ntc", state.model, _checkpoint_meta(run, state.step))
        _save_train_state(ckpt_dir / "last_state.ntc", state, names, trainable)

    if state.step == 0:
        save_checkpoint(ckpt_dir / "initial.ntc", state.model, _checkpoint_meta(run, 0))
        save_rolling()

    n = len(samples)
    while state.step < run.train.max_steps:
        if n == 0:
            raise ValueError("cannot train on an empty dataset")
        idx = int(torch.randint(0, n, (1,), generator=state.gen).item())
        rows.append(train_step(samples[idx], state, run.train))
        if state.step % run.train.checkpoint_every == 0 or state.step == run.train.max_steps:
            save_rolling()
            write_csv()

    save_rolling()
    write_csv()
    if run.train.max_steps == 0:
        return ckpt_dir / "initial.ntc", rows
    final = ckpt_dir / "final.ntc"
    save_checkpoint(final, state.model, _checkpoint_meta(run, state.step))
    return final, rows
