"""Toy video diffusion network operating on the (F+1)-slot latent.

The reference latent rides along as the last slot of the input tensor. At
every attention level the layers run in a fixed order:

  1. reference-injection self-attention: each frame's h·w tokens are
     concatenated with the reference slot's h·w tokens (2·h·w tokens total),
     attended jointly, and the F per-frame reference outputs are averaged
     back into a single reference slot;
  2. spatial cross-attention over the text tokens;
  3. temporal attention over the slot axis at each spatial location.

Cross and temporal attention can each include or exclude the reference slot
(ablation toggles); when excluded the slot passes through bitwise unchanged.

All attention ops are also exposed as pure functions over channels-last
feature maps of shape (F+1, h, w, c) so they can be checked against naive
dense oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
from torch import nn


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description for the toy UNet."""

    in_channels: int = 12
    latent_size: int = 16
    channels: tuple[int, ...] = (32, 64)
    attention_levels: tuple[int, ...] = (0, 1)
    head_dim: int = 32
    text_embed_dim: int = 16
    max_frames: int = 32
    spatial_mode: str = "inject"  # "inject" (reference concat) or "plain"
    include_ref_in_cross_attention: bool = True
    include_ref_in_temporal_attention: bool = True

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ValueError("need at least one level")
        if len(self.attention_levels) < 1:
            raise ValueError("need at least one attention level")
        for lvl in self.attention_levels:
            if not (0 <= lvl < len(self.channels)):
                raise ValueError(f"attention level {lvl} out of range")
            if self.channels[lvl] % self.head_dim != 0:
                raise ValueError(f"head_dim {self.head_dim} must divide channel width {self.channels[lvl]}")
        if self.spatial_mode not in ("inject", "plain"):
            raise ValueError(f"unknown spatial_mode {self.spatial_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Functional attention ops
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Projection matrices for one attention layer. w_q/w_out are (c, c);
    w_k/w_v are (c_kv, c) and allow a different key/value source width."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_out: torch.Tensor


@dataclass
class TemporalAttentionParams(AttentionParams):
    """Temporal attention additionally carries learned position codes: one
    table for the generated slots and a distinct code for the reference."""

    pos: torch.Tensor = None  # (max_frames, c)
    ref_pos: torch.Tensor = None  # (c,)


def _attend(q_src: torch.Tensor, kv_src: torch.Tensor, p: AttentionParams) -> torch.Tensor:
    """Softmax(Q Kᵀ / √d) V W_out with Q = q_src W_q, K/V = kv_src W_k/W_v.

    Leading batch dimensions broadcast; d is the key feature width.
    """
    q = q_src @ p.w_q
    k = kv_src @ p.w_k
    v = kv_src @ p.w_v
    d = k.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    return torch.softmax(logits, dim=-1) @ v @ p.w_out


def attention(x: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """Single-head self-attention over a token matrix (N, c) (leading batch
    dims allowed)."""
    if x.shape[-1] != params.w_q.shape[0]:
        raise ValueError(f"token width {x.shape[-1]} does not match W_Q {tuple(params.w_q.shape)}")
    return _attend(x, x, params)


def pisa_forward(f: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """Reference-injection self-attention over an (F+1, h, w, c) feature map.

    For each of the F frames, the reference slot's h·w tokens are prepended to
    the frame's h·w tokens and the 2·h·w tokens attend jointly. The F
    reference outputs are averaged into the returned reference slot.
    """
    if f.dim() != 4:
        raise ValueError(f"feature map must be (F+1, h, w, c), got {tuple(f.shape)}")
    num_frames = f.shape[0] - 1
    if num_frames < 1:
        raise ValueError("feature map must contain at least one generated frame")
    h, w, c = f.shape[1:]
    hw = h * w
    f_z = f[:num_frames].reshape(num_frames, hw, c)
    f_r = f[num_frames].reshape(1, hw, c)
    x = torch.cat([f_r.expand(num_frames, hw, c), f_z], dim=1)
    assert x.shape[1] == 2 * hw, "injection attention must see exactly 2*h*w tokens per frame"
    out = attention(x, params)
    ref_out = out[:, :hw].mean(dim=0, keepdim=True)
    frame_out = out[:, hw:]
    return torch.cat([frame_out, ref_out], dim=0).reshape(num_frames + 1, h, w, c)


def plain_self_attention_forward(f: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """Per-slot self-attention over h·w tokens, reference slot included as its
    own independent attention (baseline mode, no reference concat)."""
    if f.dim() != 4:
        raise ValueError(f"feature map must be (F+1, h, w, c), got {tuple(f.shape)}")
    s, h, w, c = f.shape
    out = attention(f.reshape(s, h * w, c), params)
    return out.reshape(s, h, w, c)


def cross_attention_forward(
    f: torch.Tensor, text: torch.Tensor, params: AttentionParams, include_ref: bool
) -> torch.Tensor:
    """Cross-attention: queries from slot tokens, keys/values from text tokens.

    With include_ref=False the reference slot is returned bitwise unchanged.
    """
    if text.dim() != 2 or text.shape[0] < 1:
        raise ValueError("text embedding must be a nonempty (L, d) matrix")
    s, h, w, c = f.shape
    slots = f if include_ref else f[: s - 1]
    out = _attend(slots.reshape(slots.shape[0], h * w, c), text, params)
    out = out.reshape(slots.shape[0], h, w, c)
    if include_ref:
        return out
    return torch.cat([out, f[s - 1 :]], dim=0)


def temporal_attention_forward(
    f: torch.Tensor, params: TemporalAttentionParams, include_ref: bool
) -> torch.Tensor:
    """Attention over the slot axis at every spatial location.

    Learned position codes are added to the generated slots (table rows
    0..F−1) and a distinct learned code to the reference slot. With
    include_ref=False the reference slot passes through bitwise unchanged.
    """
    s, h, w, c = f.shape
    num_frames = s - 1
    if num_frames > params.pos.shape[0]:
        raise ValueError(f"temporal position table supports at most {params.pos.shape[0]} frames")
    x_frames = f[:num_frames] + params.pos[:num_frames].reshape(num_frames, 1, 1, c)
    if include_ref:
        x_ref = f[num_frames:] + params.ref_pos.reshape(1, 1, 1, c)
        x = torch.cat([x_frames, x_ref], dim=0)
    else:
        x = x_frames
    # (S', h, w, c) -> (h*w, S', c): one token sequence per spatial location
    tokens = x.permute(1, 2, 0, 3).reshape(h * w, x.shape[0], c)
    out = _attend(tokens, tokens, params)
    out = out.reshape(h, w, x.shape[0], c).permute(2, 0, 1, 3)
    if include_ref:
        return out
    return torch.cat([out, f[num_frames:]], dim=0)


# ---------------------------------------------------------------------------
# Network modules
# ---------------------------------------------------------------------------


def _num_groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (S,) -> (S, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    """Conv-norm-activation residual block with timestep modulation, applied
    per slot. The final conv is zero-initialized so a fresh block is the
    identity map."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_num_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


def _init_proj(c_in: int, c_out: int, gen: torch.Generator, scale: float = 1.0) -> nn.Parameter:
    w = torch.randn(c_in, c_out, generator=gen) * (scale / math.sqrt(c_in))
    return nn.Parameter(w)


class SpatialSelfAttention(nn.Module):
    """Pre-norm spatial self-attention, injection or plain mode."""

    def __init__(self, c: int, mode: str, gen: torch.Generator):
        super().__init__()
        self.mode = mode
        self.norm = nn.LayerNorm(c)
        self.w_q = _init_proj(c, c, gen)
        self.w_k = _init_proj(c, c, gen)
        self.w_v = _init_proj(c, c, gen)
        self.w_out = _init_proj(c, c, gen, scale=0.5)

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_out)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h = self.norm(f)
        if self.mode == "inject":
            return pisa_forward(h, self.params)
        return plain_self_attention_forward(h, self.params)


class CrossAttention(nn.Module):
    def __init__(self, c: int, text_dim: int, gen: torch.Generator):
        super().__init__()
        self.norm = nn.LayerNorm(c)
        self.w_q = _init_proj(c, c, gen)
        self.w_k = _init_proj(text_dim, c, gen)
        self.w_v = _init_proj(text_dim, c, gen)
        self.w_out = _init_proj(c, c, gen, scale=0.5)

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_out)

    def forward(self, f: torch.Tensor, text: torch.Tensor, include_ref: bool) -> torch.Tensor:
        return cross_attention_forward(self.norm(f), text, self.params, include_ref)


class TemporalAttention(nn.Module):
    def __init__(self, c: int, max_frames: int, gen: torch.Generator):
        super().__init__()
        self.norm = nn.LayerNorm(c)
        self.w_q = _init_proj(c, c, gen)
        self.w_k = _init_proj(c, c, gen)
        self.w_v = _init_proj(c, c, gen)
        self.w_out = _init_proj(c, c, gen, scale=0.5)
        self.pos = nn.Parameter(torch.randn(max_frames, c, generator=gen) * 0.02)
        self.ref_pos = nn.Parameter(torch.randn(c, generator=gen) * 0.02)

    @property
    def params(self) -> TemporalAttentionParams:
        return TemporalAttentionParams(self.w_q, self.w_k, self.w_v, self.w_out, self.pos, self.ref_pos)

    def forward(self, f: torch.Tensor, include_ref: bool) -> torch.Tensor:
        return temporal_attention_forward(self.norm(f), self.params, include_ref)


class AttentionStack(nn.Module):
    """One attention level: spatial self-attn, cross-attn, temporal attn, in
    that fixed order, each with a residual connection. Slots excluded by the
    include_ref flags keep their pre-layer value bitwise."""

    def __init__(self, cfg: ModelConfig, c: int, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.spatial_self_attn = SpatialSelfAttention(c, cfg.spatial_mode, gen)
        self.cross_attn = CrossAttention(c, cfg.text_embed_dim, gen)
        self.motion = TemporalAttention(c, cfg.max_frames, gen)

    def forward(self, f: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        s = f.shape[0]
        f = f + self.spatial_self_attn(f)
        y = self.cross_attn(f, text, self.cfg.include_ref_in_cross_attention)
        if self.cfg.include_ref_in_cross_attention:
            f = f + y
        else:
            f = torch.cat([f[: s - 1] + y[: s - 1], f[s - 1 :]], dim=0)
        y = self.motion(f, self.cfg.include_ref_in_temporal_attention)
        if self.cfg.include_ref_in_temporal_attention:
            f = f + y
        else:
            f = torch.cat([f[: s - 1] + y[: s - 1], f[s - 1 :]], dim=0)
        return f


class LevelBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, in_ch: int, out_ch: int, temb_dim: int, with_attn: bool,
                 gen: torch.Generator):
        super().__init__()
        self.resblock = ResBlock(in_ch, out_ch, temb_dim)
        self.attn = AttentionStack(cfg, out_ch, gen) if with_attn else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        x = self.resblock(x, temb)
        if self.attn is not None:
            f = x.permute(0, 2, 3, 1)
            f = self.attn(f, text)
            x = f.permute(0, 3, 1, 2)
        return x


class ToyUNet(nn.Module):
    """Encoder-decoder noise predictor over the (F+1)-slot latent.

    Spatial convs fold the slot axis into the batch; attention stacks see the
    channels-last (F+1, h, w, c) feature map. The generated slots use the
    embedding of t, the reference slot its own effective timestep (0 at
    inference, t′ during training).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            base = config.channels[0]
            temb_dim = base * 4
            self.temb_dim = temb_dim
            self.time_embed = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
            self.conv_in = nn.Conv2d(config.in_channels, base, 3, padding=1)
            levels = len(config.channels)
            self.down = nn.ModuleList()
            self.downsample = nn.ModuleList()
            prev = base
            for i, ch in enumerate(config.channels):
                self.down.append(LevelBlock(config, prev, ch, temb_dim, i in config.attention_levels, gen))
                prev = ch
                if i < levels - 1:
                    self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            self.middle = LevelBlock(config, prev, prev, temb_dim, False, gen)
            self.up = nn.ModuleList()
            self.upsample = nn.ModuleList()
            for i in reversed(range(levels)):
                ch = config.channels[i]
                self.up.append(LevelBlock(config, prev + ch, ch, temb_dim, i in config.attention_levels, gen))
                prev = ch
                if i > 0:
                    self.upsample.append(nn.Conv2d(config.channels[i], config.channels[i - 1], 3, padding=1))
                    prev = config.channels[i - 1]
            self.out_norm = nn.GroupNorm(_num_groups(prev), prev)
            self.conv_out = nn.Conv2d(prev, config.in_channels, 3, padding=1)
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
            self.null_ref = nn.Parameter(
                torch.zeros(1, config.latent_size, config.latent_size, config.in_channels)
            )

    def _check_finite(self, x: torch.Tensor, stage: str) -> None:
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite activations after {stage}")

    def forward(
        self,
        z_prime: torch.Tensor,
        t: int,
        t_ref: int,
        text: torch.Tensor | None,
    ) -> torch.Tensor:
        if z_prime.dim() != 4 or z_prime.shape[0] < 2:
            raise ValueError(f"input must be ((F+1), H, W, C) with F >= 1, got {tuple(z_prime.shape)}")
        if z_prime.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {z_prime.shape[-1]}")
        self._check_finite(z_prime, "input")
        dtype = z_prime.dtype
        if text is None:
            text = torch.zeros(1, self.config.text_embed_dim, dtype=dtype)
        num_frames = z_prime.shape[0] - 1
        t_vec = torch.tensor([float(t)] * num_frames + [float(t_ref)], dtype=dtype)
        temb = self.time_embed(timestep_embedding(t_vec, self.config.channels[0]))
        x = z_prime.permute(0, 3, 1, 2)
        x = self.conv_in(x)
        skips = []
        levels = len(self.config.channels)
        for i in range(levels):
            x = self.down[i](x, temb, text)
            self._check_finite(x, f"encoder level {i}")
            skips.append(x)
            if i < levels - 1:
                x = self.downsample[i](x)
        x = self.middle(x, temb, text)
        self._check_finite(x, "middle")
        for j, i in enumerate(reversed(range(levels))):
            x = torch.cat([x, skips[i]], dim=1)
            x = self.up[j](x, temb, text)
            self._check_finite(x, f"decoder level {i}")
            if i > 0:
                x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
                x = self.upsample[j](x)
        x = self.conv_out(torch.nn.functional.silu(self.out_norm(x)))
        self._check_finite(x, "output head")
        return x.permute(0, 2, 3, 1)

    def predictor(self):
        """Adapter matching the sampler's predictor signature. None conditions
        map to the learned null reference and the zero text embedding; the
        reference slot's timestep embedding is 0 at inference."""

        def predict(z_frames: torch.Tensor, ref, text, t: int) -> torch.Tensor:
            ref_data = ref.data if ref is not None else self.null_ref.to(z_frames.dtype)
            z_prime = torch.cat([z_frames, ref_data], dim=0)
            return self(z_prime, t, 0, text)

        return predict


# ---------------------------------------------------------------------------
# Named parameter partitioning
# ---------------------------------------------------------------------------

TRAINABLE_TAG = "trainable"
FROZEN_TAG = "frozen"

# Every parameter name must match exactly one of these groups; unknown names
# are a hard error so a new submodule cannot silently join full-model training.
_GROUP_PATTERNS: tuple[tuple[str, str], ...] = (
    ("spatial_self_attn", "spatial_self_attn"),
    ("motion", "motion"),
    ("cross_attn", "cross_attn"),
    ("null_ref", "null_ref"),
    ("resblock", "backbone"),
    ("time_embed", "backbone"),
    ("conv_in", "backbone"),
    ("conv_out", "backbone"),
    ("out_norm", "backbone"),
    ("downsample", "backbone"),
    ("upsample", "backbone"),
)


def parameter_group(name: str) -> str:
    for token, group in _GROUP_PATTERNS:
        if token in name:
            return group
    raise ValueError(f"parameter {name!r} matches no known group")


@dataclass
class NamedParameterSet:
    """Flat name -> tensor map with a trainable/frozen tag per entry."""

    arrays: dict[str, torch.Tensor]
    tags: dict[str, str]

    def __post_init__(self):
        if set(self.arrays) != set(self.tags):
            raise ValueError("tags must cover exactly the named parameters")

    @classmethod
    def from_module(cls, module: nn.Module) -> "NamedParameterSet":
        arrays = dict(module.named_parameters())
        return cls(arrays=arrays, tags={n: FROZEN_TAG for n in arrays})

    @property
    def trainable_names(self) -> list[str]:
        return sorted(n for n, tag in self.tags.items() if tag == TRAINABLE_TAG)


def select_trainable(params: NamedParameterSet, update_motion: bool) -> NamedParameterSet:
    """Mark the spatial self-attention parameters (and the null-reference
    latent) trainable, plus the temporal/motion blocks when requested;
    everything else stays frozen."""
    tags = {}
    for name in params.arrays:
        group = parameter_group(name)
        if group == "spatial_self_attn" or group == "null_ref":
            tags[name] = TRAINABLE_TAG
        elif group == "motion" and update_motion:
            tags[name] = TRAINABLE_TAG
        else:
            tags[name] = FROZEN_TAG
    return NamedParameterSet(arrays=dict(params.arrays), tags=tags)


def apply_trainable(module: nn.Module, params: NamedParameterSet) -> list[torch.Tensor]:
    """Set requires_grad per the tag map; returns the trainable tensors in
    sorted-name order (the order the optimizer sees)."""
    trainable = []
    for name, p in module.named_parameters():
        p.requires_grad_(params.tags[name] == TRAINABLE_TAG)
    for name in params.trainable_names:
        trainable.append(params.arrays[name])
    return trainable
