"""Synthetic sprite-video data: generation, subject-highlight preprocessing,
reference augmentation, the toy prompt encoder, and the invertible latent
codec.

Each sample is a textured sprite translating at constant velocity over a
solid background with wraparound. Because the renderer knows the ground
truth (mask, colors, motion), the structured prompt is a faithful
description by construction and downstream metrics can be checked exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .tensorfile import save_tensors, load_tensors

SHAPES = ("circle", "square", "triangle", "star")
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}

PROMPT_FIELDS = ("subject_shape", "subject_color", "subject_texture_seed", "background_color", "motion_direction")


@dataclass(frozen=True)
class StructuredPrompt:
    subject_shape: str
    subject_color: tuple[float, float, float]
    subject_texture_seed: int
    background_color: tuple[float, float, float]
    motion_direction: str
    rendered_text: str = ""

    def __post_init__(self):
        if self.subject_shape not in SHAPES:
            raise ValueError(f"unknown shape {self.subject_shape!r}")
        if self.motion_direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.motion_direction!r}")
        object.__setattr__(self, "subject_color", tuple(float(v) for v in self.subject_color))
        object.__setattr__(self, "background_color", tuple(float(v) for v in self.background_color))
        object.__setattr__(self, "rendered_text", self._render())

    def _render(self) -> str:
        sc = ",".join(f"{v:.3f}" for v in self.subject_color)
        bc = ",".join(f"{v:.3f}" for v in self.background_color)
        return (
            f"a {self.subject_shape} sprite colored ({sc}) with texture #{self.subject_texture_seed} "
            f"moving {self.motion_direction} over a ({bc}) background"
        )

    def to_dict(self) -> dict:
        return {
            "subject_shape": self.subject_shape,
            "subject_color": list(self.subject_color),
            "subject_texture_seed": self.subject_texture_seed,
            "background_color": list(self.background_color),
            "motion_direction": self.motion_direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredPrompt":
        return cls(
            subject_shape=d["subject_shape"],
            subject_color=tuple(d["subject_color"]),
            subject_texture_seed=int(d["subject_texture_seed"]),
            background_color=tuple(d["background_color"]),
            motion_direction=d["motion_direction"],
        )


@dataclass
class MotionSpec:
    direction: str
    speed: int  # pixels per frame


@dataclass
class SpriteSample:
    video: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    subject_mask: np.ndarray  # (H, W) bool, canonical (first) frame
    reference_image: np.ndarray  # (H, W, 3) float32
    prompt: StructuredPrompt
    motion: MotionSpec


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, size: float, h: int, w: int, cy: float, cx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= size**2
    if shape == "square":
        return (np.abs(dy) <= size) & (np.abs(dx) <= size)
    if shape == "triangle":
        # upward triangle: base at cy+size, apex at cy-size
        return (dy <= size) & (np.abs(dx) <= (dy + size) / 2.0)
    if shape == "star":
        theta = np.arctan2(dy, dx)
        r = np.sqrt(dy**2 + dx**2)
        radius = size * (0.45 + 0.55 * (np.cos(5 * theta) + 1.0) / 2.0)
        return r <= radius
    raise ValueError(f"unknown shape {shape!r}")


def _fit_sprite_mask(shape: str, rng: np.random.Generator, h: int, w: int, cy: float, cx: float) -> np.ndarray:
    """Draw a size and nudge it until the sprite covers 4%-25% of the frame."""
    lo, hi = 0.04 * h * w, 0.25 * h * w
    size = rng.uniform(0.14, 0.24) * min(h, w)
    for _ in range(50):
        mask = _shape_mask(shape, size, h, w, cy, cx)
        area = int(mask.sum())
        if area < lo:
            size *= 1.15
        elif area > hi:
            size *= 0.9
        else:
            return mask
    raise RuntimeError(f"could not fit sprite area into [4%, 25%] for shape {shape}")


def _texture(rng_seed: int, base_color: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-seed fine-grained color modulation inside the sprite mask."""
    rng = np.random.default_rng(rng_seed)
    noise = rng.uniform(-1.0, 1.0, size=mask.shape + (3,))
    tex = base_color[None, None, :] * (1.0 + 0.35 * noise)
    return np.clip(tex, 0.0, 1.0)


def subject_highlight(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Whiten everything outside the subject mask."""
    if mask.shape != frame.shape[:2]:
        raise ValueError("mask must align with the frame")
    out = np.ones_like(frame)
    out[mask] = frame[mask]
    return out


def generate_sprite_sample(
    index: int,
    seed: int,
    num_frames: int = 8,
    height: int = 32,
    width: int = 32,
    apply_subject_highlight: bool = True,
    reference_frame: str = "first",
) -> SpriteSample:
    """Render one deterministic sprite clip. `reference_frame` is "first" or
    "random" (which frame the reference image is cut from)."""
    rng = np.random.default_rng([seed, index])
    shape = SHAPES[rng.integers(len(SHAPES))]
    bg = rng.uniform(0.0, 0.85, size=3)
    while True:
        color = rng.uniform(0.05, 0.95, size=3)
        if np.abs(color - bg).max() > 0.3:
            break
    texture_seed = int(rng.integers(0, 2**31 - 1))
    direction = list(DIRECTIONS)[rng.integers(4)]
    speed = int(rng.integers(1, 4))

    cy, cx = height / 2.0 - 0.5, width / 2.0 - 0.5
    mask0 = _fit_sprite_mask(shape, rng, height, width, cy, cx)
    tex = _texture(texture_seed, color, mask0)
    frame0 = np.empty((height, width, 3), dtype=np.float32)
    frame0[:] = bg
    frame0[mask0] = tex[mask0]

    dy, dx = DIRECTIONS[direction]
    video = np.empty((num_frames, height, width, 3), dtype=np.float32)
    for i in range(num_frames):
        video[i] = np.roll(frame0, (dy * speed * i, dx * speed * i), axis=(0, 1))

    if reference_frame == "random":
        ref_idx = int(rng.integers(num_frames))
    elif reference_frame == "first":
        ref_idx = 0
    else:
        raise ValueError(f"unknown reference_frame mode {reference_frame!r}")
    ref_mask = np.roll(mask0, (dy * speed * ref_idx, dx * speed * ref_idx), axis=(0, 1))
    ref = video[ref_idx].copy()
    if apply_subject_highlight:
        ref = subject_highlight(ref, ref_mask)

    prompt = StructuredPrompt(
        subject_shape=shape,
        subject_color=tuple(color),
        subject_texture_seed=texture_seed,
        background_color=tuple(bg),
        motion_direction=direction,
    )
    return SpriteSample(
        video=video,
        subject_mask=mask0,
        reference_image=ref.astype(np.float32),
        prompt=prompt,
        motion=MotionSpec(direction=direction, speed=speed),
    )


def generate_sprite_dataset(
    n: int,
    num_frames: int = 8,
    height: int = 32,
    width: int = 32,
    seed: int = 0,
    apply_subject_highlight: bool = True,
    reference_frame: str = "first",
    patch_size: int = 2,
) -> list[SpriteSample]:
    if height % patch_size or width % patch_size:
        raise ValueError(f"frame dims must be divisible by codec patch size {patch_size}")
    return [
        generate_sprite_sample(i, seed, num_frames, height, width, apply_subject_highlight, reference_frame)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Reference augmentation
# ---------------------------------------------------------------------------


def augment_reference(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5) plus a small affine: rotation <= 10 degrees,
    translation <= 5%, scale in [0.95, 1.05], white fill. Identity draws
    return the input unchanged."""
    from scipy import ndimage

    out = image
    if rng.uniform() < 0.5:
        out = out[:, ::-1].copy()
    angle = rng.uniform(-10.0, 10.0)
    ty = rng.uniform(-0.05, 0.05) * image.shape[0]
    tx = rng.uniform(-0.05, 0.05) * image.shape[1]
    scale = rng.uniform(0.95, 1.05)
    if angle == 0.0 and ty == 0.0 and tx == 0.0 and scale == 1.0:
        return out
    h, w = image.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = np.deg2rad(angle)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]) / scale
    offset = center - rot @ (center + np.array([ty, tx]))
    warped = np.empty_like(out)
    for ch in range(3):
        # inverse mapping: output pixel looked up at rot @ in + offset
        warped[..., ch] = ndimage.affine_transform(
            out[..., ch], rot, offset=offset, order=1, mode="constant", cval=1.0
        )
    return np.clip(warped, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Toy prompt encoder
# ---------------------------------------------------------------------------


def _field_token(name: str, value, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{name}={value!r}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def encode_prompt(prompt: StructuredPrompt, dim: int = 16) -> torch.Tensor:
    """Deterministic embedding: one unit-norm hash token per prompt field."""
    vals = {
        "subject_shape": prompt.subject_shape,
        "subject_color": prompt.subject_color,
        "subject_texture_seed": prompt.subject_texture_seed,
        "background_color": prompt.background_color,
        "motion_direction": prompt.motion_direction,
    }
    tokens = np.stack([_field_token(name, vals[name], dim) for name in PROMPT_FIELDS])
    return torch.from_numpy(tokens.astype(np.float32))


# ---------------------------------------------------------------------------
# Latent codec
# ---------------------------------------------------------------------------


class LatentCodec:
    """Invertible pixel <-> latent map: space-to-depth patching followed by a
    fixed orthonormal channel mix. decode(encode(x)) == x up to float
    rounding, and the map preserves L2 norm."""

    def __init__(self, patch_size: int = 2, seed: int = 0xC0DEC):
        self.patch_size = patch_size
        d = patch_size * patch_size * 3
        self.latent_channels = d
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        # fix column signs so the factorization is unique and deterministic
        self.mix = q * np.sign(np.diag(r))[None, :]

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        p = self.patch_size
        h, w = pixels.shape[-3], pixels.shape[-2]
        if h % p or w % p:
            raise ValueError(f"pixel dims ({h}, {w}) not divisible by patch size {p}")
        lead = pixels.shape[:-3]
        x = pixels.reshape(lead + (h // p, p, w // p, p, 3))
        x = np.moveaxis(x, -4, -3)  # (..., h/p, w/p, p, p, 3)
        x = x.reshape(lead + (h // p, w // p, p * p * 3))
        return (x.astype(np.float64) @ self.mix).astype(np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        p = self.patch_size
        if latent.shape[-1] != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {latent.shape[-1]}")
        lead = latent.shape[:-3]
        hh, ww = latent.shape[-3], latent.shape[-2]
        x = latent.astype(np.float64) @ self.mix.T
        x = x.reshape(lead + (hh, ww, p, p, 3))
        x = np.moveaxis(x, -3, -4)  # (..., h/p, p, w/p, p, 3)
        return x.reshape(lead + (hh * p, ww * p, 3)).astype(np.float32)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

DATASET_SCHEMA_VERSION = 1


def save_dataset(out_dir: str | Path, samples: list[SpriteSample], meta: dict | None = None) -> None:
    """Write one tensor container per sample plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(samples):
        name = f"sample_{i:04d}.ntc"
        save_tensors(
            out / name,
            {"video": s.video, "subject_mask": s.subject_mask.astype(np.uint8), "reference_image": s.reference_image},
            meta={
                "prompt": s.prompt.to_dict(),
                "motion": {"direction": s.motion.direction, "speed": s.motion.speed},
            },
        )
        names.append(name)
    manifest = {"schema_version": DATASET_SCHEMA_VERSION, "num_samples": len(samples), "samples": names}
    if meta:
        manifest["generator"] = meta
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(dir_path: str | Path) -> list[SpriteSample]:
    d = Path(dir_path)
    manifest = json.loads((d / "dataset.json").read_text())
    if manifest["schema_version"] != DATASET_SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema version {manifest['schema_version']}")
    samples = []
    for name in manifest["samples"]:
        tensors, meta = load_tensors(d / name)
        samples.append(
            SpriteSample(
                video=tensors["video"],
                subject_mask=tensors["subject_mask"].astype(bool),
                reference_image=tensors["reference_image"],
                prompt=StructuredPrompt.from_dict(meta["prompt"]),
                motion=MotionSpec(direction=meta["motion"]["direction"], speed=int(meta["motion"]["speed"])),
            )
        )
    return samples


def export_sample_pngs(sample: SpriteSample, out_dir: str | Path) -> None:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(sample.video):
        Image.fromarray((frame * 255).round().astype(np.uint8)).save(out / f"frame_{i:03d}.png")
    Image.fromarray((sample.reference_image * 255).round().astype(np.uint8)).save(out / "reference.png")
