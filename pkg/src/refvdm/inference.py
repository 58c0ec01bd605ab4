"""End-to-end customized generation.

The reference image is encoded noise-free, guided DDIM runs over the
(F+1)-slot input (the reference slot re-fed noise-free each step, its
prediction discarded), and the final F-frame latent is decoded back to
pixels and clamped to [0, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import CheckpointMeta, load_checkpoint
from .data import LatentCodec, StructuredPrompt, encode_prompt
from .diffusion import GuidanceConfig, LatentVideo, ReferenceLatent, ddim_sample, make_noise_schedule
from .model import ToyUNet


@dataclass
class GenerationRequest:
    reference_image: np.ndarray  # (H_px, W_px, 3) in [0, 1]
    prompt: StructuredPrompt
    seed: int = 0
    steps: int = 30
    guidance_scale: float = 8.0
    num_frames: int = 8
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")


def customize(
    request: GenerationRequest,
    checkpoint: str | Path | tuple[ToyUNet, CheckpointMeta],
    on_step: Callable[[int, ReferenceLatent], None] | None = None,
) -> np.ndarray:
    """Generate an (F, H_px, W_px, 3) pixel video of the reference subject."""
    if isinstance(checkpoint, (str, Path)):
        model, meta = load_checkpoint(checkpoint)
    else:
        model, meta = checkpoint
    model.eval()
    cfg = model.config
    codec = LatentCodec(**meta.codec)
    schedule = make_noise_schedule(**meta.schedule)

    expected_px = cfg.latent_size * codec.patch_size
    if request.reference_image.shape[:2] != (expected_px, expected_px):
        raise ValueError(
            f"reference image must be {expected_px}x{expected_px} for this checkpoint, "
            f"got {request.reference_image.shape[:2]}"
        )

    ref = ReferenceLatent(torch.from_numpy(codec.encode(request.reference_image))[None], noised=False)
    text = encode_prompt(request.prompt, cfg.text_embed_dim)
    gen = torch.Generator().manual_seed(request.seed)
    z_init = LatentVideo(
        torch.randn(request.num_frames, cfg.latent_size, cfg.latent_size, cfg.in_channels, generator=gen)
    )
    guidance = GuidanceConfig(scale=request.guidance_scale)
    with torch.no_grad():
        z0 = ddim_sample(
            model.predictor(),
            z_init,
            ref,
            text,
            steps=request.steps,
            guidance=guidance,
            schedule=schedule,
            eta=request.eta,
            generator=gen,
            on_step=on_step,
        )
    pixels = codec.decode(z0.data.numpy())
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)


def save_video_outputs(
    video: np.ndarray,
    out_dir: str | Path,
    request: GenerationRequest | None = None,
    checkpoint_path: str | Path | None = None,
    make_gif: bool = False,
) -> None:
    """Write frame_%03d.png (plus an optional GIF) and a sidecar manifest
    recording the request parameters and checkpoint hash."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames8 = (video * 255).round().astype(np.uint8)
    for i, frame in enumerate(frames8):
        Image.fromarray(frame).save(out / f"frame_{i:03d}.png")
    if make_gif:
        imgs = [Image.fromarray(f) for f in frames8]
        imgs[0].save(out / "video.gif", save_all=True, append_images=imgs[1:], duration=125, loop=0)
    if request is not None:
        sidecar = {
            "prompt": request.prompt.to_dict(),
            "seed": request.seed,
            "steps": request.steps,
            "guidance_scale": request.guidance_scale,
            "num_frames": request.num_frames,
            "eta": request.eta,
        }
        if checkpoint_path is not None:
            sidecar["checkpoint_sha256"] = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()
        (out / "request.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
