"""Discrete-time variance-preserving diffusion math.

Forward process: z_t = λ_t z_0 + σ_t ε with σ_t = sqrt(1 − λ_t²), so
λ_t² + σ_t² = 1 for every timestep. The same form provides the light
"remind" noise applied to the reference latent during training, at the
scaled-down timestep t′ = round(α·t).

Sampling is deterministic DDIM (η = 0) by default, run over the
(F+1)-slot input: the noise-free reference latent is re-fed at every step
and its slot of the prediction is discarded from the update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal coefficients λ_0..λ_T for a T-step discrete schedule."""

    num_steps: int
    lambdas: np.ndarray  # shape (T+1,), λ_0 = 1, strictly decreasing

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        object.__setattr__(self, "lambdas", lam)
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if lam.shape != (self.num_steps + 1,):
            raise ValueError(f"lambdas must have length T+1={self.num_steps + 1}")
        if lam[0] != 1.0:
            raise ValueError("lambda_0 must be exactly 1")
        if not np.all(np.diff(lam) < 0):
            raise ValueError("lambdas must be strictly decreasing")
        if lam[-1] <= 0:
            raise ValueError("lambda_T must be positive")

    @property
    def sigmas(self) -> np.ndarray:
        """Noise coefficients σ_t = sqrt(1 − λ_t²)."""
        return np.sqrt(1.0 - self.lambdas**2)

    def lam(self, t: int) -> float:
        return float(self.lambdas[t])

    def sigma(self, t: int) -> float:
        return float(math.sqrt(max(0.0, 1.0 - self.lambdas[t] ** 2)))


def make_noise_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-β schedule: λ_t = sqrt(∏_{s<=t} (1 − β_s))."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    lambdas = np.concatenate([[1.0], np.sqrt(np.cumprod(1.0 - betas))])
    return NoiseSchedule(num_steps=num_steps, lambdas=lambdas)


@dataclass
class LatentVideo:
    """F-frame latent tensor of shape (F, H, W, C)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"latent video must be (F, H, W, C), got shape {tuple(self.data.shape)}")
        if self.data.shape[0] < 1 or min(self.data.shape) < 1:
            raise ValueError("all latent dims must be positive")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent video contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class ReferenceLatent:
    """Single-slot reference latent (1, H, W, C). `noised` is set only when
    remind noise has been applied during training."""

    data: torch.Tensor
    noised: bool = False

    def __post_init__(self):
        if self.data.dim() != 4 or self.data.shape[0] != 1:
            raise ValueError(f"reference latent must be (1, H, W, C), got shape {tuple(self.data.shape)}")


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance settings."""

    scale: float = 8.0
    condition_drop_probability: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not (0.0 <= self.condition_drop_probability <= 1.0):
            raise ValueError("condition_drop_probability must be in [0, 1]")


def forward_diffuse(z0: LatentVideo, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> LatentVideo:
    """Noise clean latents to timestep t: λ_t z_0 + σ_t ε."""
    if not (0 <= t <= schedule.num_steps):
        raise ValueError(f"t={t} out of range [0, {schedule.num_steps}]")
    if eps.shape != z0.data.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match latent shape {tuple(z0.data.shape)}")
    lam, sig = schedule.lam(t), schedule.sigma(t)
    return LatentVideo(lam * z0.data + sig * eps)


def remind_timestep(t: int, alpha: float) -> int:
    """t′ = round(α·t), round half up, as an integer schedule index."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must be in [0, 1]")
    return int(math.floor(alpha * t + 0.5))


def remind_noise(
    r: ReferenceLatent, t: int, alpha: float, schedule: NoiseSchedule, eps: torch.Tensor
) -> ReferenceLatent:
    """Lightly noise the reference latent at t′ = round(α·t).

    Returns λ_{t′} r + sqrt(1 − λ_{t′}²) ε with the `noised` flag set. With
    α = 0 (or whenever t′ = 0) the data is returned unchanged since λ_0 = 1.
    """
    tp = remind_timestep(t, alpha)
    if not (0 <= t <= schedule.num_steps):
        raise ValueError(f"t={t} out of range [0, {schedule.num_steps}]")
    if eps.shape != r.data.shape:
        raise ValueError("remind eps must match reference latent shape")
    if tp == 0:
        return ReferenceLatent(r.data, noised=True)
    lam, sig = schedule.lam(tp), schedule.sigma(tp)
    return ReferenceLatent(lam * r.data + sig * eps, noised=True)


# A predictor maps (frame latents, reference-or-None, text-or-None, t) to an
# (F+1)-slot noise prediction; None conditions stand for the learned nulls.
Predictor = Callable[[torch.Tensor, Optional[ReferenceLatent], Optional[torch.Tensor], int], torch.Tensor]


def cfg_predict(
    model: Predictor,
    z_t: torch.Tensor,
    ref: Optional[ReferenceLatent],
    text: Optional[torch.Tensor],
    t: int,
    w: float,
) -> torch.Tensor:
    """Guided prediction w·ε(z, c, r, t) + (1−w)·ε(z, t).

    At w = 1 the unconditional branch is never evaluated, so the result is
    bitwise the conditional prediction.
    """
    cond = model(z_t, ref, text, t)
    if w == 1.0:
        return cond
    uncond = model(z_t, None, None, t)
    return w * cond + (1.0 - w) * uncond


def ddim_timesteps(num_steps: int, steps: int) -> np.ndarray:
    """Strictly increasing sub-schedule 0 = τ_0 < ... < τ_steps = T."""
    taus = np.round(np.linspace(0, num_steps, steps + 1)).astype(np.int64)
    if not np.all(np.diff(taus) > 0):
        raise ValueError(f"cannot build {steps} distinct DDIM steps out of T={num_steps}")
    return taus


def ddim_sample(
    model: Predictor,
    z_init: LatentVideo,
    ref: ReferenceLatent,
    text: torch.Tensor,
    steps: int,
    guidance: GuidanceConfig,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    on_step: Callable[[int, ReferenceLatent], None] | None = None,
) -> LatentVideo:
    """DDIM over the (F+1)-slot input.

    At every step the model sees the current frame latents concatenated with
    the *noise-free* reference latent; the reference slot of the prediction is
    discarded and only the F frames are advanced.
    """
    if steps < 1 or steps > schedule.num_steps:
        raise ValueError(f"steps must be in [1, T={schedule.num_steps}], got {steps}")
    if ref.noised:
        raise ValueError("reference latent must be noise-free at inference")
    taus = ddim_timesteps(schedule.num_steps, steps)
    z = z_init.data
    for i in range(steps, 0, -1):
        t_cur, t_prev = int(taus[i]), int(taus[i - 1])
        if on_step is not None:
            on_step(t_cur, ref)
        eps_full = cfg_predict(model, z, ref, text, t_cur, guidance.scale)
        eps_hat = eps_full[: z.shape[0]]  # reference-slot output discarded
        lam_c, sig_c = schedule.lam(t_cur), schedule.sigma(t_cur)
        lam_p, sig_p = schedule.lam(t_prev), schedule.sigma(t_prev)
        z0_hat = (z - sig_c * eps_hat) / lam_c
        if eta > 0.0 and t_prev > 0:
            sigma_eta = eta * (sig_p / sig_c) * math.sqrt(max(0.0, 1.0 - (lam_c / lam_p) ** 2))
        else:
            sigma_eta = 0.0
        dir_coef = math.sqrt(max(0.0, sig_p**2 - sigma_eta**2))
        z = lam_p * z0_hat + dir_coef * eps_hat
        if sigma_eta > 0.0:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
            z = z + sigma_eta * noise
        if not torch.isfinite(z).all():
            raise FloatingPointError(f"non-finite latent during DDIM at t={t_cur} -> {t_prev}")
    return LatentVideo(z)
