"""Toy video diffusion model with zero-shot subject customization.

The reference image latent is registered as an extra input frame, injected
through spatial self-attention, trained with an auxiliary
reference-recognition loss, and exercised end-to-end on synthetic sprite
videos with exactly checkable metrics.
"""

__version__ = "0.1.0"

from .diffusion import (
    GuidanceConfig,
    LatentVideo,
    NoiseSchedule,
    ReferenceLatent,
    cfg_predict,
    ddim_sample,
    forward_diffuse,
    make_noise_schedule,
    remind_noise,
    remind_timestep,
)
from .model import (
    AttentionParams,
    ModelConfig,
    NamedParameterSet,
    TemporalAttentionParams,
    ToyUNet,
    attention,
    cross_attention_forward,
    pisa_forward,
    plain_self_attention_forward,
    select_trainable,
    temporal_attention_forward,
)
from .data import (
    LatentCodec,
    SpriteSample,
    StructuredPrompt,
    augment_reference,
    encode_prompt,
    generate_sprite_dataset,
    subject_highlight,
)
from .training import (
    LossReport,
    RunConfig,
    TrainConfig,
    apply_condition_dropout,
    girl_loss,
    total_loss,
    train_loop,
    train_step,
    video_loss,
)
from .inference import GenerationRequest, customize
from .metrics import (
    MetricReport,
    ToyEmbedder,
    dynamic_degree,
    evaluate_run,
    subject_similarity,
    temporal_consistency,
    text_alignment,
)
