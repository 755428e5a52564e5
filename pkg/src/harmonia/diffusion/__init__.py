"""Diffusion backend abstraction: latents, DDIM stepping, text embedding,
classifier-free guidance, and attention instrumentation."""

from .attention import (  # noqa: F401
    AttentionController,
    AttentionRecord,
    ChainController,
    RecordingController,
)
from .backend import (  # noqa: F401
    DiffusionBackend,
    DiffusionTrajectory,
    Latent,
    get_backend,
    invert,
    resample,
)
from .schedule import DdimSchedule, SamplerConfig, train_alphas_bar  # noqa: F401
from .tokens import TAGS, PromptTokens, make_prompt  # noqa: F401
from .toy import ToyBackend  # noqa: F401
