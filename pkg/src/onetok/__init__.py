"""Single-token generative pipeline: a mostly-frozen ViT encoder whose pooled
token is fine-tuned jointly with a flow-matching decoder, plus an
attention-free MLP-Mixer generator over the resulting one-token latent space.
"""

from .flowmatch import (
    GuidanceSpec,
    InterpolantSample,
    cfg_velocity,
    euler_integrate,
    fm_loss,
    interpolate,
    sample_time,
)
from .encoder import (
    VitConfig,
    VitEncoder,
    augment,
    cosine_alignment_loss,
    nt_xent_loss,
    partition_params,
    patchify,
    ssl_pretrain_step,
    unpatchify,
)
from .decoder import DecoderConfig, FlowDecoder, StageALossParts, decode_velocity, reconstruct, stage_a_loss
from .latent_generator import (
    ConditionToken,
    LatentMixer,
    LatentStats,
    MixerConfig,
    drop_condition,
    mixer_velocity,
    sample_latent,
    stage_b_loss,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, format_config, parse_config, parse_config_text
from .data import DatasetSpec, emit_image_grid, ingest_cifar10_bin, ingest_mnist_idx, load_dataset
from .metrics import (
    GaussianStats,
    MetricRow,
    frechet_distance,
    gaussian_stats,
    matrix_sqrt_psd,
    psnr,
    ssim,
    write_metrics_csv,
)
from .errors import ConfigError, DataFormatError, DegenerateNumericsError, IntegrationError

__version__ = "0.1.0"
