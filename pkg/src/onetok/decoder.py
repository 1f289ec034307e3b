"""Conditional flow-matching decoder: noise-to-image velocity field
conditioned on the single semantic token by plain token concatenation.

The noisy image is patchified, the token z is projected to the decoder width
and prepended as one extra token, a sinusoidal embedding of t is added to
every token, and a stack of full self-attention blocks predicts per-patch
velocities that are reassembled into image shape.
"""

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .encoder import (
    Block,
    VitEncoder,
    cosine_alignment_loss,
    patchify,
    sinusoidal_embedding,
    unpatchify,
)
from .flowmatch import euler_integrate, fm_loss, interpolate, sample_time


@dataclass
class DecoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 192
    depth: int = 6
    heads: int = 6
    time_embed_dim: int = 64
    channels: int = 1
    cond_dim: int = 128  # width of the incoming latent token

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class StageALossParts:
    fm: Tensor
    cos: Tensor
    total: Tensor


class FlowDecoder(nn.Module):
    """Velocity field v(x_t, t, z) over pixel-space images."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches, cfg.embed_dim) * 0.02)
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.embed_dim)
        self.time_proj = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.embed_dim),
            nn.GELU(),
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
        )
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, patch_dim)

    def forward(self, x_t: Tensor, t: float, z: Tensor) -> Tensor:
        return self.velocity(x_t, t, z)

    def velocity(self, x_t: Tensor, t: float, z: Tensor) -> Tensor:
        b, c, h, w = x_t.shape
        if z.shape[0] != b:
            raise ValueError(f"z has {z.shape[0]} rows for a batch of {b} images")
        if z.shape[-1] != self.cfg.cond_dim:
            raise ValueError(f"z width {z.shape[-1]} != cond_dim {self.cfg.cond_dim}")
        patches = patchify(x_t, self.cfg.patch_size)
        tokens = self.patch_embed(patches) + self.pos_embed
        cond = self.cond_proj(z).unsqueeze(1)
        x = torch.cat([cond, tokens], dim=1)
        temb = sinusoidal_embedding(t, self.cfg.time_embed_dim, dtype=x.dtype).to(x.device)
        x = x + self.time_proj(temb)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        out = self.head(x[:, 1:])  # patch-token outputs only
        return unpatchify(out, self.cfg.patch_size, c, h, w)


def decode_velocity(decoder: FlowDecoder, x_t: Tensor, t: float, z: Tensor) -> Tensor:
    return decoder.velocity(x_t, t, z)


def stage_a_loss(
    encoder: VitEncoder,
    frozen_encoder: VitEncoder,
    decoder: FlowDecoder,
    batch: Tensor,
    lam: float,
    rng: torch.Generator,
    token_index: int = 0,
) -> StageALossParts:
    """Joint reconstruction objective: flow-matching term plus the cosine
    alignment term against the frozen reference encoder.

    The frozen forward pass is skipped entirely at lam == 0, where the cosine
    part is identically zero and total == fm.
    """
    x0 = torch.randn(batch.shape, generator=rng, dtype=batch.dtype)
    t = sample_time(rng)
    sample = interpolate(x0, batch, t)
    z = encoder.encode(batch, token_index)
    v = decoder.velocity(sample.x_t, sample.t, z)
    fm = fm_loss(v, sample.u_target)
    if lam == 0.0:
        cos = torch.zeros((), dtype=fm.dtype)
    else:
        with torch.no_grad():
            z_frozen = frozen_encoder.encode(batch, token_index)
        cos = cosine_alignment_loss(z, z_frozen, lam)
    return StageALossParts(fm=fm, cos=cos, total=fm + cos)


@torch.no_grad()
def reconstruct(
    encoder: VitEncoder,
    decoder: FlowDecoder,
    images: Tensor,
    nfe: int,
    rng: torch.Generator,
    token_index: int = 0,
) -> Tensor:
    """Encode, then integrate the decoder field from fresh Gaussian noise.

    Output is clamped to [-1, 1]; clamping never happens during training.
    """
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    z = encoder.encode(images, token_index)
    x0 = torch.randn(images.shape, generator=rng, dtype=images.dtype)
    out = euler_integrate(lambda x, t, c: decoder.velocity(x, t, c), x0, nfe, cond=z)
    return out.clamp(-1.0, 1.0)
