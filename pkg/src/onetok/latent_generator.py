"""Attention-free MLP-Mixer generator over the one-token latent space.

Each sample becomes a 3-token sequence [latent token, class token (or the
learned null token), time token]; mixer blocks alternate an MLP across the
3-token axis with an MLP across the channel axis. No softmax, no token-token
products anywhere - the audit hook in :mod:`onetok.audit` can verify that
structurally.

Training standardizes latents per dimension; :func:`sample_latent`
de-normalizes with the same statistics.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .encoder import sinusoidal_embedding
from .flowmatch import GuidanceSpec, euler_integrate, fm_loss, interpolate, sample_time


@dataclass
class MixerConfig:
    token_dim: int = 128
    hidden_dim: int = 256
    depth: int = 8
    token_mlp_expansion: int = 2
    channel_mlp_expansion: int = 4
    num_classes: int = 10
    class_embed_dim: int = 64
    p_drop: float = 0.1
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must be in [0, 1], got {self.p_drop}")

    @property
    def null_class(self) -> int:
        """Embedding-table index of the learned null condition."""
        return self.num_classes


@dataclass(frozen=True)
class ConditionToken:
    """Optional class condition; ``class_id is None`` means unconditional."""

    class_id: Optional[int]


@dataclass
class LatentStats:
    """Per-dimension standardization statistics of the cached latents."""

    mean: Tensor
    std: Tensor

    def normalize(self, z: Tensor) -> Tensor:
        return (z - self.mean) / self.std

    def denormalize(self, z: Tensor) -> Tensor:
        return z * self.std + self.mean


class MixerBlock(nn.Module):
    def __init__(self, num_tokens: int, hidden: int, token_exp: int, channel_exp: int):
        super().__init__()
        self.token_norm = nn.LayerNorm(hidden)
        self.token_mlp = nn.Sequential(
            nn.Linear(num_tokens, num_tokens * token_exp),
            nn.GELU(),
            nn.Linear(num_tokens * token_exp, num_tokens),
        )
        self.channel_norm = nn.LayerNorm(hidden)
        self.channel_mlp = nn.Sequential(
            nn.Linear(hidden, hidden * channel_exp),
            nn.GELU(),
            nn.Linear(hidden * channel_exp, hidden),
        )

    def forward(self, x: Tensor) -> Tensor:
        y = self.token_norm(x).transpose(1, 2)
        x = x + self.token_mlp(y).transpose(1, 2)
        x = x + self.channel_mlp(self.channel_norm(x))
        return x


class LatentMixer(nn.Module):
    """Velocity field v(z_t, t, class) in latent space R^D."""

    NUM_TOKENS = 3

    def __init__(self, cfg: MixerConfig):
        super().__init__()
        self.cfg = cfg
        self.z_in = nn.Linear(cfg.token_dim, cfg.hidden_dim)
        self.class_embed = nn.Embedding(cfg.num_classes + 1, cfg.class_embed_dim)
        self.class_proj = nn.Linear(cfg.class_embed_dim, cfg.hidden_dim)
        self.time_proj = nn.Linear(cfg.time_embed_dim, cfg.hidden_dim)
        self.blocks = nn.ModuleList(
            MixerBlock(self.NUM_TOKENS, cfg.hidden_dim, cfg.token_mlp_expansion, cfg.channel_mlp_expansion)
            for _ in range(cfg.depth)
        )
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, cfg.token_dim)

    def forward(self, z_t: Tensor, t: float, class_ids: Tensor) -> Tensor:
        return self.velocity(z_t, t, class_ids)

    def velocity(self, z_t: Tensor, t: float, class_ids: Tensor) -> Tensor:
        b, d = z_t.shape
        if class_ids.shape != (b,):
            raise ValueError(f"class_ids shape {tuple(class_ids.shape)} != ({b},)")
        if bool((class_ids < 0).any()) or bool((class_ids > self.cfg.num_classes).any()):
            raise ValueError(f"class id out of range [0, {self.cfg.num_classes}]")
        zt = self.z_in(z_t)
        ct = self.class_proj(self.class_embed(class_ids))
        temb = sinusoidal_embedding(t, self.cfg.time_embed_dim, dtype=z_t.dtype).to(z_t.device)
        tt = self.time_proj(temb).unsqueeze(0).expand(b, -1)
        x = torch.stack([zt, ct, tt], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return self.out(x[:, 0])


def condition_ids(conds: Sequence[ConditionToken], num_classes: int) -> Tensor:
    """Pack condition tokens into an id tensor; null maps to the dedicated
    learned embedding index, never a zero vector."""
    ids = []
    for c in conds:
        if c.class_id is None:
            ids.append(num_classes)
        elif 0 <= c.class_id < num_classes:
            ids.append(c.class_id)
        else:
            raise ValueError(f"class_id {c.class_id} out of range [0, {num_classes})")
    return torch.tensor(ids, dtype=torch.long)


def mixer_velocity(mixer: LatentMixer, z_t: Tensor, t: float, cond: Sequence[ConditionToken]) -> Tensor:
    return mixer.velocity(z_t, t, condition_ids(cond, mixer.cfg.num_classes))


def drop_condition(cond: ConditionToken, p_drop: float, rng: torch.Generator) -> ConditionToken:
    """With probability p_drop replace the condition by the null token."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    if torch.rand((), generator=rng).item() < p_drop:
        return ConditionToken(class_id=None)
    return cond


def _drop_ids(class_ids: Tensor, p_drop: float, null_class: int, rng: torch.Generator) -> Tensor:
    drop = torch.rand(class_ids.shape, generator=rng) < p_drop
    return torch.where(drop, torch.full_like(class_ids, null_class), class_ids)


def stage_b_loss(
    mixer: LatentMixer,
    z_batch: Tensor,
    class_ids: Tensor,
    rng: torch.Generator,
    p_drop: Optional[float] = None,
) -> Tensor:
    """Flow-matching loss in latent space with condition dropping.

    ``z_batch`` must already be standardized; class ids equal to
    ``num_classes`` are treated as null.
    """
    if p_drop is None:
        p_drop = mixer.cfg.p_drop
    z0 = torch.randn(z_batch.shape, generator=rng, dtype=z_batch.dtype)
    t = sample_time(rng)
    sample = interpolate(z0, z_batch, t)
    ids = _drop_ids(class_ids, p_drop, mixer.cfg.null_class, rng)
    v = mixer.velocity(sample.x_t, sample.t, ids)
    return fm_loss(v, sample.u_target)


@torch.no_grad()
def sample_latent(
    mixer: LatentMixer,
    stats: LatentStats,
    class_id: Optional[int],
    nfe: int,
    cfg_scale: float,
    rng: torch.Generator,
    count: int = 1,
) -> Tensor:
    """Integrate the mixer field from Gaussian noise and de-normalize.

    Guidance uses the learned null token as the unconditional branch; at
    cfg_scale == 1 the trajectory is bit-identical to plain conditional
    integration.
    """
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    d = mixer.cfg.token_dim
    z0 = torch.randn((count, d), generator=rng)
    ids = condition_ids([ConditionToken(class_id)] * count, mixer.cfg.num_classes)
    null_ids = torch.full((count,), mixer.cfg.null_class, dtype=torch.long)
    field = lambda z, t, c: mixer.velocity(z, t, c)
    if class_id is None or cfg_scale == 1.0:
        z1 = euler_integrate(field, z0, nfe, cond=ids)
    else:
        guidance = GuidanceSpec(scale=cfg_scale, uncond_cond=null_ids)
        z1 = euler_integrate(field, z0, nfe, cond=ids, guidance=guidance)
    return stats.denormalize(z1)
