"""Image encoder producing the single pooled semantic token.

A small pre-norm ViT whose extra (non-patch) learnable tokens are stored as
individually named parameters so the trainable/frozen partition can isolate
exactly one of them. The pooled token at ``token_index`` (default 0, the
cls-style token) is the entire latent representation of an image.

Also hosts the self-supervised pretraining stand-in (a symmetric cross-view
NT-Xent contrastive loss over augmented pairs) and the cosine alignment loss
that tethers the fine-tuned token to its frozen reference.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DegenerateNumericsError

PARTITION_MODES = ("cls_only", "all", "none")


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    extra_tokens: int = 1
    channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.extra_tokens < 1:
            raise ValueError("extra_tokens must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """B x C x H x W -> B x N x (C*p*p), row-major patches, channel-major within a patch."""
    b, c, h, w = images.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by patch_size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5)  # b, gh, gw, c, p, p
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def unpatchify(patches: Tensor, patch_size: int, channels: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b, n, d = patches.shape
    gh, gw = height // patch_size, width // patch_size
    if n != gh * gw or d != channels * patch_size * patch_size:
        raise ValueError(f"patch tensor {tuple(patches.shape)} does not tile {channels}x{height}x{width}")
    x = patches.reshape(b, gh, gw, channels, patch_size, patch_size)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = torch.matmul(attn, v)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block; no dropout, no batch statistics."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class VitEncoder(nn.Module):
    """ViT over [extra tokens || patch tokens + positional embeddings]."""

    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches, cfg.embed_dim) * 0.02)
        self.extra_tokens = nn.ParameterList(
            nn.Parameter(torch.randn(cfg.embed_dim) * 0.02) for _ in range(cfg.extra_tokens)
        )
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, images: Tensor, token_index: int = 0) -> Tensor:
        return self.encode(images, token_index)

    def encode(self, images: Tensor, token_index: int = 0) -> Tensor:
        """Pooled token embeddings, B x D."""
        if not 0 <= token_index < self.cfg.extra_tokens:
            raise ValueError(
                f"token_index {token_index} out of range for {self.cfg.extra_tokens} extra tokens"
            )
        x = self.tokens(images)
        return self.final_norm(x[:, token_index])

    def tokens(self, images: Tensor) -> Tensor:
        """Pre-norm token embeddings for all positions, B x (extra+N) x D."""
        b = images.shape[0]
        patches = patchify(images, self.cfg.patch_size)
        x = self.patch_embed(patches) + self.pos_embed
        extra = torch.stack(list(self.extra_tokens)).unsqueeze(0).expand(b, -1, -1)
        x = torch.cat([extra, x], dim=1)
        for block in self.blocks:
            x = block(x)
        return x


def partition_params(encoder: VitEncoder, mode: str) -> tuple[list[str], list[str]]:
    """Set requires_grad per ``mode`` and return (trainable, frozen) name lists.

    cls_only trains exactly the extra-token embedding at index 0; ``all`` is
    the unconstrained regime; ``none`` freezes everything.
    """
    if mode not in PARTITION_MODES:
        raise ValueError(f"unknown partition mode {mode!r}; expected one of {PARTITION_MODES}")
    trainable, frozen = [], []
    for name, param in encoder.named_parameters():
        on = mode == "all" or (mode == "cls_only" and name == "extra_tokens.0")
        param.requires_grad_(on)
        (trainable if on else frozen).append(name)
    return trainable, frozen


def cosine_alignment_loss(z: Tensor, z_frozen: Tensor, lam: float) -> Tensor:
    """lambda * mean(1 - cos(z_i, z_frozen_i)) over the batch.

    ``z_frozen`` is treated as a constant: no gradient flows into it. A
    zero-norm row means a broken encoder and raises instead of being
    epsilon-stabilized.
    """
    if z.shape != z_frozen.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs z_frozen {tuple(z_frozen.shape)}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    z_frozen = z_frozen.detach()
    nz = z.norm(dim=-1)
    nf = z_frozen.norm(dim=-1)
    if (nz == 0).any() or (nf == 0).any():
        raise DegenerateNumericsError("zero-norm token row in cosine alignment loss")
    cos = ((z * z_frozen).sum(dim=-1) / (nz * nf)).clamp(-1.0, 1.0)
    return lam * (1.0 - cos).mean()


def nt_xent_loss(za: Tensor, zb: Tensor, temperature: float) -> Tensor:
    """Symmetric cross-view contrastive loss over cosine similarities.

    Rows of ``za``/``zb`` are two views of the same images; positives sit on
    the diagonal of the (B x B) cross-view similarity matrix and every other
    image in the opposite view is a negative. Averaged over both directions
    and the batch.
    """
    if za.shape != zb.shape:
        raise ValueError(f"shape mismatch: {tuple(za.shape)} vs {tuple(zb.shape)}")
    if za.shape[0] < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    a = F.normalize(za, dim=-1)
    b = F.normalize(zb, dim=-1)
    logits = a @ b.t() / temperature
    target = torch.arange(a.shape[0], device=a.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def _apply_view(images: Tensor, top: int, left: int, side: int, flip: bool, jitter: Tensor) -> Tensor:
    """One augmentation view given sampled parameters. Identity parameters
    (full-frame crop, no flip, zero jitter) return the input values unchanged."""
    b, c, h, w = images.shape
    out = images
    if not (side == h == w and top == 0 and left == 0):
        crop = out[:, :, top : top + side, left : left + side]
        out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    if flip:
        out = torch.flip(out, dims=[3])
    if bool((jitter != 0).any()):
        out = out + jitter.reshape(1, c, 1, 1)
        out = out.clamp(-1.0, 1.0)
    return out


def augment(images: Tensor, rng: torch.Generator) -> Tensor:
    """Random crop-and-resize (side scale in [0.6, 1.0]), horizontal flip
    (p=0.5), per-channel brightness jitter (+-0.2), clamped to [-1, 1]."""
    b, c, h, w = images.shape
    scale = 0.6 + 0.4 * torch.rand((), generator=rng).item()
    side = max(1, round(scale * min(h, w)))
    top = torch.randint(0, h - side + 1, (), generator=rng).item()
    left = torch.randint(0, w - side + 1, (), generator=rng).item()
    flip = torch.rand((), generator=rng).item() < 0.5
    jitter = (torch.rand(c, generator=rng) - 0.5) * 0.4
    return _apply_view(images, top, left, side, flip, jitter)


def ssl_pretrain_step(
    encoder: VitEncoder,
    optimizer: torch.optim.Optimizer,
    batch: Tensor,
    temperature: float,
    rng: torch.Generator,
    token_index: int = 0,
) -> float:
    """One contrastive pretraining step over two augmented views; updates all
    encoder parameters through ``optimizer``. Returns the scalar loss."""
    if batch.shape[0] < 2:
        raise ValueError("ssl pretraining needs batch size >= 2")
    va = augment(batch, rng)
    vb = augment(batch, rng)
    za = encoder.encode(va, token_index)
    zb = encoder.encode(vb, token_index)
    loss = nt_xent_loss(za, zb, temperature)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def sinusoidal_embedding(t: float, dim: int, dtype=torch.float32) -> Tensor:
    """Standard sin/cos embedding of a scalar time in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1)))
    angles = t * 1000.0 * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(1, dtype=dtype)])
    return emb
