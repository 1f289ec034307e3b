"""Orchestration of the three training phases and inference.

Phase order: contrastive pretraining of the encoder, then joint fine-tuning
of the pooled token with the flow-matching decoder (stage A), then the
latent-space mixer over cached encoder outputs (stage B). Inference samples
a latent with the mixer and decodes it from fresh noise.

Determinism contract: a run is fully determined by (seed, config, dataset).
The master seed feeds model init (global torch seed) plus three offset
streams: +1 for data order, +2 for training-time noise/augmentation, +3 for
evaluation probes, so adding or removing evaluations never perturbs the
training trajectory.
"""

import copy
from dataclasses import dataclass

import torch
from torch import Tensor

from .checkpoint import Checkpoint, split_prefix
from .config import RunConfig, format_config, parse_config_text
from .decoder import DecoderConfig, FlowDecoder, reconstruct, stage_a_loss
from .encoder import VitEncoder, partition_params, ssl_pretrain_step
from .errors import ConfigError, DegenerateNumericsError
from .flowmatch import euler_integrate
from .latent_generator import LatentMixer, LatentStats, MixerConfig, sample_latent, stage_b_loss
from .metrics import MetricRow, gaussian_stats, frechet_distance, psnr, reconstruction_metrics

DATA_STREAM, TRAIN_STREAM, EVAL_STREAM = 1, 2, 3
PROBE_SIZE = 64
ENCODE_BATCH = 256


def lr_at_step(step: int, base: float, warmup: int) -> float:
    """Linear warmup then constant; ``step`` is the 1-based optimizer step."""
    if warmup > 0 and step < warmup:
        return base * step / warmup
    return base


def build_encoder(cfg: RunConfig) -> VitEncoder:
    return VitEncoder(cfg.encoder)


def build_decoder(cfg: RunConfig) -> FlowDecoder:
    dec = DecoderConfig(
        image_size=cfg.encoder.image_size,
        patch_size=cfg.decoder.patch_size,
        embed_dim=cfg.decoder.embed_dim,
        depth=cfg.decoder.depth,
        heads=cfg.decoder.heads,
        time_embed_dim=cfg.decoder.time_embed_dim,
        channels=cfg.encoder.channels,
        cond_dim=cfg.encoder.embed_dim,
    )
    return FlowDecoder(dec)


def build_mixer(cfg: RunConfig, token_dim: int) -> LatentMixer:
    mix = MixerConfig(
        token_dim=token_dim,
        hidden_dim=cfg.mixer.hidden_dim,
        depth=cfg.mixer.depth,
        token_mlp_expansion=cfg.mixer.token_mlp_expansion,
        channel_mlp_expansion=cfg.mixer.channel_mlp_expansion,
        num_classes=cfg.data.num_classes,
        class_embed_dim=cfg.mixer.class_embed_dim,
        p_drop=cfg.mixer.p_drop,
        time_embed_dim=cfg.mixer.time_embed_dim,
    )
    return LatentMixer(mix)


def model_state(module: torch.nn.Module) -> dict:
    return {name: param.detach().clone() for name, param in module.named_parameters()}


def load_state(module: torch.nn.Module, tensors: dict) -> None:
    own = dict(module.named_parameters())
    if set(own) != set(tensors):
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    with torch.no_grad():
        for name, param in own.items():
            if param.shape != tensors[name].shape:
                raise ValueError(
                    f"shape mismatch for {name}: {tuple(param.shape)} vs {tuple(tensors[name].shape)}"
                )
            param.copy_(tensors[name])


def ema_update(shadow: dict, live: dict, decay: float) -> dict:
    """shadow <- decay*shadow + (1-decay)*live, element-wise over named tensors."""
    if set(shadow) != set(live):
        raise ValueError("shadow and live stores must hold the same names")
    out = {}
    for name, s in shadow.items():
        l = live[name]
        if s.shape != l.shape:
            raise ValueError(f"shape mismatch for {name}")
        out[name] = decay * s + (1.0 - decay) * l.detach()
    return out


def _batches(n: int, batch_size: int, steps: int, g: torch.Generator):
    """Deterministic epoch-reshuffled full batches."""
    bs = min(batch_size, n)
    perm = torch.randperm(n, generator=g)
    pos = 0
    for _ in range(steps):
        if pos + bs > n:
            perm = torch.randperm(n, generator=g)
            pos = 0
        yield perm[pos : pos + bs]
        pos += bs


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _live_tensors(named: dict) -> dict:
    return {k: v.detach() for k, v in named.items()}


def pretrain_ssl(cfg: RunConfig, train_images: Tensor) -> tuple[Checkpoint, list]:
    """Contrastive pretraining of the full encoder; returns checkpoint + metric rows."""
    run = cfg.run
    torch.manual_seed(run.seed)
    encoder = build_encoder(cfg)
    opt = torch.optim.AdamW(
        encoder.parameters(), lr=run.lr, betas=(0.9, 0.999), weight_decay=run.weight_decay
    )
    g_data = torch.Generator().manual_seed(run.seed + DATA_STREAM)
    g_train = torch.Generator().manual_seed(run.seed + TRAIN_STREAM)
    rows: list[MetricRow] = []
    running, since = 0.0, 0
    for step, idx in enumerate(_batches(len(train_images), run.batch_size, run.steps, g_data), start=1):
        _set_lr(opt, lr_at_step(step, run.lr, run.warmup_steps))
        loss = ssl_pretrain_step(
            encoder, opt, train_images[idx], run.ssl_temperature, g_train, run.token_index
        )
        running += loss
        since += 1
        if step % run.eval_every == 0 or step == run.steps:
            rows.append(MetricRow(step, "ssl_loss", running / since, "train"))
            running, since = 0.0, 0
    tensors = {f"encoder.{k}": v for k, v in model_state(encoder).items()}
    ckpt = Checkpoint(phase="ssl", step=run.steps, tensors=tensors, config_text=format_config(cfg))
    return ckpt, rows


def train_stage_a(
    cfg: RunConfig,
    train_images: Tensor,
    heldout_images: Tensor,
    init_encoder: dict,
) -> tuple[Checkpoint, list]:
    """Joint pooled-token + decoder training against the frozen reference.

    ``init_encoder`` holds the supplied pretrained (or random-init) encoder
    tensors; the frozen reference is snapshotted from it before any update.
    """
    if not init_encoder:
        raise ConfigError("stage A requires an encoder checkpoint (pretrain-ssl output)")
    run = cfg.run
    torch.manual_seed(run.seed)
    encoder = build_encoder(cfg)
    load_state(encoder, init_encoder)
    frozen = copy.deepcopy(encoder)
    frozen.requires_grad_(False)
    decoder = build_decoder(cfg)
    partition_params(encoder, run.partition)
    params = [p for p in encoder.parameters() if p.requires_grad] + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=run.lr, betas=(0.9, 0.999), weight_decay=run.weight_decay)

    def live() -> dict:
        named = {}
        for n, p in encoder.named_parameters():
            if p.requires_grad:
                named[f"encoder.{n}"] = p
        for n, p in decoder.named_parameters():
            named[f"decoder.{n}"] = p
        return _live_tensors(named)

    ema = None
    if run.ema_decay is not None:
        ema = {k: v.clone() for k, v in live().items()}

    g_data = torch.Generator().manual_seed(run.seed + DATA_STREAM)
    g_train = torch.Generator().manual_seed(run.seed + TRAIN_STREAM)
    probe = heldout_images[: min(PROBE_SIZE, len(heldout_images))]
    rows: list[MetricRow] = []
    sums = {"fm": 0.0, "cos": 0.0, "total": 0.0}
    since = 0
    for step, idx in enumerate(_batches(len(train_images), run.batch_size, run.steps, g_data), start=1):
        _set_lr(opt, lr_at_step(step, run.lr, run.warmup_steps))
        parts = stage_a_loss(
            encoder, frozen, decoder, train_images[idx], run.lambda_, g_train, run.token_index
        )
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        opt.step()
        if ema is not None:
            ema = ema_update(ema, live(), run.ema_decay)
        sums["fm"] += parts.fm.item()
        sums["cos"] += parts.cos.item()
        sums["total"] += parts.total.item()
        since += 1
        if step % run.eval_every == 0 or step == run.steps:
            for key in ("fm", "cos", "total"):
                rows.append(MetricRow(step, f"loss_{key}", sums[key] / since, "train"))
                sums[key] = 0.0
            since = 0
            if len(probe):
                rows.extend(_stage_a_probe(cfg, encoder, frozen, decoder, probe, step))
    tensors = {}
    for name, value in model_state(encoder).items():
        tensors[f"encoder.{name}"] = value
    for name, value in model_state(frozen).items():
        tensors[f"frozen_encoder.{name}"] = value
    for name, value in model_state(decoder).items():
        tensors[f"decoder.{name}"] = value
    if ema is not None:
        for name, value in ema.items():
            tensors[f"ema.{name}"] = value
    meta = {"partition": run.partition}
    ckpt = Checkpoint(
        phase="stage_a", step=run.steps, tensors=tensors, config_text=format_config(cfg), meta=meta
    )
    return ckpt, rows


@torch.no_grad()
def _stage_a_probe(cfg, encoder, frozen, decoder, probe, step) -> list:
    g_eval = torch.Generator().manual_seed(cfg.run.seed + EVAL_STREAM)
    recon = reconstruct(encoder, decoder, probe, cfg.sample.nfe_decode, g_eval, cfg.run.token_index)
    z = encoder.encode(probe, cfg.run.token_index)
    z_frozen = frozen.encode(probe, cfg.run.token_index)
    cos = torch.nn.functional.cosine_similarity(z, z_frozen, dim=-1).mean().item()
    return [
        MetricRow(step, "psnr", psnr(probe, recon), "heldout"),
        MetricRow(step, "mean_cos", cos, "heldout"),
    ]


@torch.no_grad()
def encode_features(encoder: VitEncoder, images: Tensor, token_index: int = 0) -> Tensor:
    chunks = [
        encoder.encode(images[i : i + ENCODE_BATCH], token_index)
        for i in range(0, len(images), ENCODE_BATCH)
    ]
    return torch.cat(chunks, dim=0)


def build_latent_cache(stage_a_ckpt: Checkpoint, images: Tensor, labels: Tensor) -> Checkpoint:
    """Deterministic full-pass encode of a dataset split, plus per-dimension
    standardization stats; uses the EMA encoder when shadows are present."""
    cfg = parse_config_text(stage_a_ckpt.config_text)
    encoder, _, _ = _stage_a_models(stage_a_ckpt, cfg, use_ema=True)
    source = "ema" if any(k.startswith("ema.encoder.") for k in stage_a_ckpt.tensors) else "raw"
    latents = encode_features(encoder, images, cfg.run.token_index)
    mean = latents.mean(dim=0)
    std = latents.std(dim=0, unbiased=True)
    if bool((std == 0).any()):
        raise DegenerateNumericsError("latent dimension with zero variance; cache is degenerate")
    tensors = {
        "latents": latents,
        "labels": labels.to(torch.float32),
        "latent_stats.mean": mean,
        "latent_stats.std": std,
    }
    meta = {"source": source, "count": str(len(images))}
    return Checkpoint(
        phase="latent_cache",
        step=stage_a_ckpt.step,
        tensors=tensors,
        config_text=stage_a_ckpt.config_text,
        meta=meta,
    )


def train_stage_b(cfg: RunConfig, cache: Checkpoint) -> tuple[Checkpoint, list]:
    """Mixer training on standardized cached latents."""
    if cache.phase != "latent_cache":
        raise ConfigError(f"expected a latent_cache checkpoint, got phase {cache.phase!r}")
    run = cfg.run
    latents = cache.tensors["latents"]
    labels = cache.tensors["labels"].to(torch.long)
    stats = LatentStats(mean=cache.tensors["latent_stats.mean"], std=cache.tensors["latent_stats.std"])
    z_all = stats.normalize(latents)
    torch.manual_seed(run.seed)
    mixer = build_mixer(cfg, token_dim=latents.shape[1])
    opt = torch.optim.AdamW(
        mixer.parameters(), lr=run.lr, betas=(0.9, 0.999), weight_decay=run.weight_decay
    )
    ema = None
    if run.ema_decay is not None:
        ema = {f"mixer.{k}": v.clone() for k, v in model_state(mixer).items()}
    g_data = torch.Generator().manual_seed(run.seed + DATA_STREAM)
    g_train = torch.Generator().manual_seed(run.seed + TRAIN_STREAM)
    rows: list[MetricRow] = []
    running, since = 0.0, 0
    for step, idx in enumerate(_batches(len(z_all), run.batch_size, run.steps, g_data), start=1):
        _set_lr(opt, lr_at_step(step, run.lr, run.warmup_steps))
        loss = stage_b_loss(mixer, z_all[idx], labels[idx], g_train)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            live = {f"mixer.{n}": p.detach() for n, p in mixer.named_parameters()}
            ema = ema_update(ema, live, run.ema_decay)
        running += loss.item()
        since += 1
        if step % run.eval_every == 0 or step == run.steps:
            rows.append(MetricRow(step, "loss_fm", running / since, "train"))
            running, since = 0.0, 0
    tensors = {f"mixer.{k}": v for k, v in model_state(mixer).items()}
    if ema is not None:
        tensors.update(ema)
    tensors["latent_stats.mean"] = stats.mean.clone()
    tensors["latent_stats.std"] = stats.std.clone()
    ckpt = Checkpoint(
        phase="stage_b",
        step=run.steps,
        tensors=tensors,
        config_text=format_config(cfg),
        meta={"latent_source": cache.meta.get("source", "raw")},
    )
    return ckpt, rows


def _apply_ema(module: torch.nn.Module, tensors: dict, prefix: str) -> None:
    shadows = split_prefix(tensors, f"ema.{prefix}")
    own = dict(module.named_parameters())
    with torch.no_grad():
        for name, value in shadows.items():
            own[name].copy_(value)


def _stage_a_models(ckpt: Checkpoint, cfg: RunConfig, use_ema: bool):
    encoder = build_encoder(cfg)
    load_state(encoder, split_prefix(ckpt.tensors, "encoder."))
    frozen = build_encoder(cfg)
    load_state(frozen, split_prefix(ckpt.tensors, "frozen_encoder."))
    decoder = build_decoder(cfg)
    load_state(decoder, split_prefix(ckpt.tensors, "decoder."))
    if use_ema:
        _apply_ema(encoder, ckpt.tensors, "encoder.")
        _apply_ema(decoder, ckpt.tensors, "decoder.")
    for m in (encoder, frozen, decoder):
        m.requires_grad_(False)
        m.eval()
    return encoder, frozen, decoder


def models_from_stage_a(ckpt: Checkpoint, use_ema: bool = True):
    """(encoder, frozen_encoder, decoder, cfg) rebuilt from the config echo."""
    if ckpt.phase != "stage_a":
        raise ConfigError(f"expected a stage_a checkpoint, got phase {ckpt.phase!r}")
    cfg = parse_config_text(ckpt.config_text)
    encoder, frozen, decoder = _stage_a_models(ckpt, cfg, use_ema)
    return encoder, frozen, decoder, cfg


def mixer_from_stage_b(ckpt: Checkpoint, use_ema: bool = True):
    if ckpt.phase != "stage_b":
        raise ConfigError(f"expected a stage_b checkpoint, got phase {ckpt.phase!r}")
    cfg = parse_config_text(ckpt.config_text)
    token_dim = ckpt.tensors["latent_stats.mean"].shape[0]
    mixer = build_mixer(cfg, token_dim=token_dim)
    load_state(mixer, split_prefix(ckpt.tensors, "mixer."))
    if use_ema:
        _apply_ema(mixer, ckpt.tensors, "mixer.")
    mixer.requires_grad_(False)
    mixer.eval()
    stats = LatentStats(mean=ckpt.tensors["latent_stats.mean"], std=ckpt.tensors["latent_stats.std"])
    return mixer, stats, cfg


def reconstruct_images(stage_a_ckpt: Checkpoint, images: Tensor, nfe: int, seed: int) -> Tensor:
    encoder, _, decoder, cfg = models_from_stage_a(stage_a_ckpt)
    rng = torch.Generator().manual_seed(seed)
    return reconstruct(encoder, decoder, images, nfe, rng, cfg.run.token_index)


@torch.no_grad()
def generate(
    stage_a_ckpt: Checkpoint,
    stage_b_ckpt: Checkpoint,
    class_id,
    count: int,
    cfg_scale: float,
    nfe_latent: int,
    nfe_decode: int,
    seed: int,
) -> Tensor:
    """Sample latents with the mixer, then decode each from fresh noise."""
    _, _, decoder, cfg = models_from_stage_a(stage_a_ckpt)
    mixer, stats, _ = mixer_from_stage_b(stage_b_ckpt)
    shape = (cfg.encoder.channels, cfg.encoder.image_size, cfg.encoder.image_size)
    if count == 0:
        return torch.empty(0, *shape)
    rng = torch.Generator().manual_seed(seed)
    z = sample_latent(mixer, stats, class_id, nfe_latent, cfg_scale, rng, count=count)
    x0 = torch.randn((count, *shape), generator=rng)
    out = euler_integrate(lambda x, t, c: decoder.velocity(x, t, c), x0, nfe_decode, cond=z)
    return out.clamp(-1.0, 1.0)


@torch.no_grad()
def interpolate_images(
    stage_a_ckpt: Checkpoint, image_a: Tensor, image_b: Tensor, num_frames: int, nfe: int, seed: int
) -> Tensor:
    """Decode the linear latent path between two images; every frame shares
    the endpoint reconstruction noise, so frames 0 and K-1 bit-match
    same-seed reconstructions."""
    if num_frames < 2:
        raise ValueError(f"num_frames must be >= 2, got {num_frames}")
    encoder, _, decoder, cfg = models_from_stage_a(stage_a_ckpt)
    za = encoder.encode(image_a.unsqueeze(0), cfg.run.token_index)
    zb = encoder.encode(image_b.unsqueeze(0), cfg.run.token_index)
    frames = []
    for k in range(num_frames):
        alpha = k / (num_frames - 1)
        z = (1.0 - alpha) * za + alpha * zb
        x0 = torch.randn(image_a.unsqueeze(0).shape, generator=torch.Generator().manual_seed(seed))
        out = euler_integrate(lambda x, t, c: decoder.velocity(x, t, c), x0, nfe, cond=z)
        frames.append(out.clamp(-1.0, 1.0)[0])
    return torch.stack(frames)


def evaluate_reconstruction(
    stage_a_ckpt: Checkpoint,
    images: Tensor,
    nfe: int,
    seed: int,
    feature_encoder: VitEncoder = None,
) -> dict:
    """Held-out PSNR/SSIM plus Frechet distance between frozen-encoder
    features of originals and reconstructions."""
    encoder, frozen, decoder, cfg = models_from_stage_a(stage_a_ckpt)
    rng = torch.Generator().manual_seed(seed)
    recons = reconstruct(encoder, decoder, images, nfe, rng, cfg.run.token_index)
    feat = feature_encoder if feature_encoder is not None else frozen
    return reconstruction_metrics(
        images,
        recons,
        encode_features(feat, images, cfg.run.token_index),
        encode_features(feat, recons, cfg.run.token_index),
    )


@torch.no_grad()
def evaluate_generation(
    stage_a_ckpt: Checkpoint,
    stage_b_ckpt: Checkpoint,
    real_images: Tensor,
    count: int,
    cfg_scale: float,
    nfe_latent: int,
    nfe_decode: int,
    seed: int,
    feature_encoder: VitEncoder = None,
) -> dict:
    """Frechet distance between frozen-encoder features of class-balanced
    generations and held-out real images."""
    _, frozen, decoder, cfg = models_from_stage_a(stage_a_ckpt)
    mixer, stats, _ = mixer_from_stage_b(stage_b_ckpt)
    num_classes = cfg.data.num_classes
    if count % num_classes != 0:
        raise ValueError(f"count {count} not divisible by num_classes {num_classes}")
    per_class = count // num_classes
    rng = torch.Generator().manual_seed(seed)
    latents = [
        sample_latent(mixer, stats, c, nfe_latent, cfg_scale, rng, count=per_class)
        for c in range(num_classes)
    ]
    z = torch.cat(latents, dim=0)
    shape = (cfg.encoder.channels, cfg.encoder.image_size, cfg.encoder.image_size)
    x0 = torch.randn((count, *shape), generator=rng)
    images = euler_integrate(
        lambda x, t, c: decoder.velocity(x, t, c), x0, nfe_decode, cond=z
    ).clamp(-1.0, 1.0)
    feat = feature_encoder if feature_encoder is not None else frozen
    gen_features = encode_features(feat, images, cfg.run.token_index)
    real_features = encode_features(feat, real_images, cfg.run.token_index)
    return {
        "encoder_frechet": frechet_distance(
            gaussian_stats(gen_features), gaussian_stats(real_features)
        )
    }
