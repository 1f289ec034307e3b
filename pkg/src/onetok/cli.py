"""Command-line surface.

Every command accepts --config / --seed / --out plus scalar overrides via
--set section.key=value; unknown flags are hard errors. Diagnostics go to
stderr, data goes to files under --out (fixed names, byte-stable); the only
timestamps live in the sidecar manifest.txt.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
degeneracy.
"""

import argparse
import csv
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, split_prefix
from .config import RunConfig, apply_overrides, format_config, parse_config, parse_config_text
from .data import Dataset, emit_image_grid, load_dataset
from .errors import ConfigError, DataFormatError, DegenerateNumericsError
from .metrics import MetricRow, write_metrics_csv
from . import pipeline

COMMANDS = (
    "pretrain-ssl",
    "train-autoencoder",
    "encode-dataset",
    "train-latent",
    "sample",
    "reconstruct",
    "interpolate",
    "eval-recon",
    "eval-gen",
    "lambda-sweep",
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", default=None, help="INI config file (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a scalar config key (repeatable)",
    )
    p.add_argument("--print-config", action="store_true", help="print effective config and exit")


def build_parser() -> _Parser:
    parser = _Parser(prog="onetok", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("pretrain-ssl", help="contrastive pretraining of the encoder")
    _add_common(p)

    p = sub.add_parser("train-autoencoder", help="stage A: pooled token + flow-matching decoder")
    _add_common(p)
    p.add_argument("--init-encoder", default=None, help="encoder checkpoint to start from")

    p = sub.add_parser("encode-dataset", help="cache encoder latents for a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="stage A checkpoint")
    p.add_argument("--split", choices=("train", "test", "all"), default="train")

    p = sub.add_parser("train-latent", help="stage B: latent-space mixer")
    _add_common(p)
    p.add_argument("--latent-cache", default=None, help="encode-dataset output")

    p = sub.add_parser("sample", help="generate images for a class")
    _add_common(p)
    p.add_argument("--stage-a", default=None)
    p.add_argument("--stage-b", default=None)
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--cols", type=int, default=4)

    p = sub.add_parser("reconstruct", help="reconstruct held-out images")
    _add_common(p)
    p.add_argument("--stage-a", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--cols", type=int, default=4)

    p = sub.add_parser("interpolate", help="decode the latent path between two images")
    _add_common(p)
    p.add_argument("--stage-a", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--index-b", type=int, default=1)
    p.add_argument("--frames", type=int, default=8)

    p = sub.add_parser("eval-recon", help="reconstruction metrics on a split")
    _add_common(p)
    p.add_argument("--stage-a", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--count", type=int, default=256)

    p = sub.add_parser("eval-gen", help="generation metrics against held-out data")
    _add_common(p)
    p.add_argument("--stage-a", default=None)
    p.add_argument("--stage-b", default=None)
    p.add_argument("--count", type=int, default=1000)

    p = sub.add_parser("lambda-sweep", help="stage A (optionally + B) across lambda values")
    _add_common(p)
    p.add_argument("--init-encoder", default=None)
    p.add_argument("--lambdas", default=None, help="comma-separated lambda values")
    p.add_argument("--with-gen", action="store_true", help="also train stage B and report gen Frechet")

    return parser


def _load_config(args, ckpt: Checkpoint = None) -> RunConfig:
    if args.config is not None:
        cfg = parse_config(args.config)
    elif ckpt is not None:
        cfg = parse_config_text(ckpt.config_text)
    else:
        cfg = RunConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise _UsageError(f"--{name} is required for this command")


def _out_dir(args) -> Path:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, args) -> None:
    line = " ".join(sys.argv) if sys.argv else "onetok"
    stamp = datetime.now(timezone.utc).isoformat()
    (out / "manifest.txt").write_text(f"command = {line}\nwritten_utc = {stamp}\n", encoding="utf-8")


def _dataset(cfg: RunConfig) -> Dataset:
    if not cfg.data.path:
        raise ConfigError("[data] path is required for this command")
    return load_dataset(cfg.data)


def _split_images(ds: Dataset, split: str):
    if split == "train":
        return ds.train_images, ds.train_labels
    if split == "test":
        return ds.test_images, ds.test_labels
    return torch.cat([ds.train_images, ds.test_images]), torch.cat(
        [ds.train_labels, ds.test_labels]
    )


def cmd_pretrain_ssl(args) -> None:
    cfg = _load_config(args)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    ds = _dataset(cfg)
    ckpt, rows = pipeline.pretrain_ssl(cfg, ds.train_images)
    save_checkpoint(ckpt, out / "checkpoint.rptk")
    write_metrics_csv(out / "metrics.csv", rows)
    _manifest(out, args)


def cmd_train_autoencoder(args) -> None:
    cfg = _load_config(args)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    _require(args, "init-encoder")
    out = _out_dir(args)
    ds = _dataset(cfg)
    init = load_checkpoint(args.init_encoder)
    ckpt, rows = pipeline.train_stage_a(
        cfg, ds.train_images, ds.test_images, split_prefix(init.tensors, "encoder.")
    )
    save_checkpoint(ckpt, out / "checkpoint.rptk")
    write_metrics_csv(out / "metrics.csv", rows)
    _manifest(out, args)


def cmd_encode_dataset(args) -> None:
    _require(args, "checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _load_config(args, ckpt)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    ds = _dataset(cfg)
    images, labels = _split_images(ds, args.split)
    cache = pipeline.build_latent_cache(ckpt, images, labels)
    save_checkpoint(cache, out / "latent_cache.rptk")
    _manifest(out, args)


def cmd_train_latent(args) -> None:
    _require(args, "latent-cache")
    cache = load_checkpoint(args.latent_cache)
    cfg = _load_config(args, cache)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    ckpt, rows = pipeline.train_stage_b(cfg, cache)
    save_checkpoint(ckpt, out / "checkpoint.rptk")
    write_metrics_csv(out / "metrics.csv", rows)
    _manifest(out, args)


def cmd_sample(args) -> None:
    _require(args, "stage-a", "stage-b")
    stage_a = load_checkpoint(args.stage_a)
    stage_b = load_checkpoint(args.stage_b)
    cfg = _load_config(args, stage_a)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    images = pipeline.generate(
        stage_a,
        stage_b,
        args.class_id,
        args.count,
        cfg.sample.cfg_scale,
        cfg.sample.nfe_latent,
        cfg.sample.nfe_decode,
        cfg.run.seed,
    )
    emit_image_grid(images, args.cols, out / "samples.png")
    _manifest(out, args)


def cmd_reconstruct(args) -> None:
    _require(args, "stage-a")
    stage_a = load_checkpoint(args.stage_a)
    cfg = _load_config(args, stage_a)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    ds = _dataset(cfg)
    images, _ = _split_images(ds, args.split)
    images = images[: args.count]
    recons = pipeline.reconstruct_images(stage_a, images, cfg.sample.nfe_decode, cfg.run.seed)
    emit_image_grid(images, args.cols, out / "originals.png")
    emit_image_grid(recons, args.cols, out / "reconstructions.png")
    _manifest(out, args)


def cmd_interpolate(args) -> None:
    _require(args, "stage-a")
    stage_a = load_checkpoint(args.stage_a)
    cfg = _load_config(args, stage_a)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    ds = _dataset(cfg)
    images, _ = _split_images(ds, args.split)
    frames = pipeline.interpolate_images(
        stage_a,
        images[args.index_a],
        images[args.index_b],
        args.frames,
        cfg.sample.nfe_decode,
        cfg.run.seed,
    )
    emit_image_grid(frames, cols=args.frames, path=out / "interpolation.png")
    _manifest(out, args)


def cmd_eval_recon(args) -> None:
    _require(args, "stage-a")
    stage_a = load_checkpoint(args.stage_a)
    cfg = _load_config(args, stage_a)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    ds = _dataset(cfg)
    images, _ = _split_images(ds, args.split)
    images = images[: args.count]
    results = pipeline.evaluate_reconstruction(
        stage_a, images, cfg.sample.nfe_decode, cfg.run.seed
    )
    rows = [MetricRow(stage_a.step, k, v, args.split) for k, v in results.items()]
    write_metrics_csv(out / "metrics.csv", rows)
    _manifest(out, args)


def cmd_eval_gen(args) -> None:
    _require(args, "stage-a", "stage-b")
    stage_a = load_checkpoint(args.stage_a)
    stage_b = load_checkpoint(args.stage_b)
    cfg = _load_config(args, stage_a)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    out = _out_dir(args)
    ds = _dataset(cfg)
    results = pipeline.evaluate_generation(
        stage_a,
        stage_b,
        ds.test_images,
        args.count,
        cfg.sample.cfg_scale,
        cfg.sample.nfe_latent,
        cfg.sample.nfe_decode,
        cfg.run.seed,
    )
    rows = [MetricRow(stage_b.step, k, v, "test") for k, v in results.items()]
    write_metrics_csv(out / "metrics.csv", rows)
    _manifest(out, args)


def run_lambda_sweep(
    cfg: RunConfig, lambdas: list, init_encoder: dict, with_gen: bool = False
) -> list:
    """Paired stage-A runs (identical seeds) across lambda values.

    Returns one row per lambda: {lambda, psnr, mean_cos, encoder_frechet_gen};
    the generation column is NaN unless stage B is requested.
    """
    if not lambdas:
        raise ValueError("lambda list must not be empty")
    ds = _dataset(cfg)
    rows = []
    for lam in lambdas:
        run_cfg = parse_config_text(format_config(cfg))  # deep copy via round-trip
        run_cfg.run.lambda_ = lam
        ckpt, _ = pipeline.train_stage_a(
            run_cfg, ds.train_images, ds.test_images, init_encoder
        )
        eval_images = ds.test_images[:256]
        recon = pipeline.evaluate_reconstruction(
            ckpt, eval_images, run_cfg.sample.nfe_decode, run_cfg.run.seed
        )
        encoder, frozen, _, _ = pipeline.models_from_stage_a(ckpt)
        z = pipeline.encode_features(encoder, eval_images, run_cfg.run.token_index)
        z_frozen = pipeline.encode_features(frozen, eval_images, run_cfg.run.token_index)
        mean_cos = torch.nn.functional.cosine_similarity(z, z_frozen, dim=-1).mean().item()
        gen_frechet = float("nan")
        if with_gen:
            cache = pipeline.build_latent_cache(ckpt, ds.train_images, ds.train_labels)
            stage_b, _ = pipeline.train_stage_b(run_cfg, cache)
            count = (1000 // run_cfg.data.num_classes) * run_cfg.data.num_classes
            gen = pipeline.evaluate_generation(
                ckpt,
                stage_b,
                ds.test_images,
                count,
                run_cfg.sample.cfg_scale,
                run_cfg.sample.nfe_latent,
                run_cfg.sample.nfe_decode,
                run_cfg.run.seed,
            )
            gen_frechet = gen["encoder_frechet"]
        rows.append(
            {
                "lambda": lam,
                "psnr": recon["psnr"],
                "mean_cos": mean_cos,
                "encoder_frechet_gen": gen_frechet,
            }
        )
    return rows


def cmd_lambda_sweep(args) -> None:
    cfg = _load_config(args)
    if args.print_config:
        print(format_config(cfg), end="")
        return
    _require(args, "init-encoder", "lambdas")
    out = _out_dir(args)
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"--lambdas {args.lambdas!r} is not a comma-separated float list")
    init = load_checkpoint(args.init_encoder)
    rows = run_lambda_sweep(cfg, lambdas, split_prefix(init.tensors, "encoder."), args.with_gen)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["lambda", "psnr", "mean_cos", "encoder_frechet_gen"])
        for r in rows:
            writer.writerow(
                [r["lambda"], repr(r["psnr"]), repr(r["mean_cos"]), repr(r["encoder_frechet_gen"])]
            )
    _manifest(out, args)


_DISPATCH = {
    "pretrain-ssl": cmd_pretrain_ssl,
    "train-autoencoder": cmd_train_autoencoder,
    "encode-dataset": cmd_encode_dataset,
    "train-latent": cmd_train_latent,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "eval-recon": cmd_eval_recon,
    "eval-gen": cmd_eval_gen,
    "lambda-sweep": cmd_lambda_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a command is required (see --help)")
        _DISPATCH[args.command](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DegenerateNumericsError as e:
        print(f"numerical degeneracy: {e}", file=sys.stderr)
        return 3
    except (ConfigError, DataFormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
