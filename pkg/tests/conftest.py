"""Shared fixtures: the digits dataset in MNIST IDX format, small model
configs, and a session-scoped store of trained artifacts reused by the
trained-model property tests and the acceptance suite.

Heavy artifacts are built lazily on first request and cached on disk for the
rest of the session (set ONETOK_TEST_CACHE to a directory to reuse them
across local runs while iterating; CI/fresh runs train from scratch).
"""

import csv
import os
from pathlib import Path

import pytest
import torch

from onetok import pipeline
from onetok.checkpoint import Checkpoint, load_checkpoint, save_checkpoint, split_prefix
from onetok.config import RunConfig, parse_config_text
from onetok.data import load_dataset
from onetok.metrics import MetricRow, write_metrics_csv

from datagen import write_digits_idx

# Acceptance-scale run lengths (small models keep these within the criteria's
# runtime budgets on a 2-core CPU box).
SSL_STEPS = 3000
STAGE_A_STEPS = 5000
PIPELINE_STEPS = 10000
PRIOR_LAMBDA = 0.5

BASE_CONFIG = """
[run]
seed = 0
steps = {steps}
batch_size = 32
lr = 0.0003
warmup_steps = 200
weight_decay = 0.01
lambda = 0.0
eval_every = 500
partition = cls_only
ssl_temperature = 0.2

[data]
format = mnist_idx
path = {images}
labels_path = {labels}
train_fraction = 0.8
test_fraction = 0.2
num_classes = 10
pad_to = 32

[encoder]
image_size = 32
patch_size = 8
embed_dim = 64
depth = 3
heads = 4

[decoder]
patch_size = 8
embed_dim = 96
depth = 3
heads = 4
time_embed_dim = 64

[mixer]
hidden_dim = 192
depth = 6
token_mlp_expansion = 2
channel_mlp_expansion = 4
class_embed_dim = 64
p_drop = 0.1

[sample]
nfe_decode = 20
nfe_latent = 50
cfg_scale = 1.0
"""


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for r in reader:
            rows.append(MetricRow(int(r["step"]), r["metric"], float(r["value"]), r["split"]))
    return rows


class TrainedStore:
    """Builds and caches trained checkpoints keyed by a descriptive name."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.images_path, self.labels_path = write_digits_idx(self.root / "data")
        self._dataset = None

    def config(self, steps: int = STAGE_A_STEPS, **overrides) -> RunConfig:
        cfg = parse_config_text(
            BASE_CONFIG.format(steps=steps, images=self.images_path, labels=self.labels_path)
        )
        for key, value in overrides.items():
            section, _, attr = key.partition(".")
            setattr(getattr(cfg, section), "lambda_" if attr == "lambda" else attr, value)
        return cfg

    @property
    def dataset(self):
        if self._dataset is None:
            self._dataset = load_dataset(self.config().data)
        return self._dataset

    def _cached(self, name: str, build) -> tuple[Checkpoint, list]:
        ckpt_path = self.root / f"{name}.rptk"
        rows_path = self.root / f"{name}.metrics.csv"
        if not ckpt_path.exists():
            ckpt, rows = build()
            save_checkpoint(ckpt, ckpt_path)
            write_metrics_csv(rows_path, rows)
        return load_checkpoint(ckpt_path), read_metrics_csv(rows_path)

    def ssl(self) -> Checkpoint:
        def build():
            cfg = self.config(steps=SSL_STEPS)
            cfg.run.phase = "ssl"
            return pipeline.pretrain_ssl(cfg, self.dataset.train_images)

        return self._cached("ssl", build)[0]

    def random_encoder(self) -> Checkpoint:
        def build():
            cfg = self.config(steps=0)
            cfg.run.phase = "ssl"
            return pipeline.pretrain_ssl(cfg, self.dataset.train_images)

        return self._cached("random_encoder", build)[0]

    def stage_a(
        self,
        name: str,
        lam: float,
        partition: str = "cls_only",
        steps: int = STAGE_A_STEPS,
        init: str = "ssl",
        seed: int = 0,
    ) -> tuple[Checkpoint, list]:
        def build():
            cfg = self.config(steps=steps)
            cfg.run.lambda_ = lam
            cfg.run.partition = partition
            cfg.run.seed = seed
            init_ckpt = self.ssl() if init == "ssl" else self.random_encoder()
            ds = self.dataset
            return pipeline.train_stage_a(
                cfg, ds.train_images, ds.test_images, split_prefix(init_ckpt.tensors, "encoder.")
            )

        return self._cached(name, build)

    def latent_cache(self, name: str, stage_a_name: str) -> Checkpoint:
        path = self.root / f"{name}.rptk"
        if not path.exists():
            stage_a_ckpt = load_checkpoint(self.root / f"{stage_a_name}.rptk")
            ds = self.dataset
            cache = pipeline.build_latent_cache(stage_a_ckpt, ds.train_images, ds.train_labels)
            save_checkpoint(cache, path)
        return load_checkpoint(path)

    def stage_b(self, name: str, cache_name: str, steps: int = PIPELINE_STEPS, seed: int = 0):
        def build():
            cfg = self.config(steps=steps)
            cfg.run.phase = "stage_b"
            cfg.run.seed = seed
            cache = load_checkpoint(self.root / f"{cache_name}.rptk")
            return pipeline.train_stage_b(cfg, cache)

        return self._cached(name, build)

    # Named ensembles used by several test modules.

    def stage_a_lam0(self):
        return self.stage_a("stage_a_lam0", lam=0.0)

    def stage_a_frozen(self):
        return self.stage_a("stage_a_frozen", lam=0.0, partition="none")

    def prior_pipeline(self):
        """Pretrained encoder + cosine loss, full two-stage run."""
        a, _ = self.stage_a("prior_a", lam=PRIOR_LAMBDA, steps=PIPELINE_STEPS)
        self.latent_cache("prior_cache", "prior_a")
        b, _ = self.stage_b("prior_b", "prior_cache")
        return a, b

    def noprior_pipeline(self):
        """Random-init encoder, unconstrained, no cosine loss."""
        a, _ = self.stage_a(
            "noprior_a", lam=0.0, partition="all", steps=PIPELINE_STEPS, init="random"
        )
        self.latent_cache("noprior_cache", "noprior_a")
        b, _ = self.stage_b("noprior_b", "noprior_cache")
        return a, b


@pytest.fixture(scope="session")
def store(tmp_path_factory) -> TrainedStore:
    cache_dir = os.environ.get("ONETOK_TEST_CACHE")
    root = Path(cache_dir) if cache_dir else tmp_path_factory.mktemp("trained")
    return TrainedStore(root)


@pytest.fixture(scope="session")
def digits_paths(store):
    return store.images_path, store.labels_path


@pytest.fixture()
def tiny_config(store) -> RunConfig:
    """A seconds-scale config for functional (non-quality) pipeline tests."""
    return store.config(
        steps=6,
        **{
            "run.batch_size": 8,
            "run.eval_every": 3,
            "run.warmup_steps": 2,
            "encoder.embed_dim": 32,
            "encoder.depth": 1,
            "encoder.heads": 2,
            "decoder.embed_dim": 32,
            "decoder.depth": 1,
            "decoder.heads": 2,
            "mixer.hidden_dim": 32,
            "mixer.depth": 2,
            "mixer.class_embed_dim": 8,
            "sample.nfe_decode": 3,
            "sample.nfe_latent": 3,
        },
    )
