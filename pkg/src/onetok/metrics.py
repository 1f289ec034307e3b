"""Reconstruction and generation metrics: PSNR, SSIM, and the Frechet
distance between Gaussian fits of encoder-feature distributions.

Images arrive in [-1, 1] and are remapped to unit dynamic range before PSNR
and SSIM. All statistics run in float64; the Frechet matrix square root uses
a symmetric eigendecomposition with a small negative-eigenvalue clamp.
"""

import csv
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateNumericsError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
EIGVAL_CLAMP = -1e-8


@dataclass
class GaussianStats:
    """Mean vector and covariance matrix of a feature sample."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int


@dataclass
class MetricRow:
    step: int
    metric: str
    value: float
    split: str


def write_metrics_csv(path, rows: list[MetricRow]) -> None:
    """CSV with header ``step,metric,value,split``, UTF-8, LF line endings."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "metric", "value", "split"])
        for r in rows:
            writer.writerow([r.step, r.metric, repr(float(r.value)), r.split])


def _to_unit(images: Tensor) -> Tensor:
    return (images.to(torch.float64) + 1.0) / 2.0


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB on unit dynamic range; zero MSE
    returns the 100 dB sentinel cap."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = (_to_unit(a) - _to_unit(b)).pow(2).mean().item()
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: Tensor, b: Tensor) -> float:
    """Mean SSIM over 7x7 uniform windows, stride 1, per channel.

    Window statistics use population normalization; constants C1, C2 follow
    the usual (0.01, 0.03) choices on unit range.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = _to_unit(a)
    y = _to_unit(b)
    bsz, c = x.shape[0], x.shape[1]
    x = x.reshape(bsz * c, 1, h, w)
    y = y.reshape(bsz * c, 1, h, w)
    box = torch.ones(1, 1, SSIM_WINDOW, SSIM_WINDOW, dtype=torch.float64) / SSIM_WINDOW**2
    conv = lambda t: torch.nn.functional.conv2d(t, box)
    mx, my = conv(x), conv(y)
    vx = conv(x * x) - mx * mx
    vy = conv(y * y) - my * my
    cxy = conv(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float((num / den).mean().item())


def gaussian_stats(features) -> GaussianStats:
    """Column means and unbiased sample covariance of an N x D feature matrix."""
    f = np.asarray(features.detach().cpu() if isinstance(features, Tensor) else features)
    f = f.astype(np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need an N x D matrix with N >= 2, got shape {f.shape}")
    mu = f.mean(axis=0)
    centered = f - mu
    sigma = centered.T @ centered / (f.shape[0] - 1)
    return GaussianStats(mu=mu, sigma=sigma, n=f.shape[0])


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, V diag(sqrt(l)) V^T.

    Eigenvalues in [-1e-8, 0) are clamped to zero; anything more negative is
    a degeneracy error, not something to paper over.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if np.abs(m - m.T).max(initial=0.0) > 1e-6:
        raise ValueError("matrix is not symmetric within 1e-6")
    vals, vecs = np.linalg.eigh(m)
    if vals.min(initial=0.0) < EIGVAL_CLAMP:
        raise DegenerateNumericsError(f"eigenvalue {vals.min()} below clamp {EIGVAL_CLAMP}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """||mu_p - mu_q||^2 + Tr(S_p + S_q - 2 (S_p^1/2 S_q S_p^1/2)^1/2).

    The symmetrized inner product keeps the argument of the outer square
    root PSD, which is what makes the eigendecomposition route stable.
    """
    if p.mu.shape != q.mu.shape:
        raise ValueError(f"feature dims differ: {p.mu.shape} vs {q.mu.shape}")
    diff = p.mu - q.mu
    root_p = matrix_sqrt_psd(p.sigma)
    inner = root_p @ q.sigma @ root_p
    inner = (inner + inner.T) / 2.0  # kill roundoff asymmetry before the sqrt
    cross = matrix_sqrt_psd(inner)
    val = float(diff @ diff + np.trace(p.sigma) + np.trace(q.sigma) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def reconstruction_metrics(
    originals: Tensor,
    reconstructions: Tensor,
    original_features,
    reconstruction_features,
) -> dict:
    """PSNR/SSIM between image batches plus the feature-space Frechet distance."""
    return {
        "psnr": psnr(originals, reconstructions),
        "ssim": ssim(originals, reconstructions),
        "encoder_frechet": frechet_distance(
            gaussian_stats(original_features), gaussian_stats(reconstruction_features)
        ),
    }


def generation_metrics(generated_features, real_features) -> dict:
    return {
        "encoder_frechet": frechet_distance(
            gaussian_stats(generated_features), gaussian_stats(real_features)
        )
    }
