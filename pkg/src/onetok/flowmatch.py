"""Flow-matching substrate: linear interpolants, the velocity-regression loss,
classifier-free guidance combination, and forward-Euler ODE integration.

Conventions fixed here and relied on everywhere else:

* the interpolant is linear, ``x_t = t*x1 + (1-t)*x0``, so the regression
  target is the constant displacement ``x1 - x0``;
* the loss is the mean squared error over all tensor elements;
* integration runs on the left-endpoint uniform grid ``t_k = k/steps`` with
  step ``1/steps``;
* guidance combines velocities as ``v_uncond + w*(v_cond - v_uncond)``, with
  exact short-circuits at ``w == 1`` and ``w == 0`` so those cases are
  bit-identical to the unguided branches.

All functions are pure; the only stateful argument is the RNG handed to
:func:`sample_time`, which must not be shared across concurrent callers.
"""

from dataclasses import dataclass
from typing import Any, Callable, Optional

import torch
from torch import Tensor

from .errors import IntegrationError

# (state, time, condition) -> velocity with the same shape as state
VelocityField = Callable[[Tensor, float, Any], Tensor]


@dataclass(frozen=True)
class InterpolantSample:
    """A point on the straight path from x0 to x1 plus its target velocity."""

    x_t: Tensor
    t: float
    u_target: Tensor


@dataclass(frozen=True)
class GuidanceSpec:
    """Classifier-free guidance: scale ``w >= 0`` and the null-condition value.

    ``uncond_cond`` is whatever the velocity field accepts as "no condition";
    for the latent generator it is a batch of null class ids.
    """

    scale: float
    uncond_cond: Any = None

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")


def sample_time(rng: torch.Generator) -> float:
    """Draw the training time uniformly from [0, 1)."""
    return torch.rand((), generator=rng).item()


def interpolate(x0: Tensor, x1: Tensor, t: float) -> InterpolantSample:
    """Linear interpolant between x0 and x1 at time ``t`` in [0, 1]."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs x1 {tuple(x1.shape)}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    x_t = t * x1 + (1.0 - t) * x0
    return InterpolantSample(x_t=x_t, t=t, u_target=x1 - x0)


def fm_loss(v_pred: Tensor, u_target: Tensor) -> Tensor:
    """Mean squared error between predicted and target velocities.

    Zero exactly when the arguments are equal; reduction order is row-major
    (torch's fixed contiguous reduction), keeping repeated runs bit-identical.
    """
    if v_pred.shape != u_target.shape:
        raise ValueError(
            f"shape mismatch: v_pred {tuple(v_pred.shape)} vs u_target {tuple(u_target.shape)}"
        )
    return (v_pred - u_target).pow(2).mean()


def cfg_velocity(v_cond: Tensor, v_uncond: Tensor, w: float) -> Tensor:
    """Guided velocity ``v_uncond + w*(v_cond - v_uncond)``.

    ``w == 1`` returns ``v_cond`` and ``w == 0`` returns ``v_uncond``
    bit-exactly (short-circuited, not recomputed through the formula).
    """
    if v_cond.shape != v_uncond.shape:
        raise ValueError(
            f"shape mismatch: v_cond {tuple(v_cond.shape)} vs v_uncond {tuple(v_uncond.shape)}"
        )
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    if w == 1.0:
        return v_cond
    if w == 0.0:
        return v_uncond
    return v_uncond + w * (v_cond - v_uncond)


def euler_integrate(
    field: VelocityField,
    x0: Tensor,
    steps: int,
    cond: Any = None,
    guidance: Optional[GuidanceSpec] = None,
) -> Tensor:
    """Forward-Euler integration of ``dx = v(x, t) dt`` from t=0 to t=1.

    Applies ``x <- x + (1/steps) * v(x, t_k)`` on the left-endpoint grid
    ``t_k = k/steps``. With ``guidance`` set, each velocity is the CFG
    combination of the field evaluated with ``cond`` and with the null
    condition from the spec.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = x0
    dt = 1.0 / steps
    for k in range(steps):
        t = k / steps
        v = field(x, t, cond)
        if v.shape != x.shape:
            raise IntegrationError(
                f"field returned shape {tuple(v.shape)} for state {tuple(x.shape)} at t={t}"
            )
        if guidance is not None:
            v_uncond = field(x, t, guidance.uncond_cond)
            if v_uncond.shape != x.shape:
                raise IntegrationError(
                    f"unconditional field returned shape {tuple(v_uncond.shape)} at t={t}"
                )
            v = cfg_velocity(v, v_uncond, guidance.scale)
        x = x + dt * v
    return x
