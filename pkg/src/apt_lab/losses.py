"""Training objectives.

All losses are written to be minimized. The adversarial terms use the
non-saturating form in its softplus expression::

    d_real = -log sigmoid(l_real) = softplus(-l_real)
    d_fake = -log(1 - sigmoid(l_fake)) = softplus(l_fake)
    g_loss = -log sigmoid(l_fake) = softplus(-l_fake)

A critic here is any callable ``critic(x, t, cond) -> logits`` of shape (B,).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

from apt_lab.errors import InvalidInputError
from apt_lab.model import DiT, cfg_velocity, sample_prediction, velocity
from apt_lab.schedules import interpolate, sample_shifted_timestep, velocity_target

Critic = Callable[[Tensor, Tensor, Tensor], Tensor]


@dataclass
class LossBreakdown:
    d_real: float
    d_fake: float
    ar1: float
    d_total: float
    g_loss: float
    lam: float
    sigma: float

    def check(self, rtol: float = 1e-6) -> None:
        values = asdict(self).values()
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(f"non-finite loss record {self}")
        expected = self.d_real + self.d_fake + self.lam * self.ar1
        if abs(self.d_total - expected) > rtol * max(1.0, abs(expected)):
            raise InvalidInputError(f"d_total {self.d_total} != d_real + d_fake + lambda * ar1 = {expected}")


def flow_matching_loss(model: DiT, x: Tensor, z: Tensor, t, cond: Tensor) -> Tensor:
    x_t = interpolate(x, z, t)
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    pred = velocity(model, x_t, t, cond)
    return F.mse_loss(pred, velocity_target(x, z))


def consistency_loss(student: DiT, target: DiT, teacher: DiT, x: Tensor, z: Tensor,
                     t_pair: tuple, cond: Tensor, cfg_scale: float = 7.5) -> Tensor:
    """Sample-space MSE between the student at ``t_k`` and the frozen target one teacher step earlier."""
    t_k = torch.as_tensor(t_pair[0], dtype=x.dtype, device=x.device)
    t_prev = torch.as_tensor(t_pair[1], dtype=x.dtype, device=x.device)
    if bool(((t_prev < 0) | (t_prev > t_k) | (t_k > 1)).any()):
        raise InvalidInputError("consistency pair must satisfy 0 <= t_prev <= t_k <= 1")
    if t_k.dim() == 0:
        t_k = t_k.expand(x.shape[0])
        t_prev = t_prev.expand(x.shape[0])
    x_k = interpolate(x, z, t_k)
    with torch.no_grad():
        v_teacher = cfg_velocity(teacher, x_k, t_k, cond, cfg_scale)
        x_prev = x_k - (t_k - t_prev).view(-1, 1, 1, 1, 1) * v_teacher
        goal = sample_prediction(target, x_prev, t_prev, cond)
    return F.mse_loss(sample_prediction(student, x_k, t_k, cond), goal)


def _finite(*logits: Tensor) -> None:
    for logit in logits:
        if not bool(torch.isfinite(logit).all()):
            raise InvalidInputError("logits must be finite")


def d_loss_terms(logit_real: Tensor, logit_fake: Tensor) -> tuple[Tensor, Tensor]:
    logit_real = torch.as_tensor(logit_real)
    logit_fake = torch.as_tensor(logit_fake)
    _finite(logit_real, logit_fake)
    return F.softplus(-logit_real), F.softplus(logit_fake)


def g_loss(logit_fake: Tensor) -> Tensor:
    logit_fake = torch.as_tensor(logit_fake)
    _finite(logit_fake)
    return F.softplus(-logit_fake)


def approx_r1(critic: Critic, x: Tensor, cond: Tensor, sigma: float, generator: torch.Generator,
              s: float = 1.0, t: Tensor | None = None, logit_clean: Tensor | None = None,
              reduction: str = "mean") -> Tensor:
    """``(D(x, t, c) - D(x + sigma * eps, t, c))^2`` with one shared timestep per pair.

    ``t`` defaults to one shifted draw per sample. Pass ``logit_clean`` to reuse
    an already computed clean logit evaluated at the same ``t``.
    """
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be > 0, got {sigma}")
    if t is None:
        t = sample_shifted_timestep(generator, s, x.shape[0], dtype=x.dtype)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    if logit_clean is None:
        logit_clean = critic(x, t, cond)
    diff = logit_clean - critic(x + sigma * eps, t, cond)
    penalty = diff.square()
    return penalty.mean() if reduction == "mean" else penalty


def exact_r1_oracle(critic: Critic, x: Tensor, cond: Tensor, t: Tensor | None = None) -> Tensor:
    """Per-sample ``||grad_x D(x, t, c)||^2``; differentiable (double backward)."""
    if t is None:
        t = torch.zeros(x.shape[0], dtype=x.dtype)
    x = x.detach().requires_grad_(True)
    logits = critic(x, t, cond)
    (grad,) = torch.autograd.grad(logits.sum(), x, create_graph=True)
    return grad.reshape(x.shape[0], -1).square().sum(dim=1)


def total_d_loss(d_real, d_fake, ar1, lam: float):
    return d_real + d_fake + lam * ar1
