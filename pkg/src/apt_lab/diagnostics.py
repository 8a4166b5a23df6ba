"""Latent traversals and per-layer linear probes of a one-step generator."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from apt_lab.data import DataSource, mode_centers
from apt_lab.errors import InvalidInputError
from apt_lab.model import DiT, generator_forward, unpatchify
from apt_lab.schedules import euler_sample

Sampler = Callable[[Tensor, Tensor], Tensor]


def slerp(z_a: Tensor, z_b: Tensor, n_frames: int) -> Tensor:
    """Spherical interpolation; returns ``(n_frames, *z_a.shape)`` with exact endpoints."""
    if n_frames < 2:
        raise InvalidInputError("n_frames must be >= 2")
    a = z_a.reshape(-1).double()
    b = z_b.reshape(-1).double()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise InvalidInputError("slerp is undefined for zero-norm noise")
    omega = torch.arccos(torch.clamp((a @ b) / (na * nb), -1.0, 1.0))
    frames = []
    for i in range(n_frames):
        u = i / (n_frames - 1)
        if i == 0:
            v = a
        elif i == n_frames - 1:
            v = b
        elif omega.abs() < 1e-7:
            v = (1 - u) * a + u * b
        else:
            v = (torch.sin((1 - u) * omega) * a + torch.sin(u * omega) * b) / torch.sin(omega)
        frames.append(v.to(z_a.dtype).reshape(z_a.shape))
    return torch.stack(frames)


@dataclass
class Traversal:
    frames: np.ndarray  # (n_frames, *sample_shape)
    modes: np.ndarray | None  # nearest mode index per frame, synthetic data only
    sharpness: float  # largest frame-to-frame jump / endpoint distance


def transition_sharpness(frames: np.ndarray) -> float:
    flat = frames.reshape(len(frames), -1)
    jumps = np.linalg.norm(np.diff(flat, axis=0), axis=1)
    span = np.linalg.norm(flat[-1] - flat[0])
    if span == 0:
        return 0.0
    return float(jumps.max() / span)


@torch.no_grad()
def latent_traversal(sampler: Sampler | DiT, z_a: Tensor, z_b: Tensor, cond: int, n_frames: int,
                     source: DataSource | None = None) -> Traversal:
    """Generate one sample per slerp frame between two noise draws.

    ``sampler`` maps ``(z, cond)`` batches to samples; a :class:`DiT` is used as
    a one-step generator.
    """
    if isinstance(sampler, DiT):
        model = sampler
        sampler = lambda z, c: generator_forward(model, z, c)  # noqa: E731
    zs = slerp(z_a, z_b, n_frames)
    cond_t = torch.full((n_frames,), int(cond), dtype=torch.long)
    frames = sampler(zs, cond_t).cpu().numpy()
    modes = None
    if source is not None and source.spec.kind in ("gmm_ring", "checkerboard"):
        pts = source.normalization.invert(frames.reshape(n_frames, -1))
        centers = mode_centers(source.spec)
        modes = ((pts[:, None, :] - centers[None]) ** 2).sum(-1).argmin(axis=1)
    return Traversal(frames=frames, modes=modes, sharpness=transition_sharpness(frames))


def teacher_sampler(model: DiT, n_steps: int = 25, cfg_scale: float = 1.0) -> Sampler:
    return lambda z, c: euler_sample(model, z, c, n_steps, cfg_scale)


class LayerProbe(nn.Module):
    """Linear token-wise map from one block's output to a velocity; shares the frozen output modulation."""

    def __init__(self, model: DiT):
        super().__init__()
        self.linear = copy.deepcopy(model.final.linear).requires_grad_(True)

    def forward(self, model: DiT, hidden: Tensor, cond: Tensor, z: Tensor) -> Tensor:
        feats = model.final.features(hidden, cond)
        return z - unpatchify(self.linear(feats), model.config)


@dataclass
class ProbeReport:
    probes: list[LayerProbe]
    mse: list[float]  # per layer, in depth order


def train_layer_probes(model: DiT, source: DataSource, steps: int, generator: torch.Generator,
                       batch_size: int = 256, lr: float = 1e-2, eval_size: int = 2048) -> ProbeReport:
    """Fit one probe per block to the model's own one-step sample, backbone frozen.

    Every probe starts as a copy of the model's output head, so the last-layer
    probe reproduces the generator exactly from step 0.
    """
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    probes = [LayerProbe(model) for _ in range(model.config.depth)]
    params = [p for probe in probes for p in probe.parameters()]
    opt = torch.optim.Adam(params, lr=lr)

    def batch(n):
        _, c = source.sample(generator, n)
        shape = (n, *model.config.data_shape)
        z = torch.randn(shape, generator=generator)
        with torch.no_grad():
            acts = model(z, 1.0, c)
        return z, c, acts

    for _ in range(steps):
        z, _, acts = batch(batch_size)
        target = z - acts.velocity
        loss = sum(
            (probe(model, h, acts.cond, z) - target).square().mean() for probe, h in zip(probes, acts.hidden)
        )
        opt.zero_grad()
        loss.backward()
        opt.step()

    z, _, acts = batch(eval_size)
    target = z - acts.velocity
    with torch.no_grad():
        mse = [float((probe(model, h, acts.cond, z) - target).square().mean())
               for probe, h in zip(probes, acts.hidden)]
    for p, flag in zip(model.parameters(), flags):
        p.requires_grad_(flag)
    return ProbeReport(probes=probes, mse=mse)
