"""Multi-layer discriminator on top of the diffusion backbone.

The backbone is a copy of the pre-trained diffusion transformer. It sees the
clean sample (never noised); the timestep only enters through the timestep
embedding. Cross-attention heads with one learned query each read selected
block outputs, and the head tokens are concatenated, normalized and projected
to one logit.
"""
from __future__ import annotations

import copy

import torch
from torch import Tensor, nn

from apt_lab.checkpoint import Checkpoint
from apt_lab.config import HeadConfig
from apt_lab.errors import ConfigError, InvalidInputError
from apt_lab.model import DiT, attention
from apt_lab.schedules import sample_shifted_timestep, shift


class CrossAttentionHead(nn.Module):
    def __init__(self, width: int, heads: int = 1):
        super().__init__()
        if width % heads:
            raise ConfigError("head width must be divisible by its attention heads")
        self.heads = heads
        self.query = nn.Parameter(torch.zeros(width))
        self.norm = nn.LayerNorm(width, eps=1e-6)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        nn.init.normal_(self.query, std=0.02, generator=generator)
        for lin in (self.q, self.k, self.v, self.out):
            nn.init.xavier_uniform_(lin.weight, generator=generator)
            nn.init.zeros_(lin.bias)
        self.norm.reset_parameters()

    def forward(self, hidden: Tensor) -> Tensor:
        b, n, w = hidden.shape
        if n == 0:
            raise InvalidInputError("cross-attention head needs at least one token")
        kv = self.norm(hidden)
        dh = w // self.heads
        q = self.q(self.query).view(1, self.heads, 1, dh).expand(b, -1, -1, -1)
        k = self.k(kv).view(b, n, self.heads, dh).transpose(1, 2)
        v = self.v(kv).view(b, n, self.heads, dh).transpose(1, 2)
        out = attention(q, k, v).transpose(1, 2).reshape(b, w)
        return self.query + self.out(out)


class Discriminator(nn.Module):
    def __init__(self, backbone: DiT, layer_indices: tuple[int, ...], attn_heads: int = 1,
                 origin: str = "pretrain"):
        super().__init__()
        depth = backbone.config.depth
        if not layer_indices or any(i < 1 or i > depth for i in layer_indices):
            raise ConfigError(f"head layer indices must lie in [1, {depth}]")
        if any(b <= a for a, b in zip(layer_indices, layer_indices[1:])):
            raise ConfigError("head layer indices must be strictly increasing")
        self.backbone = backbone
        self.layer_indices = tuple(layer_indices)
        self.origin = origin
        width = backbone.config.width
        self.heads = nn.ModuleList(CrossAttentionHead(width, attn_heads) for _ in layer_indices)
        self.fuse_norm = nn.LayerNorm(width * len(layer_indices), eps=1e-6)
        self.fuse = nn.Linear(width * len(layer_indices), 1)

    def reset_head_parameters(self, generator: torch.Generator | None = None) -> None:
        for head in self.heads:
            head.reset_parameters(generator)
        self.fuse_norm.reset_parameters()
        nn.init.zeros_(self.fuse.weight)
        nn.init.zeros_(self.fuse.bias)

    def head_parameters(self):
        for module in (self.heads, self.fuse_norm, self.fuse):
            yield from module.parameters()

    def features(self, x: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        acts = self.backbone(x, t, cond, max_depth=self.layer_indices[-1])
        tokens = [head(acts.hidden[i - 1]) for head, i in zip(self.heads, self.layer_indices)]
        return self.fuse_norm(torch.cat(tokens, dim=-1))

    def forward(self, x: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        return self.fuse(self.features(x, t, cond)).squeeze(-1)


def build_discriminator(diffusion_ckpt: Checkpoint, head_cfg: HeadConfig, generator: torch.Generator,
                        allow_distilled: bool = False, dtype: torch.dtype = torch.float32) -> Discriminator:
    """Copy the diffusion backbone and attach freshly initialized logit heads."""
    if diffusion_ckpt.stage != "pretrain":
        if not (allow_distilled and diffusion_ckpt.stage == "distill"):
            raise ConfigError(
                f"discriminator backbone must come from the pretrain checkpoint, got stage "
                f"{diffusion_ckpt.stage!r} (set apt.allow_distilled_disc_init to run that ablation)"
            )
    backbone = diffusion_ckpt.build_model(dtype)
    layers = head_cfg.resolved(backbone.config.depth)
    disc = Discriminator(backbone, layers, head_cfg.attn_heads, origin=diffusion_ckpt.stage).to(dtype)
    disc.reset_head_parameters(generator)
    return disc


def discriminator_from_model(model: DiT, layer_indices: tuple[int, ...], generator: torch.Generator,
                             attn_heads: int = 1) -> Discriminator:
    disc = Discriminator(copy.deepcopy(model), layer_indices, attn_heads)
    disc.to(next(model.parameters()).dtype)
    disc.reset_head_parameters(generator)
    return disc


def discriminator_logit(disc: Discriminator, x: Tensor, cond: Tensor, s: float,
                        generator: torch.Generator) -> tuple[Tensor, Tensor]:
    """Single-draw estimate of the timestep-ensembled logit; returns ``(logit, t)``."""
    t = sample_shifted_timestep(generator, s, x.shape[0], dtype=x.dtype)
    return disc(x, t, cond), t


def discriminator_logit_expected(disc: Discriminator, x: Tensor, cond: Tensor, s: float, n_quad: int) -> Tensor:
    """Midpoint-rule average of the logit over ``t = shift(u, s)``, ``u`` uniform."""
    if n_quad < 2:
        raise InvalidInputError("n_quad must be >= 2")
    u = (torch.arange(n_quad, dtype=torch.float64) + 0.5) / n_quad
    total = 0.0
    for t in shift(u, s).tolist():
        total = total + disc(x, torch.full((x.shape[0],), t, dtype=x.dtype), cond)
    return total / n_quad
