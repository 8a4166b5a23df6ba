"""Small class-conditional diffusion transformer.

One network class serves three roles: the flow-matching teacher, the one-step
generator ``G(z, c) = z - v(z, 1, c)``, and the discriminator backbone. Samples
are channel-last tensors shaped ``(batch, t', h', w', c')``; 2D points use
``(batch, 1, 1, 1, 2)`` and become a single token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from apt_lab.config import ModelConfig
from apt_lab.errors import InvalidInputError


# multiplier on t before the sinusoidal embedding; t itself lives in [0, 1]
TIME_SCALE = 10.0


def _check_sample(x: Tensor, config: ModelConfig) -> None:
    if x.dim() != 5 or tuple(x.shape[1:]) != tuple(config.data_shape):
        raise InvalidInputError(
            f"sample shape {tuple(x.shape)} does not match (batch, *{tuple(config.data_shape)})"
        )


def patchify(x: Tensor, config: ModelConfig) -> Tensor:
    """(B, 1, H, W, C) -> (B, tokens, token_dim), row-major over patches."""
    _check_sample(x, config)
    b, _, h, w, c = x.shape
    if config.is_point:
        return x.reshape(b, 1, c)
    p = config.patch_size
    if h % p or w % p:
        raise InvalidInputError(f"patch size {p} does not divide {h}x{w}")
    x = x.reshape(b, h // p, p, w // p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, config: ModelConfig) -> Tensor:
    b = tokens.shape[0]
    _, h, w, c = config.data_shape
    if tokens.shape[1:] != (config.token_count, config.token_dim):
        raise InvalidInputError(f"token tensor {tuple(tokens.shape)} does not match the model config")
    if config.is_point:
        return tokens.reshape(b, 1, 1, 1, c)
    p = config.patch_size
    x = tokens.reshape(b, h // p, w // p, p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, 1, h, w, c)


def sincos_pos_embed_2d(width: int, gh: int, gw: int) -> Tensor:
    """Fixed 2D sine-cosine position table, shape (gh * gw, width)."""
    if width % 4:
        raise InvalidInputError("width must be divisible by 4 for 2D sincos position embeddings")
    quarter = width // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(
        torch.arange(gh, dtype=torch.float64), torch.arange(gw, dtype=torch.float64), indexing="ij"
    )
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    table = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return table.float()


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0, scale: float = TIME_SCALE) -> Tensor:
    """Sinusoidal features of ``scale * t``.

    The fastest channel turns ``scale`` radians over the unit interval, so
    functions of ``t`` stay smooth enough for low-order quadrature.
    """
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (t * scale)[:, None] * freqs[None]
    emb = torch.cat([args.cos(), args.sin()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    # plain softmax attention; supports double backward and float64
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1) @ v


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Single-stream DiT block with adaLN-Zero conditioning."""

    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(c).chunk(6, dim=-1)
        x = x + gate1.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift1, scale1))
        x = x + gate2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.linear = nn.Linear(width, out_dim)

    def features(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return modulate(self.norm(x), shift, scale)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        return self.linear(self.features(x, c))


@dataclass
class BackboneActivations:
    hidden: list[Tensor]  # one (B, tokens, width) tensor per block, in depth order
    velocity: Tensor | None  # shaped like the input sample; None when stopped early
    cond: Tensor  # (B, width) conditioning vector, used by the layer probes


class DiT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.width
        self.embed = nn.Linear(config.token_dim, w)
        if config.is_point:
            self.register_buffer("pos", torch.zeros(1, 1, w), persistent=False)
        else:
            gh, gw = config.grid
            self.register_buffer("pos", sincos_pos_embed_2d(w, gh, gw)[None], persistent=False)
        self.t_mlp = nn.Sequential(nn.Linear(config.freq_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.class_embed = nn.Embedding(config.num_classes + 1, w)
        self.blocks = nn.ModuleList(Block(w, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.final = FinalLayer(w, config.token_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.class_embed.weight, std=0.02)
        nn.init.normal_(self.t_mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_mlp[2].weight, std=0.02)
        for block in self.blocks:
            nn.init.zeros_(block.ada[-1].weight)
            nn.init.zeros_(block.ada[-1].bias)
        nn.init.zeros_(self.final.ada[-1].weight)
        nn.init.zeros_(self.final.ada[-1].bias)
        nn.init.zeros_(self.final.linear.weight)
        nn.init.zeros_(self.final.linear.bias)

    def condition(self, t: Tensor, cond: Tensor) -> Tensor:
        return self.t_mlp(timestep_embedding(t, self.config.freq_dim)) + self.class_embed(cond)

    def forward(self, x: Tensor, t: Tensor | float, cond: Tensor, max_depth: int | None = None) -> BackboneActivations:
        """Run the blocks and output head; ``max_depth`` stops early and skips the velocity."""
        _check_sample(x, self.config)
        b = x.shape[0]
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        if t.dim() == 0:
            t = t.expand(b)
        if t.shape != (b,):
            raise InvalidInputError(f"t must be a scalar or shape ({b},)")
        if bool(((t < 0) | (t > 1)).any()):
            raise InvalidInputError("t must lie in [0, 1]")
        cond = torch.as_tensor(cond, dtype=torch.long, device=x.device)
        if cond.dim() == 0:
            cond = cond.expand(b)
        if bool(((cond < 0) | (cond > self.config.num_classes)).any()):
            raise InvalidInputError(f"condition must lie in [0, {self.config.num_classes}]")
        c = self.condition(t, cond)
        h = self.embed(patchify(x, self.config)) + self.pos.to(x.dtype)
        hidden = []
        depth = self.config.depth if max_depth is None else max_depth
        for block in self.blocks[:depth]:
            h = block(h, c)
            hidden.append(h)
        velocity = unpatchify(self.final(h, c), self.config) if depth == self.config.depth else None
        return BackboneActivations(hidden=hidden, velocity=velocity, cond=c)


def backbone_forward(model: DiT, x: Tensor, t: Tensor | float, cond: Tensor) -> BackboneActivations:
    return model(x, t, cond)


def velocity(model: DiT, x: Tensor, t: Tensor | float, cond: Tensor) -> Tensor:
    return model(x, t, cond).velocity


def cfg_velocity(model: DiT, z: Tensor, t: Tensor | float, cond: Tensor, scale: float) -> Tensor:
    """Classifier-free guided velocity ``v_null + scale * (v_cond - v_null)``."""
    cond = torch.as_tensor(cond, dtype=torch.long, device=z.device)
    if scale == 1.0:
        return velocity(model, z, t, cond)
    null = torch.full_like(cond.expand(z.shape[0]), model.config.null_class)
    v_null = velocity(model, z, t, null)
    if scale == 0.0:
        return v_null
    v_cond = velocity(model, z, t, cond)
    return v_null + scale * (v_cond - v_null)


def generator_forward(model: DiT, z: Tensor, cond: Tensor) -> Tensor:
    """One-step sample: ``z - v(z, T=1, c)``."""
    return z - velocity(model, z, 1.0, cond)


def sample_prediction(model: DiT, x_t: Tensor, t: Tensor, cond: Tensor) -> Tensor:
    """Clean-sample estimate ``x_t - t * v(x_t, t, c)``; equals ``z - v`` at t = 1."""
    t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device)
    if t.dim() == 0:
        t = t.expand(x_t.shape[0])
    return x_t - t.view(-1, 1, 1, 1, 1) * velocity(model, x_t, t, cond)
