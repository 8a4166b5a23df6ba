"""Linear flow path, timestep shift, and the Euler sampler.

Convention: t = 0 is clean data, t = 1 is pure noise, and the path is
``x_t = (1 - t) x + t z`` with constant velocity ``z - x``.
"""
from __future__ import annotations

import torch
from torch import Tensor

from apt_lab.errors import InvalidInputError
from apt_lab.model import DiT, cfg_velocity


def _as_time(t, like: Tensor) -> Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if bool(((t < 0) | (t > 1)).any()):
        raise InvalidInputError("t must lie in [0, 1]")
    if t.dim() == 1:
        t = t.view(-1, *([1] * (like.dim() - 1)))
    return t


def interpolate(x: Tensor, z: Tensor, t) -> Tensor:
    if x.shape != z.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(z.shape)}")
    t = _as_time(t, x)
    return (1 - t) * x + t * z


def velocity_target(x: Tensor, z: Tensor) -> Tensor:
    if x.shape != z.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(z.shape)}")
    return z - x


def _check_shift_args(t, s) -> None:
    if s < 1:
        raise InvalidInputError(f"shift factor must be >= 1, got {s}")
    tt = torch.as_tensor(t)
    if bool(((tt < 0) | (tt > 1)).any()):
        raise InvalidInputError("t must lie in [0, 1]")


def shift(t, s: float):
    """``s t / (1 + (s - 1) t)``: monotone map of [0, 1] onto itself, biased toward 1."""
    _check_shift_args(t, s)
    return s * t / (1 + (s - 1) * t)


def shift_inverse(y, s: float):
    _check_shift_args(y, s)
    return y / (s - (s - 1) * y)


def sample_shifted_timestep(generator: torch.Generator, s: float, n: int | None = None,
                            dtype: torch.dtype = torch.float32) -> Tensor:
    """Draw ``shift(u, s)`` with ``u ~ U[0, 1]``; a 0-d tensor when ``n`` is None."""
    if s < 1:
        raise InvalidInputError(f"shift factor must be >= 1, got {s}")
    u = torch.rand(() if n is None else (n,), generator=generator, dtype=torch.float64)
    return shift(u, s).to(dtype)


@torch.no_grad()
def euler_sample(model: DiT, z: Tensor, cond: Tensor, n_steps: int, cfg_scale: float = 1.0) -> Tensor:
    """Integrate dx/dt = v from t = 1 down to 0 on a uniform grid."""
    if n_steps < 1:
        raise InvalidInputError("n_steps must be >= 1")
    grid = torch.linspace(1.0, 0.0, n_steps + 1, dtype=torch.float64).tolist()
    x = z
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        v = cfg_velocity(model, x, t_cur, cond, cfg_scale)
        x = x - (t_cur - t_next) * v
    return x
