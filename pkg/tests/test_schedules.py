import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from apt_lab.errors import InvalidInputError
from apt_lab.model import DiT
from apt_lab.schedules import (euler_sample, interpolate, sample_shifted_timestep, shift, shift_inverse,
                               velocity_target)

from oracles import shift_reference

unit = st.floats(0.0, 1.0, allow_nan=False)
factor = st.floats(1.0, 100.0, allow_nan=False)


def test_interpolate_endpoints_and_value():
    x, z = torch.randn(3, 2), torch.randn(3, 2)
    assert torch.equal(interpolate(x, z, 0.0), x)
    assert torch.equal(interpolate(x, z, 1.0), z)
    out = interpolate(torch.tensor([0.0, 0.0]), torch.tensor([2.0, 2.0]), 0.25)
    assert torch.equal(out, torch.tensor([0.5, 0.5]))


def test_velocity_target_values():
    x = torch.randn(4, 2)
    assert torch.count_nonzero(velocity_target(x, x)) == 0
    assert torch.equal(velocity_target(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])), torch.tensor([-1.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(t=unit, seed=st.integers(0, 2**16))
def test_path_identity(t, seed):
    g = torch.Generator().manual_seed(seed)
    x, z = torch.randn(5, 2, generator=g, dtype=torch.float64), torch.randn(5, 2, generator=g, dtype=torch.float64)
    torch.testing.assert_close(interpolate(x, z, t) + (1 - t) * velocity_target(x, z), z, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(t=unit, seed=st.integers(0, 2**16), alpha=st.floats(-3, 3))
def test_interpolate_affine_and_velocity_translation_covariant(t, seed, alpha):
    g = torch.Generator().manual_seed(seed)
    x1, x2, z, a = (torch.randn(4, 2, generator=g, dtype=torch.float64) for _ in range(4))
    mix = alpha * x1 + (1 - alpha) * x2
    torch.testing.assert_close(interpolate(mix, z, t),
                               alpha * interpolate(x1, z, t) + (1 - alpha) * interpolate(x2, z, t),
                               rtol=0, atol=1e-10)
    torch.testing.assert_close(velocity_target(x1 + a, z + a), velocity_target(x1, z), rtol=0, atol=1e-12)


def test_interpolate_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        interpolate(torch.zeros(2), torch.zeros(3), 0.5)
    with pytest.raises(InvalidInputError):
        interpolate(torch.zeros(2), torch.zeros(2), 1.2)


def test_shift_fixed_values():
    assert shift(0.5, 12) == 6 / 6.5
    assert shift(0.0, 7.0) == 0.0
    assert shift(1.0, 7.0) == 1.0
    assert shift(0.37, 1.0) == 0.37


def test_shift_rejects_bad_args():
    with pytest.raises(InvalidInputError):
        shift(0.5, 0.5)
    with pytest.raises(InvalidInputError):
        shift(1.5, 2.0)
    with pytest.raises(InvalidInputError):
        shift_inverse(-0.1, 2.0)


@settings(max_examples=200, deadline=None)
@given(t=unit, s=factor)
def test_shift_properties(t, s):
    y = shift(t, s)
    assert 0.0 <= y <= 1.0
    assert y >= t - 1e-15
    assert abs(y - shift_reference(t, s)) <= 1e-15
    assert abs(shift_inverse(y, s) - t) < 1e-12


@settings(max_examples=200, deadline=None)
@given(a=unit, b=unit, s=factor)
def test_shift_monotone(a, b, s):
    if a < b:
        assert shift(a, s) < shift(b, s)


def test_sampled_timesteps_uniform_at_s1():
    t = sample_shifted_timestep(torch.Generator().manual_seed(0), 1.0, 100_000, dtype=torch.float64).numpy()
    assert stats.kstest(t, "uniform").statistic < 0.02


def test_sampled_timestep_mean_matches_quadrature():
    t = sample_shifted_timestep(torch.Generator().manual_seed(1), 12.0, 100_000, dtype=torch.float64).numpy()
    expected, _ = integrate.quad(lambda u: shift_reference(u, 12.0), 0, 1)
    se = t.std(ddof=1) / np.sqrt(len(t))
    assert abs(t.mean() - expected) < 3 * se


def test_sampled_timesteps_seeded():
    a = sample_shifted_timestep(torch.Generator().manual_seed(5), 3.0, 10)
    b = sample_shifted_timestep(torch.Generator().manual_seed(5), 3.0, 10)
    assert torch.equal(a, b)
    assert sample_shifted_timestep(torch.Generator().manual_seed(5), 3.0).dim() == 0


class ConstantField(torch.nn.Module):
    """Velocity ``z0 - x0`` everywhere; stands in for a DiT inside euler_sample."""

    def __init__(self, v):
        super().__init__()
        self.v = v
        from conftest import tiny_config
        self.config = tiny_config()

    def forward(self, x, t, cond, max_depth=None):
        from apt_lab.model import BackboneActivations
        return BackboneActivations(hidden=[], velocity=self.v.expand_as(x).clone(), cond=None)


@pytest.mark.parametrize("n_steps", [1, 2, 7, 25])
def test_euler_integrates_constant_field_exactly(n_steps):
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 1, 1, 1, 2, generator=g, dtype=torch.float64)
    z0 = torch.randn(3, 1, 1, 1, 2, generator=g, dtype=torch.float64)
    field = ConstantField(z0 - x0)
    out = euler_sample(field, z0, torch.tensor([0, 1, 2]), n_steps, 1.0)
    torch.testing.assert_close(out, x0, rtol=0, atol=1e-12)


def test_euler_rejects_zero_steps(tiny_cfg):
    with pytest.raises(InvalidInputError):
        euler_sample(DiT(tiny_cfg), torch.zeros(1, 1, 1, 1, 2), torch.tensor([0]), 0)
