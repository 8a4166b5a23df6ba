import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from apt_lab.config import DataConfig
from apt_lab.data import DataSource
from apt_lab.diagnostics import (latent_traversal, slerp, teacher_sampler, train_layer_probes,
                                 transition_sharpness)
from apt_lab.errors import InvalidInputError
from apt_lab.model import DiT, generator_forward

from conftest import perturb, tiny_config


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_slerp_endpoints_and_norm(seed, n):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(1, 1, 1, 2, generator=g, dtype=torch.float64), torch.randn(1, 1, 1, 2, generator=g,
                                                                                 dtype=torch.float64)
    b = b / b.norm() * a.norm()
    frames = slerp(a, b, n)
    assert frames.shape == (n, 1, 1, 1, 2)
    assert torch.equal(frames[0], a) and torch.equal(frames[-1], b)
    norms = frames.reshape(n, -1).norm(dim=1)
    torch.testing.assert_close(norms, torch.full_like(norms, a.norm().item()), rtol=1e-9, atol=1e-12)


def test_slerp_parallel_vectors():
    a = torch.tensor([1.0, 2.0])
    frames = slerp(a, 2 * a, 3)
    torch.testing.assert_close(frames[1], 1.5 * a)


def test_slerp_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        slerp(torch.zeros(2), torch.ones(2), 4)
    with pytest.raises(InvalidInputError):
        slerp(torch.ones(2), torch.ones(2), 1)


def test_sharpness():
    smooth = np.linspace(0, 1, 11)[:, None] * np.array([[1.0, 0.0]])
    assert transition_sharpness(smooth) == pytest.approx(0.1)
    step = np.zeros((11, 2))
    step[6:] = [1.0, 0.0]
    assert transition_sharpness(step) == pytest.approx(1.0)
    assert transition_sharpness(np.zeros((4, 2))) == 0.0


def test_traversal_endpoints_match_generator():
    model = perturb(DiT(tiny_config(num_classes=8)), seed=1)
    g = torch.Generator().manual_seed(0)
    za, zb = torch.randn(1, 1, 1, 1, 2, generator=g), torch.randn(1, 1, 1, 1, 2, generator=g)
    tr = latent_traversal(model, za[0], zb[0], cond=2, n_frames=9, source=DataSource(DataConfig()))
    assert tr.frames.shape == (9, 1, 1, 1, 2)
    cond = torch.tensor([2])
    with torch.no_grad():
        np.testing.assert_allclose(tr.frames[0], generator_forward(model, za, cond)[0].numpy(), atol=1e-6)
        np.testing.assert_allclose(tr.frames[-1], generator_forward(model, zb, cond)[0].numpy(), atol=1e-6)
    assert tr.modes.shape == (9,) and tr.modes.max() < 8
    assert 0 <= tr.sharpness


def test_teacher_sampler_traversal_runs():
    model = perturb(DiT(tiny_config(num_classes=8)), seed=2)
    tr = latent_traversal(teacher_sampler(model, 4), torch.randn(1, 1, 1, 2), torch.randn(1, 1, 1, 2), 0, 5)
    assert tr.frames.shape == (5, 1, 1, 1, 2) and tr.modes is None


def test_probes():
    model = perturb(DiT(tiny_config(depth=4, num_classes=8)), seed=3)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    report = train_layer_probes(model, DataSource(DataConfig()), steps=20, generator=torch.Generator().manual_seed(0),
                                batch_size=64, eval_size=256)
    assert len(report.mse) == len(report.probes) == 4
    assert report.mse[-1] < 1e-10
    assert all(np.isfinite(report.mse))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert all(p.requires_grad for p in model.parameters())
