"""The ten acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL] criterion N: ...`` line and the
lines are repeated in an "acceptance criteria" section at the end of the run.
Criteria 4 and 5 train models end to end and are marked ``slow``; criterion 5
shares its runs with the directional checks in ``test_directional.py``.
"""
from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
import torch

from apt_lab.cli import EXIT_OK, main
from apt_lab.config import OptimizerConfig
from apt_lab.discriminator import Discriminator, discriminator_logit, discriminator_logit_expected
from apt_lab.losses import approx_r1, d_loss_terms, exact_r1_oracle, flow_matching_loss, g_loss
from apt_lab.metrics import energy_distance, feature_frechet, preference_score
from apt_lab.model import DiT, generator_forward
from apt_lab.schedules import shift, shift_inverse
from apt_lab.training import OptimizerState, ema_update, optimizer_step

from conftest import ACCEPTANCE_LINES, DESK_SEEDS, make_small_run, perturb, tiny_config
from oracles import central_difference, ema_closed_form, energy_distance_bruteforce, rmsprop_reference


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def tanh_critic(seed: int, dim: int, hidden: int = 8):
    g = torch.Generator().manual_seed(seed)
    w1 = torch.randn(dim, hidden, generator=g, dtype=torch.float64)
    b1 = torch.randn(hidden, generator=g, dtype=torch.float64)
    a = torch.randn(hidden, generator=g, dtype=torch.float64)
    w2 = torch.randn(hidden, generator=g, dtype=torch.float64) / math.sqrt(hidden)

    def critic(x, t, cond):
        h = torch.tanh(x.reshape(x.shape[0], -1) @ w1 + b1 + t.view(-1, 1) * a)
        return h @ w2

    return critic


def random_discriminator(seed: int) -> Discriminator:
    backbone = perturb(DiT(tiny_config(num_classes=4)).double(), scale=0.3, seed=seed)
    disc = Discriminator(backbone, (1, 2, 3)).double()
    return perturb(disc, scale=0.3, seed=seed + 1000)


def critic_suite(n: int = 20):
    """``n`` small smooth critics: tanh MLPs of several widths plus random discriminators."""
    out = []
    for i in range(n):
        if i % 4 == 3:
            disc = random_discriminator(i)
            out.append((disc, (1, 1, 1, 2), torch.tensor([i % 4])))
        else:
            dim = (2, 4, 8)[i % 3]
            out.append((tanh_critic(i, dim), (dim,), None))
    return out


# -- 1 -----------------------------------------------------------------------

def test_criterion_01_approx_r1_matches_scaled_r1(verdict):
    start = time.perf_counter()
    n = 100_000
    worst = {1e-3: 0.0, 1e-2: 0.0}
    for i, (critic, shape, cond) in enumerate(critic_suite()):
        g = torch.Generator().manual_seed(10_000 + i)
        x = torch.randn(1, *shape, generator=g, dtype=torch.float64)
        t = torch.rand(1, generator=g, dtype=torch.float64)
        exact = exact_r1_oracle(critic, x, cond, t).item()
        xs, ts = x.expand(n, *shape), t.expand(n)
        cs = None if cond is None else cond.expand(n)
        with torch.no_grad():
            clean = critic(xs[:1], ts[:1], None if cs is None else cs[:1]).expand(n)
            for sigma in worst:
                est = approx_r1(critic, xs, cs, sigma, torch.Generator().manual_seed(i), t=ts,
                                logit_clean=clean).item() / sigma ** 2
                worst[sigma] = max(worst[sigma], abs(est / exact - 1))
    elapsed = time.perf_counter() - start
    ok = worst[1e-3] < 0.05 and worst[1e-2] < 0.10 and elapsed < 120
    verdict(1, ok, f"20 critics, 1e5 draws: max rel err {worst[1e-3]:.4f} at sigma=1e-3 (< 0.05), "
                   f"{worst[1e-2]:.4f} at sigma=1e-2 (< 0.10), {elapsed:.1f}s (< 120s)")


# -- 2 -----------------------------------------------------------------------

def test_criterion_02_exact_r1_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    linear_err = 0.0
    for dim in (1, 2, 5, 8, 16):
        for _ in range(4):
            w = torch.as_tensor(rng.normal(size=dim))
            x = torch.as_tensor(rng.normal(size=(6, dim)))
            r1 = exact_r1_oracle(lambda v, t, c: v @ w, x, None)
            linear_err = max(linear_err, (r1 - w.square().sum()).abs().max().item())
    fd_err = 0.0
    for i, (critic, shape, cond) in enumerate(critic_suite()):
        g = torch.Generator().manual_seed(20_000 + i)
        x = torch.randn(1, *shape, generator=g, dtype=torch.float64)
        t = torch.rand(1, generator=g, dtype=torch.float64)
        r1 = exact_r1_oracle(critic, x, cond, t).item()

        def f(v):
            with torch.no_grad():
                return critic(torch.as_tensor(v).view(1, *shape), t, cond).item()

        ref = float((central_difference(f, x.reshape(-1).numpy()) ** 2).sum())
        fd_err = max(fd_err, abs(r1 - ref) / ref)
    elapsed = time.perf_counter() - start
    ok = linear_err <= 1e-10 and fd_err < 1e-4 and elapsed < 60
    verdict(2, ok, f"linear critics max |R1 - ||w||^2| = {linear_err:.2e} (<= 1e-10); "
                   f"finite-difference max rel err {fd_err:.2e} (< 1e-4); {elapsed:.1f}s")


# -- 3 -----------------------------------------------------------------------

def test_criterion_03_shift_suite(verdict):
    rng = np.random.default_rng(0)
    s = rng.uniform(1.0, 50.0, 10_000)
    t1, t2 = np.sort(rng.uniform(0.0, 1.0, (2, 10_000)), axis=0)
    t2 = np.where(t2 == t1, np.nextafter(t1, 2.0), t2)
    y1 = np.array([shift(a, v) for a, v in zip(t1, s)])
    y2 = np.array([shift(b, v) for b, v in zip(t2, s)])
    monotone = bool(np.all(y1 < y2))
    endpoints = all(shift(0.0, v) == 0.0 and shift(1.0, v) == 1.0 for v in s)
    identity = bool(np.all(shift(t1, 1.0) == t1))
    round_trip = float(np.max(np.abs(np.array([shift_inverse(y, v) for y, v in zip(y1, s)]) - t1)))
    exact = shift(0.5, 12.0) == 6 / 6.5
    ok = monotone and endpoints and identity and round_trip < 1e-12 and exact
    verdict(3, ok, f"endpoints {endpoints}, strictly monotone on 1e4 pairs {monotone}, identity at s=1 {identity}, "
                   f"inverse round trip {round_trip:.1e} (< 1e-12), shift(0.5, 12) == 6/6.5 {exact}")


# -- 4 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_04_collapse_ablation(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("APT_LAB_OUT", str(tmp_path))
    start = time.perf_counter()
    codes = [main([stage, "preset=ar1"]) for stage in ("pretrain", "distill", "ablate")]
    elapsed = time.perf_counter() - start
    rows = [json.loads(line) for line in (tmp_path / "ar1" / "ablate" / "children.jsonl").read_text().splitlines()]
    counts = {lam: sum(r["collapsed"] for r in rows if r["values"]["apt.lambda"] == lam) for lam in (0.0, 100.0)}
    runs = {lam: sum(r["values"]["apt.lambda"] == lam for r in rows) for lam in (0.0, 100.0)}
    ok = (codes == [EXIT_OK] * 3 and runs == {0.0: 5, 100.0: 5} and counts[0.0] > counts[100.0]
          and counts[0.0] >= 1 and elapsed <= 1800)
    verdict(4, ok, f"collapsed runs lambda=0: {counts[0.0]}/5, lambda=100: {counts[100.0]}/5 "
                   f"(need 0 > 100 and >= 1 at 0); {elapsed / 60:.1f} min (<= 30)")


# -- 5 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_05_stage_ordering(verdict, desk_runs):
    per_seed = []
    for seed in DESK_SEEDS:
        lines = (desk_runs[seed] / "eval" / "metrics.jsonl").read_text().splitlines()
        rec = {r["stage"]: r for r in map(json.loads, lines)}
        teacher, cd, apt = rec["pretrain"], rec["distill"], rec["apt_ema"]
        checks = (cd["energy_distance"] > teacher["energy_distance"],
                  apt["energy_distance"] <= cd["energy_distance"],
                  apt["mode_coverage"] >= cd["mode_coverage"])
        per_seed.append((checks, teacher, cd, apt))
    elapsed = desk_runs["seconds"]
    wins = [sum(c[i] for c, *_ in per_seed) for i in range(3)]
    ok = all(w >= 2 for w in wins) and elapsed <= 3600
    detail = "; ".join(f"seed {s}: ED teacher {t['energy_distance']:.4f} / CD {c['energy_distance']:.4f} / "
                       f"APT {a['energy_distance']:.4f}, coverage CD {c['mode_coverage']:.3f} APT "
                       f"{a['mode_coverage']:.3f}" for s, (_, t, c, a) in zip(DESK_SEEDS, per_seed))
    verdict(5, ok, f"seed majorities CD>teacher {wins[0]}/3, APT<=CD {wins[1]}/3, coverage APT>=CD {wins[2]}/3; "
                   f"{elapsed / 60:.1f} min. {detail}")


# -- 6 -----------------------------------------------------------------------

def test_criterion_06_optimizer_and_ema(verdict):
    rng = np.random.default_rng(0)
    cfg = OptimizerConfig()
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) * rng.uniform(0.01, 10) for _ in range(100)]
    state = OptimizerState.init([torch.tensor(p0)])
    for g in grads:
        optimizer_step(state, [torch.tensor(g)], cfg, lr=0.01)
    ref = rmsprop_reference(p0, grads, 0.01, cfg.beta2, cfg.eps)
    opt_err = float(np.abs(state.params[0].numpy() - ref).max())
    ema_err = 0.0
    for decay in (0.0, 0.5, 0.9, 0.995, 1.0):
        ema0 = rng.normal(size=(5,))
        params = [rng.normal(size=(5,)) for _ in range(50)]
        ema = torch.tensor(ema0)
        for p in params:
            ema_update([ema], [torch.tensor(p)], decay)
        ema_err = max(ema_err, float(np.abs(ema.numpy() - ema_closed_form(ema0, params, decay)).max()))
    ok = opt_err <= 1e-12 and ema_err <= 1e-10
    verdict(6, ok, f"optimizer vs recurrence over 100 steps {opt_err:.1e} (<= 1e-12); "
                   f"EMA vs closed form {ema_err:.1e} (<= 1e-10)")


# -- 7 -----------------------------------------------------------------------

def test_criterion_07_ensemble_unbiased(verdict):
    start = time.perf_counter()
    n = 10_000
    z_scores = []
    for seed, s in zip(range(5), (1.0, 2.0, 3.0, 6.0, 12.0)):
        disc = random_discriminator(100 + seed)
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 1, 1, 1, 2, generator=g, dtype=torch.float64)
        c = torch.tensor([seed % 4])
        with torch.no_grad():
            logits, _ = discriminator_logit(disc, x.expand(n, 1, 1, 1, 2), c.expand(n), s,
                                            torch.Generator().manual_seed(50 + seed))
            quad = discriminator_logit_expected(disc, x, c, s, 64).item()
        se = logits.std().item() / math.sqrt(n)
        z_scores.append(abs(logits.mean().item() - quad) / se)
    elapsed = time.perf_counter() - start
    ok = max(z_scores) < 3 and elapsed < 300
    verdict(7, ok, f"5 discriminators, |MC mean - quadrature| / SE = {', '.join(f'{z:.2f}' for z in z_scores)} "
                   f"(< 3); {elapsed:.1f}s")


# -- 8 -----------------------------------------------------------------------

def _fd_check(loss_fn, params) -> float:
    """Largest relative error between autograd and central differences on the largest gradient entries."""
    grads = torch.autograd.grad(loss_fn(), params)
    worst = 0.0
    for p, grad in zip(params, grads):
        flat, gflat = p.data.view(-1), grad.reshape(-1)
        for idx in gflat.abs().argsort(descending=True)[:3].tolist():
            orig = flat[idx].item()

            def f(v):
                flat[idx] = float(v[0])
                with torch.no_grad():
                    return loss_fn().item()

            fd = central_difference(f, np.array([orig]))[0]
            flat[idx] = orig
            worst = max(worst, abs(gflat[idx].item() - fd) / max(abs(fd), 1e-8))
    return worst


def test_criterion_08_gradient_integrity(verdict):
    start = time.perf_counter()
    model = perturb(DiT(tiny_config(width=16, num_classes=4)).double(), scale=0.2, seed=1)
    disc = random_discriminator(7)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 1, 1, 1, 2, generator=g, dtype=torch.float64)
    z = torch.randn(4, 1, 1, 1, 2, generator=g, dtype=torch.float64)
    t = torch.tensor([0.1, 0.4, 0.6, 0.95], dtype=torch.float64)
    c = torch.tensor([0, 1, 2, 4])
    gen_params = [model.blocks[0].attn.proj.weight, model.blocks[-1].mlp[0].weight, model.final.linear.weight,
                  model.t_mlp[0].weight, model.class_embed.weight]
    disc_params = [disc.fuse.weight, disc.heads[0].query, disc.backbone.blocks[1].attn.qkv.weight]
    c_disc = c.clamp(max=3)
    losses = {
        "flow_matching": (lambda: flow_matching_loss(model, x, z, t, c), gen_params),
        "d_loss": (lambda: sum(v.mean() for v in d_loss_terms(disc(x, t, c_disc),
                                                              disc(generator_forward(model, z, c).detach(),
                                                                   t, c_disc))), disc_params),
        "g_loss": (lambda: g_loss(disc(generator_forward(model, z, c), t, c_disc)).mean(), gen_params),
        "approx_r1": (lambda: approx_r1(disc, x, c_disc, 0.05, torch.Generator().manual_seed(3), t=t), disc_params),
    }
    errors = {name: _fd_check(fn, params) for name, (fn, params) in losses.items()}
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-4 and elapsed < 300
    verdict(8, ok, ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f" (< 1e-4, width 16); {elapsed:.1f}s")


# -- 9 -----------------------------------------------------------------------

def test_criterion_09_metric_oracles(verdict):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(500, 2)), rng.normal(0.4, 1.3, size=(500, 2))
    ed_err = abs(energy_distance(a, b) - energy_distance_bruteforce(a, b))
    fd_self = abs(feature_frechet(a, a))
    pref = preference_score(50, 30, 20)
    ok = ed_err <= 1e-12 and fd_self < 1e-8 and abs(pref - 0.30) < 1e-12
    verdict(9, ok, f"energy distance vs O(n^2) loop on n=500 {ed_err:.1e} (<= 1e-12); "
                   f"feature_frechet(a, a) = {fd_self:.1e} (< 1e-8); preference(50, 30, 20) = {pref:.2f}")


# -- 10 ----------------------------------------------------------------------

def test_criterion_10_reproducibility(verdict, tmp_path):
    from apt_lab.config import dump_config

    cfg_path = tmp_path / "run.yaml"
    dump_config(make_small_run(), cfg_path)
    files = ("pretrain/log.jsonl", "distill/log.jsonl", "apt/log.jsonl", "eval/metrics.jsonl")
    mismatched = []
    for seed in (0, 11):
        for copy in ("a", "b"):
            for stage in ("pretrain", "distill", "apt", "eval"):
                assert main([stage, "--config", str(cfg_path), f"out_dir={tmp_path / copy}", f"seed={seed}",
                             f"run_name=s{seed}"]) == EXIT_OK
        for rel in files:
            if (tmp_path / "a" / f"s{seed}" / rel).read_bytes() != (tmp_path / "b" / f"s{seed}" / rel).read_bytes():
                mismatched.append(f"seed {seed} {rel}")
    differ = (tmp_path / "a" / "s0" / "apt/log.jsonl").read_bytes() != (tmp_path / "a" / "s11" / "apt/log.jsonl").read_bytes()
    ok = not mismatched and differ
    verdict(10, ok, f"2 seeds x 4 logs byte-identical across repeated runs: {not mismatched}"
                    + (f" (mismatch: {', '.join(mismatched)})" if mismatched else "")
                    + f"; different seeds give different logs: {differ}")
