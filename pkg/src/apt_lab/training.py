"""Three-stage pipeline: flow-matching pretraining, consistency distillation, adversarial post-training."""
from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import torch
from torch import Tensor, nn

from apt_lab.checkpoint import Checkpoint
from apt_lab.config import OptimizerConfig, RunConfig
from apt_lab.data import DataSource
from apt_lab.discriminator import Discriminator, build_discriminator
from apt_lab.errors import AptLabError, ConfigError, InvalidInputError
from apt_lab.losses import LossBreakdown, approx_r1, consistency_loss, d_loss_terms, flow_matching_loss, g_loss
from apt_lab.model import DiT, generator_forward
from apt_lab.schedules import interpolate, sample_shifted_timestep

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "stage", "d_real", "d_fake", "ar1", "d_total", "g_loss", "lr", "collapse_flag")
_STAGE_STREAM = {"pretrain": 1, "distill": 2, "apt": 3, "eval": 4, "probe": 5}


class DivergenceError(AptLabError):
    """A training loss became non-finite."""


def stage_generator(seed: int, stage: str) -> torch.Generator:
    """Independent, reproducible random stream per (seed, stage)."""
    return torch.Generator().manual_seed(seed * 1_000_003 + _STAGE_STREAM[stage])


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    params: list[Tensor]
    second_moment: list[Tensor]
    step: int = 0

    @classmethod
    def init(cls, params: Iterable[Tensor]) -> "OptimizerState":
        params = list(params)
        return cls(params=params, second_moment=[torch.zeros_like(p) for p in params])


@torch.no_grad()
def optimizer_step(state: OptimizerState, grads: list[Tensor | None], config: OptimizerConfig,
                   lr: float) -> OptimizerState:
    """RMSProp (Adam with beta1 = 0, no bias correction), applied in place.

    ``m <- beta2 m + (1 - beta2) g^2``; ``p <- p - lr g / (sqrt(m) + eps)``.
    """
    if len(grads) != len(state.params):
        raise InvalidInputError("gradient list does not match the parameter list")
    for p, g in zip(state.params, grads):
        if g is not None and g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
    if config.grad_clip is not None:
        norm = torch.sqrt(sum(g.square().sum() for g in grads if g is not None))
        if norm > config.grad_clip:
            grads = [None if g is None else g * (config.grad_clip / norm) for g in grads]
    for p, m, g in zip(state.params, state.second_moment, grads):
        if g is None:
            continue
        m.mul_(config.beta2).addcmul_(g, g, value=1 - config.beta2)
        if config.weight_decay:
            p.mul_(1 - lr * config.weight_decay)
        p.addcdiv_(g, m.sqrt().add_(config.eps), value=-lr)
    state.step += 1
    return state


class RMSProp:
    """Parameter groups with their own learning rates, updated by :func:`optimizer_step`."""

    def __init__(self, groups: list[tuple[Iterable[nn.Parameter], float]], config: OptimizerConfig):
        self.config = config
        self.groups = [(OptimizerState.init(p for p in params if p.requires_grad), lr) for params, lr in groups]

    def step(self, grads: list[list[Tensor | None]] | None = None) -> None:
        for i, (state, lr) in enumerate(self.groups):
            g = grads[i] if grads is not None else [p.grad for p in state.params]
            optimizer_step(state, g, self.config, lr)

    def zero_grad(self) -> None:
        for state, _ in self.groups:
            for p in state.params:
                p.grad = None

    @property
    def params(self) -> list[Tensor]:
        return [p for state, _ in self.groups for p in state.params]


@torch.no_grad()
def ema_update(ema_params: Iterable[Tensor], params: Iterable[Tensor], decay: float) -> None:
    """``ema <- decay * ema + (1 - decay) * params``, elementwise and in place."""
    for e, p in zip(ema_params, params):
        if e.shape != p.shape:
            raise InvalidInputError("EMA and parameter trees do not match")
        e.mul_(decay).add_(p, alpha=1 - decay)


# -- monitoring and logging --------------------------------------------------

class CollapseMonitor:
    """Windowed mean of ``d_real + d_fake``; fires once a full window sits below the threshold."""

    def __init__(self, window: int = 200, threshold: float = 0.05):
        if window < 1:
            raise InvalidInputError("window must be >= 1")
        self.window = window
        self.threshold = threshold
        self.values: deque[float] = deque(maxlen=window)
        self.triggered = False

    @property
    def mean(self) -> float:
        return sum(self.values) / len(self.values) if self.values else float("nan")

    def update(self, gan_loss: float) -> bool:
        self.values.append(float(gan_loss))
        if len(self.values) == self.window and self.mean < self.threshold:
            self.triggered = True
        return self.triggered


def detect_collapse(monitor: CollapseMonitor, loss_record: LossBreakdown | dict) -> bool:
    if isinstance(loss_record, dict):
        value = loss_record["d_real"] + loss_record["d_fake"]
    else:
        value = loss_record.d_real + loss_record.d_fake
    return monitor.update(value)


class MetricsLog:
    """Per-step training records, optionally mirrored to a line-delimited JSON file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")

    def write(self, **fields) -> dict:
        record = {k: fields.get(k) for k in LOG_FIELDS}
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
        return record

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_metrics_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- helpers -----------------------------------------------------------------

def drop_conditions(cond: Tensor, p: float, null_class: int, generator: torch.Generator) -> Tensor:
    if p <= 0:
        return cond
    mask = torch.rand(cond.shape, generator=generator) < p
    return torch.where(mask, torch.full_like(cond, null_class), cond)


def _noise(shape, generator: torch.Generator, dtype=torch.float32) -> Tensor:
    return torch.randn(shape, generator=generator, dtype=dtype)


def _check_finite(value: Tensor, stage: str, step: int, metrics: MetricsLog, lr: float) -> None:
    if not math.isfinite(value.item()):
        metrics.write(step=step, stage=stage, g_loss=None, lr=lr, collapse_flag=False)
        metrics.close()
        raise DivergenceError(f"{stage}: non-finite loss at step {step}")


def _model_config(cfg: RunConfig, source: DataSource):
    model_cfg = copy.deepcopy(cfg.model)
    if tuple(model_cfg.data_shape) != source.data_shape:
        raise ConfigError(f"model.data_shape {tuple(model_cfg.data_shape)} != data shape {source.data_shape}")
    return model_cfg


# -- stages ------------------------------------------------------------------

@dataclass
class StageResult:
    checkpoint: Checkpoint
    records: list[dict]
    ema_checkpoint: Checkpoint | None = None
    collapsed: bool = False
    g_updates: int = 0
    d_updates: int = 0
    extra: dict = field(default_factory=dict)


def pretrain_diffusion(cfg: RunConfig, source: DataSource, log_path: str | Path | None = None) -> StageResult:
    """Flow-matching pretraining with condition dropout (the null class is the CFG negative)."""
    st = cfg.pretrain
    torch.manual_seed(cfg.seed)
    model = DiT(_model_config(cfg, source))
    gen = stage_generator(cfg.seed, "pretrain")
    opt = RMSProp([(model.parameters(), st.lr)], cfg.optimizer)
    metrics = MetricsLog(log_path)
    null = model.config.null_class
    for step in range(1, st.steps + 1):
        x, c = source.sample(gen, st.batch_size)
        c = drop_conditions(c, st.cond_dropout, null, gen)
        z = _noise(x.shape, gen)
        t = sample_shifted_timestep(gen, st.shift_s, st.batch_size)
        loss = flow_matching_loss(model, x, z, t, c)
        _check_finite(loss, "pretrain", step, metrics, st.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        metrics.write(step=step, stage="pretrain", g_loss=loss.item(), lr=st.lr, collapse_flag=False)
    metrics.close()
    ckpt = Checkpoint.from_module(model, model.config, "pretrain", st.steps, cfg.seed, meta={"origin": "init"})
    return StageResult(checkpoint=ckpt, records=metrics.records, g_updates=st.steps)


def distill_consistency(cfg: RunConfig, teacher_ckpt: Checkpoint, source: DataSource,
                        log_path: str | Path | None = None) -> StageResult:
    """Consistency distillation of the CFG-guided teacher on a uniform ``n_segments`` grid."""
    if teacher_ckpt.stage != "pretrain":
        raise ConfigError(f"distillation needs the pretrain checkpoint, got stage {teacher_ckpt.stage!r}")
    st = cfg.distill
    teacher = teacher_ckpt.build_model().requires_grad_(False)
    student = teacher_ckpt.build_model()
    target = teacher_ckpt.build_model().requires_grad_(False)
    gen = stage_generator(cfg.seed, "distill")
    opt = RMSProp([(student.parameters(), st.lr)], cfg.optimizer)
    metrics = MetricsLog(log_path)
    null = student.config.null_class
    n = st.n_segments
    for step in range(1, st.steps + 1):
        x, c = source.sample(gen, st.batch_size)
        c = drop_conditions(c, st.cond_dropout, null, gen)
        z = _noise(x.shape, gen)
        k = torch.randint(1, n + 1, (st.batch_size,), generator=gen).to(x.dtype)
        loss = consistency_loss(student, target, teacher, x, z, (k / n, (k - 1) / n), c, st.cfg_scale)
        _check_finite(loss, "distill", step, metrics, st.lr)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(target.parameters(), student.parameters(), st.target_decay)
        metrics.write(step=step, stage="distill", g_loss=loss.item(), lr=st.lr, collapse_flag=False)
    metrics.close()
    ckpt = Checkpoint.from_module(student, student.config, "distill", st.steps, cfg.seed,
                                  meta={"origin": "pretrain", "cfg_scale": st.cfg_scale})
    return StageResult(checkpoint=ckpt, records=metrics.records, g_updates=st.steps)


def _discriminator_optimizer(disc: Discriminator, cfg: RunConfig) -> RMSProp:
    st = cfg.apt
    backbone_lr = st.lr_discriminator if st.disc_backbone_lr is None else st.disc_backbone_lr
    if st.freeze_disc_backbone or backbone_lr == 0:
        disc.backbone.requires_grad_(False)
        return RMSProp([(disc.head_parameters(), st.lr_discriminator)], cfg.optimizer)
    return RMSProp([(disc.backbone.parameters(), backbone_lr), (disc.head_parameters(), st.lr_discriminator)],
                   cfg.optimizer)


def apt_train(cfg: RunConfig, distilled_ckpt: Checkpoint, diffusion_ckpt: Checkpoint, source: DataSource,
              log_path: str | Path | None = None) -> StageResult:
    """Alternating 1:1 discriminator/generator updates against real data.

    Returns the final generator in ``checkpoint`` and the EMA generator, adopted
    at ``apt.ema_adopt_step`` (or at the last update if training stops earlier),
    in ``ema_checkpoint``. A collapse ends the run with ``collapsed=True``.
    """
    st = cfg.apt
    if distilled_ckpt.stage != "distill":
        raise ConfigError(f"the generator must start from the distill checkpoint, got stage {distilled_ckpt.stage!r}")
    gen = stage_generator(cfg.seed, "apt")
    head_gen = torch.Generator().manual_seed(cfg.seed)
    generator = distilled_ckpt.build_model()
    generator_ema = distilled_ckpt.build_model().requires_grad_(False)
    disc = build_discriminator(diffusion_ckpt, cfg.heads, head_gen, allow_distilled=st.allow_distilled_disc_init)
    if disc.origin != "pretrain":
        warnings.warn(f"discriminator backbone initialized from the {disc.origin!r} stage (ablation)")
    opt_d = _discriminator_optimizer(disc, cfg)
    g_params = list(generator.parameters())
    opt_g = RMSProp([(g_params, st.lr_generator)], cfg.optimizer)
    monitor = CollapseMonitor(st.collapse_window, st.collapse_threshold)
    metrics = MetricsLog(log_path)
    sigma, lam, s = cfg.sigma, st.lam, st.shift_s
    null = generator.config.null_class
    adopted = None
    d_updates = g_updates = 0
    step = 0
    for step in range(1, st.steps + 1):
        # discriminator update: non-saturating terms + lambda * approximated R1 on real data
        x, c = source.sample(gen, st.batch_size)
        c = drop_conditions(c, st.cond_dropout, null, gen)
        z = _noise(x.shape, gen)
        with torch.no_grad():
            fake = generator_forward(generator, z, c)
        t_real = sample_shifted_timestep(gen, s, st.batch_size)
        t_fake = sample_shifted_timestep(gen, s, st.batch_size)
        logit_real = disc(x, t_real, c)
        logit_fake = disc(fake, t_fake, c)
        d_real, d_fake = (v.mean() for v in d_loss_terms(logit_real, logit_fake))
        ar1 = approx_r1(disc, x, c, sigma, gen, t=t_real, logit_clean=logit_real)
        d_total = d_real + d_fake + lam * ar1
        _check_finite(d_total, "apt", step, metrics, st.lr_discriminator)
        opt_d.zero_grad()
        d_total.backward()
        opt_d.step()
        d_updates += 1

        # generator update
        z = _noise(x.shape, gen)
        t_gen = sample_shifted_timestep(gen, s, st.batch_size)
        gl = g_loss(disc(generator_forward(generator, z, c), t_gen, c)).mean()
        _check_finite(gl, "apt", step, metrics, st.lr_generator)
        grads = torch.autograd.grad(gl, g_params)
        opt_g.step([list(grads)])
        g_updates += 1
        ema_update(generator_ema.parameters(), generator.parameters(), st.ema_decay)
        if step == st.ema_adopt_step:
            adopted = Checkpoint.from_module(generator_ema, generator.config, "apt_ema", step, cfg.seed)

        record = LossBreakdown(d_real=d_real.item(), d_fake=d_fake.item(), ar1=ar1.item(),
                               d_total=d_total.item(), g_loss=gl.item(), lam=lam, sigma=sigma)
        collapsed = detect_collapse(monitor, record)
        metrics.write(step=step, stage="apt", d_real=record.d_real, d_fake=record.d_fake, ar1=record.ar1,
                      d_total=record.d_total, g_loss=record.g_loss, lr=st.lr_generator, collapse_flag=collapsed)
        if collapsed and st.stop_on_collapse:
            log.info("apt: collapse detected at step %d (windowed d_real+d_fake %.4f)", step, monitor.mean)
            break
    metrics.close()
    meta = {"origin": "distill", "disc_origin": disc.origin, "collapsed": monitor.triggered}
    final = Checkpoint.from_module(generator, generator.config, "apt", step, cfg.seed, meta=meta)
    if adopted is None:
        adopted = Checkpoint.from_module(generator_ema, generator.config, "apt_ema", step, cfg.seed)
    adopted.meta.update(meta, adopt_step=adopted.step)
    return StageResult(checkpoint=final, records=metrics.records, ema_checkpoint=adopted,
                       collapsed=monitor.triggered, g_updates=g_updates, d_updates=d_updates,
                       extra={"discriminator": disc})


@torch.no_grad()
def sample_multistep(model: DiT, z: Tensor, cond: Tensor, n_steps: int, t_mid: float = 0.5,
                     generator: torch.Generator | None = None) -> Tensor:
    """Zero-shot multi-step use of a one-step generator.

    Each extra step re-noises the current estimate to an intermediate level with
    fresh noise and applies the generator again, still at the final timestep.
    Re-noise levels fall linearly from ``t_mid`` toward 0.
    """
    if n_steps < 1:
        raise InvalidInputError("n_steps must be >= 1")
    if n_steps > 2:
        warnings.warn("more than two steps tends to introduce artifacts")
    x = generator_forward(model, z, cond)
    for k in range(1, n_steps):
        t = t_mid * (n_steps - k) / (n_steps - 1)
        fresh = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        x = generator_forward(model, interpolate(x, fresh, t), cond)
    return x
