"""Evaluation records and the on-disk report: metrics file, summary table, figures."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from apt_lab import plotting
from apt_lab.checkpoint import Checkpoint
from apt_lab.config import EvalConfig
from apt_lab.data import DataSource, mode_centers
from apt_lab.errors import InvalidInputError
from apt_lab.metrics import RandomFeatures, energy_distance, feature_frechet, mode_coverage
from apt_lab.model import generator_forward
from apt_lab.schedules import euler_sample
from apt_lab.training import sample_multistep, stage_generator

RECORD_FIELDS = ("run_id", "stage", "n_steps_used", "energy_distance", "mode_coverage", "frechet_feature",
                 "collapse_flag", "seed")


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    stage: str
    n_steps_used: int
    energy_distance: float
    mode_coverage: float | None  # covered / n_modes; None for image data
    frechet_feature: float
    collapse_flag: bool
    seed: int

    def __post_init__(self):
        if not self.energy_distance >= 0:
            raise InvalidInputError(f"energy_distance must be >= 0, got {self.energy_distance}")
        if self.mode_coverage is not None and not 0 <= self.mode_coverage <= 1:
            raise InvalidInputError(f"mode_coverage must lie in [0, 1], got {self.mode_coverage}")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in RECORD_FIELDS})

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**{k: d[k] for k in RECORD_FIELDS})


@dataclass
class Evaluation:
    record: MetricsRecord
    samples: np.ndarray  # generated, flattened per sample
    real: np.ndarray
    modes_covered: int | None = None
    high_quality: float | None = None


@torch.no_grad()
def generate(ckpt: Checkpoint, z: torch.Tensor, cond: torch.Tensor, n_steps: int, cfg: EvalConfig,
             generator: torch.Generator) -> torch.Tensor:
    """Sample from a checkpoint: Euler with CFG for the pretrained model, the generator path otherwise."""
    model = ckpt.build_model()
    if ckpt.stage == "pretrain":
        return euler_sample(model, z, cond, n_steps, cfg.cfg_scale)
    if n_steps == 1:
        return generator_forward(model, z, cond)
    return sample_multistep(model, z, cond, n_steps, cfg.t_mid, generator)


def evaluate_checkpoint(ckpt: Checkpoint, source: DataSource, cfg: EvalConfig, run_id: str, seed: int,
                        n_steps: int | None = None, collapse_flag: bool = False) -> Evaluation:
    """Score one checkpoint against fresh real samples drawn from the evaluation stream.

    The real set, labels and noise depend only on ``seed``, so checkpoints from
    different stages of one run are compared on identical inputs.
    """
    if n_steps is None:
        n_steps = cfg.euler_steps if ckpt.stage == "pretrain" else cfg.n_steps
    gen = stage_generator(seed, "eval")
    x, c = source.sample(gen, cfg.n_samples)
    z = torch.randn(x.shape, generator=gen)
    out = generate(ckpt, z, c, n_steps, cfg, gen)
    real = x.reshape(len(x), -1).double().numpy()
    fake = out.reshape(len(out), -1).double().numpy()
    ed = energy_distance(fake, real)
    covered = hq = coverage = None
    if source.spec.kind in ("gmm_ring", "checkerboard"):
        covered, hq = mode_coverage(fake, source.spec)
        coverage = covered / len(mode_centers(source.spec))
    features = RandomFeatures(real.shape[1], cfg.feature_dim, seed=0)
    fd = feature_frechet(fake, real, features)
    record = MetricsRecord(run_id=run_id, stage=ckpt.stage, n_steps_used=n_steps,
                           # the unbiased statistic can dip just below zero for matching sets
                           energy_distance=max(ed, 0.0), mode_coverage=coverage,
                           frechet_feature=max(fd, 0.0), collapse_flag=bool(ckpt.meta.get("collapsed", collapse_flag)),
                           seed=seed)
    return Evaluation(record=record, samples=fake, real=real, modes_covered=covered, high_quality=hq)


def write_records(records: Sequence[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in records))
    return path


def read_records(path: str | Path) -> list[MetricsRecord]:
    return [MetricsRecord.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.5g}" if math.isfinite(value) else str(value)
    return str(value)


def summary_table(records: Sequence[MetricsRecord]) -> str:
    header = list(RECORD_FIELDS)
    rows = [[_fmt(getattr(r, k)) for k in header] for r in records]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


@dataclass
class ReportInputs:
    """Optional material for the figures; every field may be left empty."""

    logs: dict[str, list[dict]] = dataclasses.field(default_factory=dict)
    real: np.ndarray | None = None
    samples: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    traversals: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    probe_mse: list[float] | None = None
    collapse_threshold: float = 0.05


def emit_report(records: Sequence[MetricsRecord], out_dir: str | Path,
                inputs: ReportInputs | None = None) -> dict[str, Path]:
    """Write ``metrics.jsonl``, ``summary.txt`` and the figures; returns the written paths by name.

    The loss-curve figure is always drawn. Its collapse-threshold line is present
    exactly when some record carries ``collapse_flag``.
    """
    if not records:
        raise InvalidInputError("emit_report needs at least one record")
    inputs = inputs or ReportInputs()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": write_records(records, out / "metrics.jsonl")}
    summary = out / "summary.txt"
    summary.write_text(summary_table(records))
    paths["summary"] = summary
    threshold = inputs.collapse_threshold if any(r.collapse_flag for r in records) else None
    paths["loss_curves"] = plotting.loss_curves(inputs.logs, out / "loss_curves.svg", threshold=threshold)
    if inputs.samples and inputs.real is not None:
        paths["samples"] = plotting.scatter_overlay(inputs.real, inputs.samples, out / "samples.png")
    if inputs.traversals:
        paths["traversals"] = plotting.traversal_strip(inputs.traversals, out / "traversals.png", real=inputs.real)
    if inputs.probe_mse:
        paths["probe_mse"] = plotting.probe_mse(inputs.probe_mse, out / "probe_mse.svg")
    return paths
