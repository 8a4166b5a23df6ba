"""Command-line entry point: ``apt-lab <subcommand> [--config PATH] [key=value ...]``.

Run layout under ``$APT_LAB_OUT`` (or ``out_dir``)::

    <run_name>/<stage>/config.yaml    resolved config used by that stage
    <run_name>/pretrain/model.aptk    + log.jsonl
    <run_name>/distill/model.aptk     + log.jsonl
    <run_name>/apt/model.aptk         final generator; ema.aptk is the adopted EMA copy
    <run_name>/eval/metrics.jsonl     one MetricsRecord per evaluated checkpoint
    <run_name>/traverse/, probe/, report/, ablate/

Exit codes:

    0  success
    2  configuration error (unknown key, bad value, bad usage)
    3  I/O error (unreadable/unwritable file, malformed checkpoint or corpus)
    4  apt run terminated by the collapse monitor
    5  missing prerequisite checkpoint (the message names the stage to run)
    6  training diverged (non-finite loss)
"""
from __future__ import annotations

import argparse
import concurrent.futures
import contextlib
import io
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from apt_lab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from apt_lab.config import RunConfig, apply_values, dump_config, parse_config, resolve_key
from apt_lab.data import DataSource
from apt_lab.diagnostics import latent_traversal, teacher_sampler, train_layer_probes
from apt_lab.errors import (AptLabError, CheckpointFormatError, ConfigError, CorpusFormatError,
                            PrerequisiteError)
from apt_lab.report import MetricsRecord, ReportInputs, emit_report, evaluate_checkpoint, read_records, \
    summary_table, write_records
from apt_lab.training import (DivergenceError, apt_train, distill_consistency, pretrain_diffusion,
                              read_metrics_log, stage_generator)

log = logging.getLogger("apt_lab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_COLLAPSE = 4
EXIT_PREREQUISITE = 5
EXIT_DIVERGED = 6

SUBCOMMANDS = ("pretrain", "distill", "apt", "eval", "traverse", "probe", "ablate", "report")


class CollapseExit(AptLabError):
    """An apt run stopped on the collapse monitor."""


@dataclass
class Run:
    cfg: RunConfig
    root: Path
    # where earlier-stage checkpoints may also be found (ablation children read their parent's)
    fallback: Path | None = None

    def stage_dir(self, stage: str) -> Path:
        path = self.root / stage
        path.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, path / "config.yaml")
        return path

    def find(self, stage: str, name: str = "model.aptk") -> Path:
        for base in (self.root, self.fallback):
            if base is not None and (base / stage / name).exists():
                return base / stage / name
        raise PrerequisiteError(f"no {stage} checkpoint under {self.root}; run `apt-lab {stage}` first")


def output_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get("APT_LAB_OUT") or cfg.out_dir)


def _source(cfg: RunConfig) -> DataSource:
    return DataSource(cfg.data)


# -- stages --------------------------------------------------------------------

def cmd_pretrain(run: Run) -> int:
    out = run.stage_dir("pretrain")
    res = pretrain_diffusion(run.cfg, _source(run.cfg), out / "log.jsonl")
    save_checkpoint(res.checkpoint, out / "model.aptk")
    log.info("pretrain: %d steps, final loss %.4f", res.g_updates, res.records[-1]["g_loss"])
    return EXIT_OK


def cmd_distill(run: Run) -> int:
    teacher = load_checkpoint(run.find("pretrain"))
    out = run.stage_dir("distill")
    res = distill_consistency(run.cfg, teacher, _source(run.cfg), out / "log.jsonl")
    save_checkpoint(res.checkpoint, out / "model.aptk")
    log.info("distill: %d steps, final loss %.4f", res.g_updates, res.records[-1]["g_loss"])
    return EXIT_OK


def cmd_apt(run: Run) -> int:
    distilled = load_checkpoint(run.find("distill"))
    diffusion = load_checkpoint(run.find("pretrain"))
    out = run.stage_dir("apt")
    res = apt_train(run.cfg, distilled, diffusion, _source(run.cfg), out / "log.jsonl")
    save_checkpoint(res.checkpoint, out / "model.aptk")
    save_checkpoint(res.ema_checkpoint, out / "ema.aptk")
    status = {"collapsed": res.collapsed, "g_updates": res.g_updates, "d_updates": res.d_updates,
              "ema_adopt_step": res.ema_checkpoint.step}
    (out / "status.json").write_text(json.dumps(status, sort_keys=True) + "\n")
    if res.collapsed:
        raise CollapseExit(f"apt: collapse detected after {res.g_updates} updates")
    return EXIT_OK


def _eval_targets(run: Run) -> list[tuple[str, Checkpoint]]:
    """Checkpoints trained by this run; an ablation child skips the ones it borrowed from its parent."""
    targets = []
    for stage, name in (("pretrain", "model.aptk"), ("distill", "model.aptk"), ("apt", "ema.aptk")):
        path = run.root / stage / name
        if path.exists():
            targets.append((stage, load_checkpoint(path)))
    if not targets:
        raise PrerequisiteError(f"nothing to evaluate under {run.root}; run `apt-lab pretrain` first")
    return targets


def cmd_eval(run: Run) -> int:
    cfg = run.cfg
    source = _source(cfg)
    out = run.stage_dir("eval")
    records, samples = [], {}
    real = None
    for stage, ckpt in _eval_targets(run):
        ev = evaluate_checkpoint(ckpt, source, cfg.eval, cfg.run_name, cfg.seed)
        records.append(ev.record)
        samples[f"{ckpt.stage}_{ev.record.n_steps_used}"] = ev.samples.astype(np.float32)
        real = ev.real.astype(np.float32)
    write_records(records, out / "metrics.jsonl")
    np.savez(out / "samples.npz", real=real, **samples)
    sys.stdout.write(summary_table(records))
    return EXIT_OK


def cmd_traverse(run: Run) -> int:
    cfg = run.cfg
    source = _source(cfg)
    apt_ckpt = load_checkpoint(run.find("apt", "ema.aptk"))
    teacher_ckpt = load_checkpoint(run.find("pretrain"))
    out = run.stage_dir("traverse")
    gen = stage_generator(cfg.seed, "eval")
    samplers = {"apt": apt_ckpt.build_model(),
                "teacher": teacher_sampler(teacher_ckpt.build_model(), cfg.eval.euler_steps)}
    null = apt_ckpt.config.null_class
    shape = apt_ckpt.config.data_shape
    pairs = [(torch.randn(shape, generator=gen), torch.randn(shape, generator=gen))
             for _ in range(cfg.eval.traversal_pairs)]
    summary, frames = {}, {}
    for name, sampler in samplers.items():
        scores = []
        for i, (z_a, z_b) in enumerate(pairs):
            tr = latent_traversal(sampler, z_a, z_b, null, cfg.eval.traversal_frames, source)
            scores.append(tr.sharpness)
            if i == 0:
                frames[name] = tr.frames.reshape(len(tr.frames), -1)
        summary[name] = {"mean_sharpness": float(np.mean(scores)), "sharpness": scores}
    np.savez(out / "frames.npz", **frames)
    (out / "sharpness.json").write_text(json.dumps(summary, indent=1) + "\n")
    for name, s in summary.items():
        print(f"{name}\tmean_sharpness\t{s['mean_sharpness']:.6g}")
    return EXIT_OK


def cmd_probe(run: Run) -> int:
    cfg = run.cfg
    ckpt = load_checkpoint(run.find("apt", "ema.aptk"))
    out = run.stage_dir("probe")
    report = train_layer_probes(ckpt.build_model(), _source(cfg), cfg.eval.probe_steps,
                                stage_generator(cfg.seed, "probe"), lr=cfg.eval.probe_lr)
    (out / "probe.json").write_text(json.dumps({"mse": report.mse}) + "\n")
    for layer, mse in enumerate(report.mse, start=1):
        print(f"{layer}\t{mse:.6g}")
    return EXIT_OK


def _maybe(path: Path, reader):
    return reader(path) if path.exists() else None


def cmd_report(run: Run) -> int:
    metrics = run.root / "eval" / "metrics.jsonl"
    if not metrics.exists():
        raise PrerequisiteError(f"no evaluation records under {run.root}; run `apt-lab eval` first")
    records = read_records(metrics)
    inputs = ReportInputs(collapse_threshold=run.cfg.apt.collapse_threshold)
    for stage in ("apt",):
        logs = _maybe(run.root / stage / "log.jsonl", read_metrics_log)
        if logs:
            inputs.logs[run.cfg.run_name] = logs
    samples = _maybe(run.root / "eval" / "samples.npz", np.load)
    if samples is not None and samples["real"].shape[1] == 2:
        inputs.real = samples["real"]
        inputs.samples = {k: samples[k] for k in samples.files if k != "real"}
    frames = _maybe(run.root / "traverse" / "frames.npz", np.load)
    if frames is not None:
        inputs.traversals = {k: frames[k] for k in frames.files}
    probe = _maybe(run.root / "probe" / "probe.json", lambda p: json.loads(p.read_text()))
    if probe is not None:
        inputs.probe_mse = probe["mse"]
    out = run.stage_dir("report")
    paths = emit_report(records, out, inputs)
    sys.stdout.write(summary_table(records))
    for name, path in paths.items():
        log.info("report: %s -> %s", name, path)
    return EXIT_OK


# -- ablation ------------------------------------------------------------------

def expand_matrix(matrix: dict) -> list[dict]:
    """Cartesian product of ``{key: [values]}``, in key order then value order."""
    if not matrix:
        return [{}]
    keys = [resolve_key(k) for k in matrix]
    return [dict(zip(keys, combo)) for combo in itertools.product(*matrix.values())]


def child_tag(values: dict) -> str:
    return ",".join(f"{k.rsplit('.', 1)[-1]}={v}" for k, v in values.items())


def _run_child(payload: tuple[dict, str, str, list[str]]) -> dict:
    cfg_dict, root, fallback, stages = payload
    torch.set_num_threads(1)
    cfg = parse_config(overrides=_flat_items(cfg_dict))
    run = Run(cfg, Path(root), Path(fallback))
    collapsed = False
    # per-child tables stay on disk; only the aggregate goes to stdout
    with contextlib.redirect_stdout(io.StringIO()):
        for stage in stages:
            try:
                STAGE_COMMANDS[stage](run)
            except CollapseExit:
                collapsed = True
    return {"root": root, "collapsed": collapsed}


def _flat_items(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict) and f"{prefix}{k}" != "ablate.matrix":
            out.update(_flat_items(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def aggregate_table(rows: list[dict]) -> str:
    """Group child runs by their non-seed settings; count collapses per group."""
    groups: dict[str, list[dict]] = {}
    for row in rows:
        key = child_tag({k: v for k, v in row["values"].items() if k != "seed"}) or "(base)"
        groups.setdefault(key, []).append(row)
    lines = ["setting\truns\tcollapsed\tmean_energy_distance\tmean_mode_coverage"]
    for key, members in groups.items():
        ed = [m["energy_distance"] for m in members if m["energy_distance"] is not None]
        cov = [m["mode_coverage"] for m in members if m["mode_coverage"] is not None]
        lines.append("\t".join([
            key, str(len(members)), str(sum(m["collapsed"] for m in members)),
            f"{np.mean(ed):.6g}" if ed else "-", f"{np.mean(cov):.6g}" if cov else "-",
        ]))
    return "\n".join(lines) + "\n"


def cmd_ablate(run: Run) -> int:
    cfg = run.cfg
    combos = expand_matrix(cfg.ablate.matrix)
    base = cfg.to_dict()
    base["ablate"]["matrix"] = {}
    payloads, children = [], []
    for values in combos:
        child = parse_config(overrides=_flat_items(base))
        apply_values(child, values)
        child.validate()
        tag = child_tag(values) or "base"
        child.run_name = f"{cfg.run_name}/ablate/{tag}"
        root = run.root / "ablate" / tag
        children.append((values, root))
        payloads.append((child.to_dict(), str(root), str(run.root), list(cfg.ablate.stages)))
    if cfg.ablate.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(cfg.ablate.workers) as pool:
            results = list(pool.map(_run_child, payloads))
    else:
        results = [_run_child(p) for p in payloads]
    rows = []
    for (values, root), result in zip(children, results):
        rec = _final_record(root)
        rows.append({"values": values, "tag": root.name, "collapsed": result["collapsed"],
                     "energy_distance": rec.energy_distance if rec else None,
                     "mode_coverage": rec.mode_coverage if rec else None})
    out = run.stage_dir("ablate")
    table = aggregate_table(rows)
    (out / "aggregate.txt").write_text(table)
    (out / "children.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    sys.stdout.write(table)
    return EXIT_OK


def _final_record(root: Path) -> MetricsRecord | None:
    path = root / "eval" / "metrics.jsonl"
    if not path.exists():
        return None
    records = read_records(path)
    return records[-1] if records else None


STAGE_COMMANDS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "apt": cmd_apt,
    "eval": cmd_eval,
    "traverse": cmd_traverse,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apt-lab", description="Desk-scale adversarial post-training lab.",
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="exit codes: 0 ok, 2 config, 3 I/O, 4 collapse, 5 prerequisite, "
                                            "6 diverged")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="YAML run config")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted or unambiguous bare keys, e.g. apt.lambda=0 seed=3")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        # intermixed so overrides may follow --config
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(args.config, args.overrides)
        run = Run(cfg, output_root(cfg) / cfg.run_name)
        return STAGE_COMMANDS[args.subcommand](run)
    except ConfigError as exc:
        print(f"apt-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"apt-lab: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except CollapseExit as exc:
        print(f"apt-lab: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    except DivergenceError as exc:
        print(f"apt-lab: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointFormatError, CorpusFormatError) as exc:
        print(f"apt-lab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
