import copy

import pytest
import torch

from apt_lab.config import ModelConfig, RunConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(depth=3, width=16, heads=2, patch_size=4, num_classes=3, data_shape=(1, 1, 1, 2), freq_dim=16)
    base.update(kw)
    return ModelConfig(**base)


def perturb(model: torch.nn.Module, scale: float = 0.3, seed: int = 0) -> torch.nn.Module:
    """Overwrite every parameter with random values so zero-init layers stop hiding bugs."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_config()


@pytest.fixture
def image_cfg() -> ModelConfig:
    return tiny_config(data_shape=(1, 8, 8, 1))


def make_small_run() -> RunConfig:
    """A few-second end-to-end configuration."""
    cfg = RunConfig()
    cfg.model = tiny_config(num_classes=8)
    cfg.pretrain.steps = 20
    cfg.pretrain.batch_size = 32
    cfg.distill.steps = 10
    cfg.distill.batch_size = 32
    cfg.apt.steps = 12
    cfg.apt.batch_size = 32
    cfg.apt.ema_adopt_step = 8
    cfg.apt.collapse_window = 5
    cfg.eval.n_samples = 200
    cfg.eval.euler_steps = 4
    cfg.eval.traversal_frames = 5
    cfg.eval.traversal_pairs = 2
    cfg.eval.probe_steps = 3
    return copy.deepcopy(cfg)


@pytest.fixture
def small_run() -> RunConfig:
    return make_small_run()


# -- acceptance verdicts -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


# -- shared end-to-end runs --------------------------------------------------

DESK_SEEDS = (0, 1, 2)
DESK_STAGES = ("pretrain", "distill", "apt", "eval")


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The ``desk`` preset through every training stage, eval and traverse, for three seeds.

    Returns ``{seed: run directory}`` plus the wall time of the training and
    evaluation stages under the ``"seconds"`` key.
    """
    import time

    from apt_lab.cli import EXIT_OK, main

    out = tmp_path_factory.mktemp("desk")
    runs: dict = {"seconds": 0.0}
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("APT_LAB_OUT", str(out))
        for seed in DESK_SEEDS:
            args = ["preset=desk", f"seed={seed}", f"run_name=s{seed}"]
            start = time.perf_counter()
            codes = [main([stage, *args]) for stage in DESK_STAGES]
            runs["seconds"] += time.perf_counter() - start
            codes.append(main(["traverse", *args]))
            assert codes == [EXIT_OK] * len(codes), codes
            runs[seed] = out / f"s{seed}"
    return runs
