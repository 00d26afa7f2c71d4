from pathlib import Path

import pytest
import torch

DATA = Path(__file__).parent / "data"

# filled by tests/test_acceptance.py; printed at the end of the session
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def clip_manifest():
    return DATA / "synthetic_clip" / "manifest.json"


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


# small networks so short training runs finish in seconds on one CPU core
TINY = {
    "fomm.detector_block_expansion": 8, "fomm.detector_max_features": 32,
    "fomm.generator_block_expansion": 8, "fomm.generator_max_features": 32, "fomm.num_bottleneck_blocks": 1,
    "fomm.dense_block_expansion": 8, "fomm.dense_max_features": 32, "fomm.batch_size": 2,
    "fomm.log_every": 1, "motion.log_every": 1,
    "motion.block_expansion": 8, "motion.max_features": 32, "motion.audio_channels": 4, "motion.window_T": 16,
    "motion.stage2_frames": 2,
    "head.window_T": 64, "head.batch_size": 1, "head.embed_dim": 16, "head.audio_dim": 16,
    "head.resnet_width": 8, "head.resnet_layers": "1,1,1,1",
}


def tiny_config(**extra):
    from talkhead.training import Config

    return Config.load(None, {**TINY, **extra})


@pytest.fixture(scope="session")
def tiny_checkpoints(tmp_path_factory):
    """fomm / stage-1 / stage-2 / head checkpoints from a few steps of tiny training."""
    from talkhead import training

    manifest = DATA / "synthetic_clip" / "manifest.json"
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    fomm = training.train_fomm(manifest, cfg, root / "fomm", steps=3).checkpoint
    s1 = training.train_motion_stage1(manifest, fomm, cfg, root / "s1", steps=3).checkpoint
    s2 = training.train_motion_stage2(manifest, fomm, s1, cfg, root / "s2", steps=2)
    head = training.train_head(manifest, cfg, root / "head", steps=3).checkpoint
    return {"root": root, "config": cfg, "manifest": manifest, "fomm": fomm, "stage1": s1,
            "stage2": s2.checkpoint, "stage2_result": s2, "head": head}
