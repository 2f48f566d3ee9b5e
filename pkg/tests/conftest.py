import sys
from pathlib import Path

import pytest

from kinet.config import ModelConfig, OptimConfig, RunConfig
from kinet.distill import SyntheticTeacher, precompute_labels
from kinet.pipeline import read_manifest, synth_dataset

sys.path.insert(0, str(Path(__file__).parent))

TINY_MODEL = ModelConfig(
    stem_channels=4,
    branch_channels=(4, 8, 8, 8),
    k_action=4,
    k_scene=4,
    input_hw=(24, 24),
)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifest = synth_dataset(root / "data", n_classes=4, videos_per_class=2, frames_per_video=6, seed=3, frame_hw=(32, 40))
    videos = read_manifest(manifest)
    precompute_labels(videos, SyntheticTeacher(0, TINY_MODEL.k_scene), root / "labels", TINY_MODEL.n_seg)
    return root


@pytest.fixture
def tiny_config():
    return RunConfig(
        model=TINY_MODEL,
        optim=OptimConfig(epochs=2, batch_size=4),
    ).with_overrides({"data.base_hw": (32, 40)})


# (criterion number, line) pairs filled in by test_acceptance
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
