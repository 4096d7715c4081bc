import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ssrfcn import data as D  # noqa: E402


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """8 live + 8 spoof 32x32 global-texture images."""
    out = tmp_path_factory.mktemp("tiny_synth")
    records, truth = D.synth_generate(D.SynthConfig(num_live=8, num_spoof=8, image_side=32, seed=3), out)
    return out, records, truth


@pytest.fixture(scope="session")
def partial_synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("partial_synth")
    cfg = D.SynthConfig(num_live=6, num_spoof=6, image_side=64, artifact_kind=D.PARTIAL_PATCH,
                        box_side_range=(16, 40), seed=5)
    records, truth = D.synth_generate(cfg, out)
    return out, records, truth, cfg


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
