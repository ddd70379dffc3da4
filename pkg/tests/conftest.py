import hypothesis
import pytest
import torch

from ctxdehaze.haze import SynthesisConfig, build_dataset, write_procedural_sources

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """Four 64x64 training pairs and two test pairs from procedural scenes."""
    root = tmp_path_factory.mktemp("desk")
    write_procedural_sources(root / "sources", 6, size=80)
    cfg = SynthesisConfig(
        str(root / "sources"), str(root / "data"), train_count=4, test_count=2,
        crop_size=64, test_fraction=0.34, seed=0,
    )
    manifest = build_dataset(cfg)
    return root / "data" / "manifest.tsv", manifest


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
