import pytest

from rfuda import rng as rngs
from rfuda.config import RunConfig
from rfuda.model import ModelConfig
from rfuda.synth import SynthSpec, synth_generate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        grid=4, frames=2, class_count=3, conv_kernels=2, kernel_size=3, pool=2,
        dense_widths=(5, 4), gru_hidden=3, head_width=3,
    )


@pytest.fixture
def tiny_frames():
    """Three random non-negative [T=2, 4, 4] samples."""
    return rngs.stream(7, "tiny-frames").random((3, 2, 4, 4))


@pytest.fixture
def tiny_synth_spec():
    return SynthSpec(
        class_count=3, grid=8, frames=4, environments=1, subjects=2, locations=1, orientations=2,
        location_shift=0.5,
    )


@pytest.fixture
def tiny_dataset(tiny_synth_spec):
    return synth_generate(tiny_synth_spec, seed=0)


@pytest.fixture
def tiny_run_config(tmp_path):
    return RunConfig(
        synth=True, class_count=3, split_factor="orientation", held_value="o2",
        synth_grid=8, synth_frames=4, synth_environments=1, synth_subjects=2, synth_locations=1,
        synth_orientations=2, synth_location_shift=0.5,
        conv_kernels=2, dense_widths=(6, 5), gru_hidden=4, head_width=4,
        batch_size=2, mu=1, epochs=2, tau0=0.3, out_dir=str(tmp_path / "run"),
    )
