import numpy as np
import pytest
import torch

from motionxfer import synthworld as sw
from motionxfer.geometry import GeometryConfig
from motionxfer.texture import TextureConfig
from motionxfer.trainer import StageSchedule, TrainConfig

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True)
    yield


TINY_WORLD = sw.WorldConfig(image_size=32, atlas_size=16)


def tiny_geometry(**kw) -> GeometryConfig:
    base = dict(channels=(4, 8, 8, 8, 8), decoder_kernel=3, resblocks=1)
    base.update(kw)
    return GeometryConfig(**base)


def tiny_texture(**kw) -> TextureConfig:
    base = dict(atlas_size=16, channels=(4, 8, 8, 8), resblocks=1)
    base.update(kw)
    return TextureConfig(**base)


def tiny_train(**kw) -> TrainConfig:
    base = dict(
        lr=1e-3,
        init_geometry=StageSchedule(2, (1,), 4),
        init_texture=StageSchedule(2, (1,), 4, steps=3),
        multivideo=StageSchedule(2, (1,), 4),
        b_train=2,
        val_frames=4,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    cfg = sw.DatasetConfig(world=TINY_WORLD, persons_train=2, persons_test=2,
                           frames_per_person=20, frames_per_test_person=20, seed=3)
    return sw.generate_dataset(cfg, tmp_path_factory.mktemp("tiny") / "data")


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return sw.Dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria record one line each here; the lines are echoed at the
# end of the run so they survive output capture.
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
