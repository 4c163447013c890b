import numpy as np
import pytest

from core.domain import Resolution, SectionRecord
from core.settings import seed_everything
from models.unet import ClassifierArmConfig, UNetConfig, create_model
from tools.synth_generator import SynthConfig, generate_stack

TINY_SYNTH = SynthConfig(
    seed=3,
    n_sections=4,
    image_size=(512, 512),
    n_dense_bundles=(1, 1),
    n_moderate_bundles=(1, 1),
    n_labeled=2,
    n_heldout=1,
)


def build_section(shape=(64, 64), charting=None, section_id='s000', index=0, macaque='m0',
                  microns_per_pixel=16.0, image=None, rng=None, **kwargs):
    """Section with a uniform light-grey image (or ``image``) and an optional charting."""
    if image is None:
        if rng is None:
            image = np.full(shape + (3,), 200, dtype=np.uint8)
        else:
            image = rng.integers(0, 256, size=shape + (3,), dtype=np.uint8)
    return SectionRecord(
        id=section_id,
        macaque_id=macaque,
        rostrocaudal_index=index,
        image=image,
        resolution=Resolution(microns_per_pixel=microns_per_pixel),
        charting=charting,
        charted=charting is not None,
        **kwargs,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def section_factory():
    return build_section


@pytest.fixture(scope='session')
def synthetic_stack():
    """Four fully charted 512x512 sections of one animal."""
    return generate_stack(TINY_SYNTH)


@pytest.fixture
def tiny_model():
    return create_model(UNetConfig(base_width=4, depth=2), ClassifierArmConfig(fc_sizes=(32, 16)))


@pytest.fixture(autouse=True, scope='session')
def deterministic_torch():
    seed_everything(0, deterministic=True)
