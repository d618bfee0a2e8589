import pytest

from fbdet.detector import build_model
from fbdet.feedback import IffConfig
from fbdet.scenes import SceneSpec, gen_dataset
from fbdet.train import train

REFERENCE_SEED = 0
REFERENCE_SPEC = SceneSpec(noise_level=0.25)


@pytest.fixture(scope="session")
def reference_run():
    """One small fixed-seed training run shared by tests that need a model
    that actually detects things. Kept small so the suite stays fast."""
    scenes = gen_dataset(1000, 100, REFERENCE_SPEC)
    cfg = IffConfig(iterations=1)
    result = train(
        build_model(REFERENCE_SEED),
        scenes,
        cfg,
        epochs=12,
        lr=0.01,
        seed=REFERENCE_SEED,
    )
    return result, cfg


@pytest.fixture(scope="session")
def test_scenes():
    return gen_dataset(120, 900, REFERENCE_SPEC)
