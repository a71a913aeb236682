import numpy as np
import pytest

from floodtile.oracle import gen_terrain, simulate_water_level
from floodtile.patches import DomainImage

TINY_QS = [20.0, 80.0, 140.0, 200.0, 260.0]


@pytest.fixture(scope="session")
def tiny_domain():
    return gen_terrain(5, 64, 64, q_ref=max(TINY_QS))


@pytest.fixture(scope="session")
def tiny_images(tiny_domain):
    return {q: DomainImage.from_rasters(tiny_domain.dem, q, simulate_water_level(tiny_domain, q)) for q in TINY_QS}


def tiny_config(**kw):
    from floodtile.inference import InferenceConfig
    from floodtile.training import TrainConfig

    base = dict(depth=2, width=2, patch_size=16, patches_per_image=4, batch_size=8, max_epochs=2,
                patience=75, lr=1e-3, seed=0,
                validation=InferenceConfig("center_crop", patch_size=16, center_size=8))
    base.update(kw)
    return TrainConfig(**base)


VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, text in sorted(VERDICTS):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
