import numpy as np
import pytest

from metabin.data import generate
from metabin.trainer import TrainConfig


@pytest.fixture(scope="session")
def small_dataset():
    return generate(identities_per_domain=6, images_per_identity=4, target_identities=5,
                    target_images_per_identity=3, image_size=8, seed=7)


def small_config(**overrides):
    values = dict(channels=(4, 4, 4), emb_dim=8, samples_per_domain=8, instances=2, epochs=2,
                  warmup_epochs=1, decay_epochs=(1,), seed=3)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_REPORT = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record one PASS/FAIL line; all lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_REPORT, [])

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
