import numpy as np
import pytest

from ashpix.arch import ArchitectureSpec
from ashpix.pipeline import ImagePair, Satellite


@pytest.fixture(scope="session")
def tiny_arch() -> ArchitectureSpec:
    # 32x32: four encoder stages, 2x2 patch map; fast enough for unit tests
    return ArchitectureSpec.default(32)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_pair(rng: np.random.Generator, size: int = 32,
                satellite: Satellite = Satellite.GOES16,
                identifier: str = "pair.png") -> ImagePair:
    combined = rng.integers(0, 256, (size, 2 * size, 3), dtype=np.uint8)
    return ImagePair(combined, satellite, identifier=identifier)


@pytest.fixture()
def make_pairs(rng):
    def _make(n: int, size: int = 32) -> list[ImagePair]:
        return [random_pair(rng, size, identifier=f"goes16_{i:04d}.png")
                for i in range(n)]

    return _make


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """A small deterministic synthetic dataset shared across tests."""
    from ashpix.synth import SynthConfig, generate

    root = tmp_path_factory.mktemp("synthdata")
    pairs = generate(SynthConfig(count=10, image_size=(32, 32), seed=99), root)
    return root, pairs
