import numpy as np
import pytest
from PIL import Image

from featprobe_exporter.backbones import WeightsUnavailableError, load_backbone


@pytest.fixture(scope="session")
def convnext_random():
    return load_backbone("convnext", pretrained=False)


@pytest.fixture(scope="session")
def swinv2_random():
    return load_backbone("swinv2", pretrained=False)


@pytest.fixture(scope="session")
def pretrained_convnext():
    try:
        return load_backbone("convnext", pretrained=True)
    except WeightsUnavailableError as exc:
        pytest.skip(f"pretrained weights unavailable: {exc}")


def write_images(directory, n, seed=0, size=64):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        p = directory / f"img{i:02d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths
