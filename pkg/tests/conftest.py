import numpy as np
import pytest

from vrise.classifier import RegionOracle, RegionOracleSpec
from vrise.geometry import InspectedArea


@pytest.fixture
def area64() -> InspectedArea:
    return InspectedArea(64, 64)


@pytest.fixture
def rect_image():
    """Dark 64x64 image with one bright rectangle, plus its scorer and box."""
    rect = (16, 16, 40, 40)
    img = np.full((64, 64), 0.1, dtype=np.float32)
    img[16:40, 16:40] = 0.9
    oracle = RegionOracle(RegionOracleSpec(rects=(rect,), num_classes=3))
    return img, oracle, rect
