import numpy as np
import pytest

from detrefine.types import FeatureBundle


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_bundle(rng, image_id="img0", d_g=8, d_r=8, d_p=8, d_t=6, grid=(14, 14)):
    """Random valid FeatureBundle with small dims for fast tests."""
    n = grid[0] * grid[1]
    return FeatureBundle(
        image_id=image_id,
        g=rng.standard_normal(d_g).astype(np.float32),
        r=rng.standard_normal((4, d_r)).astype(np.float32),
        p=rng.standard_normal((n, d_p)).astype(np.float32),
        m_img=rng.standard_normal(d_t).astype(np.float32),
        grid=grid,
    )
