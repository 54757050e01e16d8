import numpy as np
import pytest
from hypothesis import settings

from mvc.model import ModelConfig, MvcModel
from mvc.patching import AnnotatedImage

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

TINY = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0, hidden=8,
                   num_classes=4)


@pytest.fixture
def tiny_model():
    return MvcModel.create(TINY, seed=0, dtype=np.float64)


def random_images(count, n=8, seed=0, classes=4):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        label = int(rng.integers(0, classes))
        boxes = []
        if label:
            x, y = (int(v) for v in rng.integers(0, n // 2, size=2))
            boxes.append((x, y, n // 2, n // 2))
        out.append(AnnotatedImage(rng.uniform(0, 1, size=(n, n)).astype(np.float32), label, tuple(boxes), f"im{i}"))
    return out
