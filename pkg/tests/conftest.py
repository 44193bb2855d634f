import numpy as np
import pytest

from fact import vit


def randomize_partition(partition, seed, magnitude=0.3):
    """Overwrite every factor (``V`` too) so increments are non-zero."""
    rng = np.random.default_rng(seed)
    for p in partition.parameters():
        p.data[...] = rng.uniform(-magnitude, magnitude, size=p.shape)
    return partition


def randomize_model(model, seed):
    """Non-trivial biases and norms plus a random head, so every path is exercised."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith("bias") or name.endswith("beta") or name.startswith("head."):
            p.data[...] = rng.normal(0, 0.1, size=p.shape)
        elif name.endswith("gamma"):
            p.data[...] = 1 + rng.normal(0, 0.1, size=p.shape)
    return model


@pytest.fixture
def small_model():
    cfg = vit.vit_config(L=2, d=32, heads=4, image_size=8, patch_size=4, num_classes=5)
    return randomize_model(vit.VisionTransformer.random(cfg, seed=0), seed=1)


@pytest.fixture
def images():
    return np.random.default_rng(7).normal(size=(3, 3, 8, 8)).astype(np.float32)
