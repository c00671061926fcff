import numpy as np
import pytest

from engine.datasets import gen_synthetic_dataset
from engine.defenses import QueryOracle
from engine.model import ArchConfig, ClassifierModel, freeze, init_model


# =============================================================================
# Models
# =============================================================================

def make_head_model(d: int = 8, classes: int = 5, seed: int = 0) -> ClassifierModel:
    """Linear model on flat (1, 1, d) inputs: features are the input itself."""
    rng = np.random.default_rng(seed)
    return ClassifierModel(
        layers=(),
        head_W=rng.normal(0.0, 1.0, (classes, d)),
        head_b=rng.normal(0.0, 0.1, classes),
        input_shape=(1, 1, d),
    )


@pytest.fixture
def head_model():
    return make_head_model()


@pytest.fixture
def tiny_arch():
    return ArchConfig(classes=3, conv_channels=(2,), kernel=3, stride=2, feature_dim=6)


@pytest.fixture
def tiny_model(tiny_arch):
    """Untrained conv + dense + head model on 1x8x8 images (writable weights)."""
    return init_model((1, 8, 8), tiny_arch, seed=3)


@pytest.fixture
def frozen_model(tiny_model):
    return freeze(tiny_model)


@pytest.fixture
def shapes8():
    return gen_synthetic_dataset(classes=3, n=60, image_side=8, seed=11)


# =============================================================================
# Scripted oracles
# =============================================================================

class ScriptedOracle(QueryOracle):
    """Oracle whose probabilities come from a function of the batch; records submissions."""

    def __init__(self, fn, **kw):
        super().__init__(model=None, **kw)
        self.fn = fn
        self.seen = []

    def _respond(self, x):
        self.seen.append(x.copy())
        return self.fn(x)


def two_class_from_margin(margins):
    m = np.clip(np.asarray(margins, dtype=np.float64), -1.0, 1.0)
    return np.stack([0.5 + m / 2.0, 0.5 - m / 2.0], axis=1)


@pytest.fixture
def constant_oracle():
    """Margin 0.5 for label 0 on every input."""
    return ScriptedOracle(lambda x: two_class_from_margin(np.full(x.shape[0], 0.5)))
