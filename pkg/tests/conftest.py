import numpy as np
import pytest

from src.dataio.synthetic import generate_synthetic
from src.segnet import ModelConfig


def numeric_grad(fn, values: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function with respect to every entry of values."""
    values = np.array(values, dtype=np.float64)
    grad = np.zeros_like(values)
    for index in np.ndindex(values.shape):
        original = values[index]
        values[index] = original + eps
        plus = fn(values)
        values[index] = original - eps
        minus = fn(values)
        values[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def assert_close_relative(actual: np.ndarray, expected: np.ndarray, rtol: float = 1e-4, atol: float = 1e-8):
    actual, expected = np.asarray(actual), np.asarray(expected)
    scale = np.maximum(np.abs(expected), np.abs(actual))
    assert np.all(np.abs(actual - expected) <= rtol * scale + atol), \
        f"max abs diff {np.max(np.abs(actual - expected))}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(topology="fpn", merge_kind="quantum", encoder_widths=[4, 6, 8, 8], resolution=16)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(24, resolution=24, empty_fraction=0.25, seed=3)


@pytest.fixture(name="numeric_grad")
def numeric_grad_fixture():
    return numeric_grad


@pytest.fixture(name="assert_close_relative")
def assert_close_relative_fixture():
    return assert_close_relative
