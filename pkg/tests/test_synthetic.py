import numpy as np
import pytest

from src.dataio.synthetic import generate_synthetic


def test_exact_empty_count():
    records = generate_synthetic(50, resolution=24, empty_fraction=0.2, seed=1)
    assert sum(1 for r in records if not r.mask.any()) == 10


def test_deterministic_per_seed():
    a = generate_synthetic(6, resolution=16, seed=4)
    b = generate_synthetic(6, resolution=16, seed=4)
    for ra, rb in zip(a, b):
        assert ra.id == rb.id
        assert np.array_equal(ra.image, rb.image) and np.array_equal(ra.mask, rb.mask)
        assert ra.depth == rb.depth
    c = generate_synthetic(6, resolution=16, seed=5)
    assert not np.array_equal(a[0].image, c[0].image)


def test_value_ranges():
    records = generate_synthetic(20, resolution=20, seed=0)
    for record in records:
        assert record.image.shape == (20, 20) and record.mask.shape == (20, 20)
        assert record.image.min() >= 0.0 and record.image.max() <= 1.0
        assert set(np.unique(record.mask)) <= {0, 1}
        assert 0.0 < record.depth <= 1.0
        assert float(record.depth_feet).is_integer()
    assert max(r.depth for r in records) == 1.0


def test_coverage_spans_several_bins():
    records = generate_synthetic(200, resolution=32, seed=0)
    assert len({r.coverage_bin for r in records}) >= 4


@pytest.mark.parametrize("kwargs", [dict(empty_fraction=1.0), dict(empty_fraction=-0.1), dict(resolution=4)])
def test_invalid_arguments(kwargs):
    with pytest.raises(ValueError):
        generate_synthetic(10, **kwargs)
