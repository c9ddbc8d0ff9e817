import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomae.masking import mask_count, select_mask, shuffled


def test_ten_ids_seventy_percent():
    spec = select_mask(np.arange(10), 0.7, 0)
    assert spec.masked_ids.size == 7
    assert spec.visible_ids.size == 3


def test_ratio_zero_masks_nothing():
    spec = select_mask(np.arange(5), 0.0, 9)
    assert spec.masked_ids.size == 0
    np.testing.assert_array_equal(spec.visible_ids, np.arange(5))


def test_golden_vector_seed_42():
    # reference splitmix64 + Fisher-Yates trace, computed independently and frozen
    assert shuffled(range(10), 42) == [8, 3, 6, 5, 4, 0, 9, 2, 1, 7]
    spec = select_mask(np.arange(10), 0.7, 42)
    np.testing.assert_array_equal(spec.masked_ids, [0, 3, 4, 5, 6, 8, 9])
    np.testing.assert_array_equal(spec.visible_ids, [1, 2, 7])


def test_half_to_even_count():
    assert mask_count(5, 0.5) == 2
    assert mask_count(7, 0.5) == 4
    assert mask_count(1, 0.5) == 0


def test_rejects_unsorted_ids_and_bad_ratio():
    with pytest.raises(ValueError):
        select_mask([3, 1, 2], 0.5, 0)
    with pytest.raises(ValueError):
        select_mask([1, 2], 1.5, 0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 10_000), unique=True, max_size=60).map(sorted),
    st.floats(0.0, 1.0),
    st.integers(0, 2**64 - 1),
)
def test_partition_invariants(ids, ratio, seed):
    spec = select_mask(ids, ratio, seed)
    assert spec.masked_ids.size == round(ratio * len(ids))
    assert np.intersect1d(spec.masked_ids, spec.visible_ids).size == 0
    np.testing.assert_array_equal(np.union1d(spec.masked_ids, spec.visible_ids), np.asarray(ids, dtype=np.int64))
    assert np.all(np.diff(spec.masked_ids) > 0)
