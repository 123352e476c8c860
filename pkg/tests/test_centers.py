import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unihash.centers import HashCenterTable, generate_centers, min_pairwise_hamming
from unihash.errors import CapabilityError, GenerationError


def brute_min_distance(centers):
    c = np.asarray(centers)
    return min(int(np.sum(a != b)) for a, b in itertools.combinations(c, 2))


def test_antipodal_pair_reachable():
    t = generate_centers(2, 8, "random", d_floor=8, seed=0)
    assert t.min_distance == 8
    np.testing.assert_array_equal(t.centers[0], -t.centers[1])


def test_hadamard_ten_by_sixteen():
    t = generate_centers(10, 16, "hadamard")
    assert brute_min_distance(t.centers) == 8
    assert min_pairwise_hamming(t) == 8
    assert t.min_distance == 8


def test_hadamard_distances_are_half_or_full():
    t = generate_centers(32, 16, "hadamard")
    for a, b in itertools.combinations(t.centers, 2):
        assert int(np.sum(a != b)) in (8, 16)


@pytest.mark.parametrize("C,q", [(40, 16), (4, 12)])
def test_hadamard_infeasible(C, q):
    with pytest.raises(CapabilityError):
        generate_centers(C, q, "hadamard")


def test_min_distance_conventions():
    assert min_pairwise_hamming(HashCenterTable(np.array([[1, 1, 1, 1], [-1, -1, -1, -1]]), 0)) == 4
    assert min_pairwise_hamming(HashCenterTable(np.array([[1, -1, 1], [1, -1, 1]]), 0)) == 0
    assert min_pairwise_hamming(HashCenterTable(np.array([[1, -1, 1]]), 0)) == 3


def test_random_failure_reports_best():
    # 3 codes of length 2 cannot all be 2 apart
    with pytest.raises(GenerationError) as err:
        generate_centers(3, 2, "random", d_floor=2, seed=0)
    assert err.value.best == 1


def test_random_deterministic():
    a = generate_centers(12, 24, "random", seed=5)
    b = generate_centers(12, 24, "random", seed=5)
    np.testing.assert_array_equal(a.centers, b.centers)


def test_text_export():
    t = generate_centers(2, 4, "hadamard")
    assert t.to_text().splitlines()[0] == "+1 +1 +1 +1"


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(4, 32), st.integers(0, 10), st.integers(0, 1000))
def test_random_meets_floor_or_errors(C, q, d_floor, seed):
    try:
        t = generate_centers(C, q, "random", d_floor=d_floor, seed=seed)
    except GenerationError:
        return
    assert set(np.unique(t.centers)) <= {-1, 1}
    assert brute_min_distance(t.centers) == t.min_distance >= d_floor
