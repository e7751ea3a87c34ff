import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentsim.morton import (
    brute_force_offsets,
    build_offsets_table,
    decode3,
    gaps,
    morton_box_order,
    morton_decode,
    morton_encode,
    naive_morton,
    rank_to_morton,
)
from agentsim.execution import Topology, WorkerPool
from oracles import interleave, morton_enumeration, table_from_enumeration


def test_interleave_example():
    assert morton_encode((2, 3, 5)) == interleave((2, 3, 5)) == 286
    assert morton_decode(286) == (2, 3, 5)


@settings(max_examples=200)
@given(st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1))
def test_encode3_roundtrip_and_matches_bit_loop(x, y, z):
    code = morton_encode((x, y, z))
    assert code == interleave((x, y, z)) == naive_morton((x, y, z))
    assert morton_decode(code, 3) == (x, y, z)


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
def test_encode2_roundtrip(x, y):
    code = morton_encode((x, y))
    assert code == interleave((x, y))
    assert morton_decode(code, 2) == (x, y)


def test_encode_rejects_bad_input():
    with pytest.raises(ValueError):
        morton_encode((1,))
    with pytest.raises(ValueError):
        morton_encode((-1, 0, 0))
    with pytest.raises(ValueError):
        morton_encode((2**21, 0, 0))


def test_three_by_three_table_and_gaps():
    t = build_offsets_table((3, 3))
    assert t.as_list() == [(0, 0), (5, 1), (6, 2), (8, 4)] == table_from_enumeration((3, 3))
    assert gaps(t) == [(4, 6), (6, 8), (9, 12)]
    assert t.in_space == 9


def all_dims():
    for d in (2, 3):
        yield from itertools.product(range(1, 10), repeat=d)


def test_offsets_table_exhaustive_up_to_nine():
    for dims in all_dims():
        fast = build_offsets_table(dims)
        ref = table_from_enumeration(dims)
        assert fast.as_list() == ref, dims
        assert brute_force_offsets(dims).as_list() == ref, dims
        assert fast.in_space == int(np.prod(dims))


def test_rank_to_morton_enumerates_in_space_codes():
    for dims in [(3, 3), (5, 7), (3, 4, 5), (9, 9, 9), (1, 1, 6)]:
        t = build_offsets_table(dims)
        assert [rank_to_morton(t, r) for r in range(t.in_space)] == morton_enumeration(dims)
    with pytest.raises(IndexError):
        rank_to_morton(build_offsets_table((3, 3)), 9)


def test_table_is_short_for_power_of_two():
    assert len(build_offsets_table((8, 8, 8))) == 1
    assert len(build_offsets_table((16, 16))) == 1


@pytest.mark.parametrize("threads", [1, 3])
def test_box_order_visits_every_box_in_morton_order(threads):
    dims = (5, 6, 7)
    t = build_offsets_table(dims)
    with WorkerPool(Topology(1, [threads])) as pool:
        order = morton_box_order(t, pool)
    assert sorted(order.tolist()) == list(range(int(np.prod(dims))))
    codes = []
    for b in order.tolist():
        x, y, z = b % 5, (b // 5) % 6, b // 30
        codes.append(interleave((x, y, z)))
    assert codes == sorted(codes)
    assert all(tuple(decode3(c)) == (c_x, c_y, c_z) for c, (c_x, c_y, c_z) in
               [(interleave(p), p) for p in [(1, 2, 3), (4, 5, 6)]])
