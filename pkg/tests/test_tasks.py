import math

import pytest
from hypothesis import given, settings, strategies as st

from evfleet.hexgrid import build_hex_graph
from evfleet.tasks import enumerate_layouts, split_tasks


def graph11():
    return build_hex_graph(11, "preset:compact")


def test_family_size():
    layouts = enumerate_layouts(graph11(), 5, piles=4)
    assert len(layouts) == math.comb(11, 5) == 462


def test_family_is_exact_combination_set():
    layouts = enumerate_layouts(graph11(), 5, piles=4)
    seen = {l.stations for l in layouts}
    assert len(seen) == 462
    assert all(len(s) == 5 for s in seen)
    # lexicographic ids
    assert layouts[0].stations == (0, 1, 2, 3, 4)
    assert layouts[-1].stations == (6, 7, 8, 9, 10)
    assert [l.id for l in layouts] == list(range(462))


def test_capacity():
    layouts = enumerate_layouts(graph11(), 5, piles=4)
    l = layouts[0]
    assert l.capacity(0) == 4
    assert l.capacity(10) == 0
    assert l.n_stations == 5


def test_split_sizes():
    # floor(8n/10), floor(n/10), remainder at n=462
    layouts = enumerate_layouts(graph11(), 5, piles=4)
    split = split_tasks(layouts, seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (369, 46, 47)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_split_partitions(seed):
    layouts = enumerate_layouts(build_hex_graph(7, "preset:flower"), 3, piles=2)
    split = split_tasks(layouts, seed=seed)
    ids = sorted(split.all_ids())
    assert ids == [l.id for l in layouts]
    assert not (set(split.train) & set(split.test))
    assert not (set(split.train) & set(split.validation))


def test_split_seed_changes_membership():
    layouts = enumerate_layouts(graph11(), 5, piles=4)
    a = split_tasks(layouts, seed=0)
    b = split_tasks(layouts, seed=1)
    assert a.train != b.train
    assert split_tasks(layouts, seed=0).train == a.train


def test_split_requires_enough_tasks():
    layouts = enumerate_layouts(build_hex_graph(4, "preset:line"), 1, piles=2)
    assert len(layouts) == 4
    with pytest.raises(ValueError):
        split_tasks(layouts, seed=0)
