"""Collective operations over live in-process groups.

The split ordering rule has an independent oracle here: a naive
reimplementation checked exhaustively against partition_by_color before any
live-group test relies on it.
"""

import hashlib
import itertools
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from egroup import Group, InterGroup, RetirementToken, Side, SplitKey
from egroup.collectives import (
    allgather,
    barrier,
    broadcast,
    merge,
    partition_by_color,
    split,
)
from egroup.errors import ProtocolError

from conftest import cluster, run_members


# Oracle: the ordering rule restated from scratch, without reusing any of
# the library's sorting machinery.
def naive_partition(entries):
    colors = sorted({color for color, _ in entries})
    result = {}
    for color in colors:
        ranked = [(key, old_rank)
                  for old_rank, (c, key) in enumerate(entries) if c == color]
        ranked.sort(key=lambda pair: (pair[0], pair[1]))
        result[color] = [old_rank for _, old_rank in ranked]
    return result


class TestPartitionOracle:
    def test_exhaustive_small_groups(self):
        # Every color assignment from {0,1,2} and every key assignment from
        # {0,5} for groups up to 4 members.
        for n in range(1, 5):
            for colors in itertools.product((0, 1, 2), repeat=n):
                for keys in itertools.product((0, 5), repeat=n):
                    entries = list(zip(colors, keys))
                    assert partition_by_color(entries) == \
                        naive_partition(entries), entries

    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(-10, 10)),
                    min_size=1, max_size=12))
    @settings(max_examples=300, deadline=None)
    def test_random_assignments(self, entries):
        assert partition_by_color(entries) == naive_partition(entries)

    def test_each_rank_appears_exactly_once(self):
        entries = [(1, 0), (0, 3), (1, 3), (0, 0), (2, -1)]
        parts = partition_by_color(entries)
        seen = sorted(r for ranks in parts.values() for r in ranks)
        assert seen == [0, 1, 2, 3, 4]

    def test_key_then_old_rank_ordering(self):
        # Same color, keys force a reversal; ties broken by old rank.
        entries = [(0, 9), (0, 1), (0, 1), (0, 0)]
        assert partition_by_color(entries) == {0: [3, 1, 2, 0]}


class TestBarrier:
    def test_releases_only_after_last_arrival(self):
        with cluster(3) as groups:
            release_times = [None] * 3

            def member(group):
                if group.my_rank == 2:
                    time.sleep(0.25)
                barrier(group)
                release_times[group.my_rank] = time.monotonic()

            run_members(member, groups)
            spread = max(release_times) - min(release_times)
            assert spread < 0.2, f"barrier released {spread:.3f}s apart"

    def test_single_member_returns_immediately(self):
        with cluster(1) as groups:
            start = time.monotonic()
            barrier(groups[0])
            assert time.monotonic() - start < 0.1

    def test_unbound_group_rejected(self):
        g = Group(epoch=0, roster=(
            __import__("egroup").MemberDescriptor(
                host_label="h", listen_address="x:1", incarnation_id="a"),),
            my_rank=0)
        with pytest.raises(ValueError):
            barrier(g)


class TestBroadcast:
    def test_all_members_receive_root_payload(self):
        payload = bytes(range(256)) * 256  # 64 KiB
        digest = hashlib.sha256(payload).hexdigest()
        with cluster(8) as groups:
            def member(group):
                data = payload if group.my_rank == 0 else b""
                out = broadcast(group, 0, data)
                return hashlib.sha256(out).hexdigest()

            results = run_members(member, groups)
            assert results == [digest] * 8

    def test_nonzero_root(self):
        with cluster(3) as groups:
            def member(group):
                data = b"from-two" if group.my_rank == 2 else b""
                return broadcast(group, 2, data)

            assert run_members(member, groups) == [b"from-two"] * 3

    def test_root_out_of_range(self):
        with cluster(2) as groups:
            with pytest.raises(ValueError):
                broadcast(groups[0], 5, b"")


class TestAllgather:
    def test_concatenates_in_rank_order(self):
        width = 64
        blocks = [bytes([i]) * width for i in range(6)]
        expected = b"".join(blocks)
        with cluster(6) as groups:
            def member(group):
                return allgather(group, blocks[group.my_rank])

            assert run_members(member, groups) == [expected] * 6

    def test_single_member(self):
        with cluster(1) as groups:
            assert allgather(groups[0], b"solo") == b"solo"

    def test_width_disagreement_raises_everywhere(self):
        with cluster(3) as groups:
            def member(group):
                block = b"x" * (8 if group.my_rank == 1 else 4)
                with pytest.raises(ProtocolError):
                    allgather(group, block)
                return True

            assert run_members(member, groups) == [True, True, True]


class TestSplit:
    def test_uniform_color_is_epoch_bump(self):
        with cluster(4) as groups:
            def member(group):
                new = split(group, SplitKey(color=0, key=group.my_rank))
                return (new.epoch, new.my_rank, new.size())

            results = run_members(member, groups)
            assert results == [(1, 0, 4), (1, 1, 4), (1, 2, 4), (1, 3, 4)]

    def test_two_way_split_by_parity(self):
        with cluster(4) as groups:
            def member(group):
                color = group.my_rank % 2
                new = split(group, SplitKey(color=color, key=group.my_rank))
                ids = tuple(m.incarnation_id for m in new.roster)
                return (color, new.my_rank, ids)

            results = run_members(member, groups)
            evens = tuple(groups[i].roster[i].incarnation_id for i in (0, 2))
            odds = tuple(groups[i].roster[i].incarnation_id for i in (1, 3))
            assert results[0] == (0, 0, evens)
            assert results[2] == (0, 1, evens)
            assert results[1] == (1, 0, odds)
            assert results[3] == (1, 1, odds)

    def test_key_overrides_old_rank_order(self):
        with cluster(3) as groups:
            def member(group):
                key = -group.my_rank  # reverse the ranks
                new = split(group, SplitKey(color=0, key=key))
                return new.my_rank

            assert run_members(member, groups) == [2, 1, 0]

    def test_retiring_color_yields_tokens(self):
        with cluster(4) as groups:
            def member(group):
                removing = group.my_rank >= 2
                out = split(group, SplitKey(color=1 if removing else 0,
                                            key=group.my_rank),
                            retiring_color=1)
                if removing:
                    assert isinstance(out, RetirementToken)
                    return ("token", out.epoch)
                return ("group", out.epoch, out.my_rank, out.size())

            results = run_members(member, groups)
            assert results == [("group", 1, 0, 2), ("group", 1, 1, 2),
                               ("token", 1), ("token", 1)]

    def test_retiring_color_disagreement_rejected(self):
        with cluster(2) as groups:
            def member(group):
                retiring = 1 if group.my_rank == 0 else None
                with pytest.raises(ProtocolError):
                    split(group, SplitKey(color=0, key=0),
                          retiring_color=retiring)
                return True

            assert run_members(member, groups) == [True, True]

    def test_negative_color_rejected(self):
        with pytest.raises(ValueError):
            SplitKey(color=-1, key=0)


def make_intergroups(parent_groups, child_groups):
    """Hand-build the two sides' InterGroup views of each other."""
    parent_roster = parent_groups[0].roster
    child_roster = child_groups[0].roster
    inters = []
    for g in parent_groups:
        inters.append(InterGroup(local_group=g, remote_roster=child_roster,
                                 side=Side.PARENT, parent_root_rank=0))
    for g in child_groups:
        inters.append(InterGroup(local_group=g, remote_roster=parent_roster,
                                 side=Side.CHILD, parent_root_rank=0))
    return inters


class TestMerge:
    def run_merge(self, n_parent, n_child):
        with cluster(n_parent) as parents, cluster(n_child) as children:
            inters = make_intergroups(parents, children)

            def member(inter):
                high = inter.side is Side.CHILD
                merged = merge(inter, high=high)
                ids = tuple(m.incarnation_id for m in merged.roster)
                return (merged.epoch, merged.my_rank, ids)

            results = run_members(member, inters)
            expected_ids = tuple(
                m.incarnation_id
                for m in parents[0].roster + children[0].roster)
            for i, (epoch, rank, ids) in enumerate(results):
                assert epoch == 1
                assert rank == i
                assert ids == expected_ids

    def test_one_plus_one(self):
        self.run_merge(1, 1)

    def test_two_plus_three(self):
        self.run_merge(2, 3)

    def test_merged_group_can_communicate(self):
        with cluster(2) as parents, cluster(2) as children:
            inters = make_intergroups(parents, children)

            def member(inter):
                merged = merge(inter, high=inter.side is Side.CHILD)
                return allgather(merged, f"r{merged.my_rank}".encode())

            results = run_members(member, inters)
            assert results == [b"r0r1r2r3"] * 4

    def test_high_flag_conflict_rejected(self):
        with cluster(1) as parents, cluster(2) as children:
            inters = make_intergroups(parents, children)

            def member(inter):
                # The two children disagree about which side is high.
                high = (inter.side is Side.CHILD
                        and inter.local_group.my_rank == 0)
                with pytest.raises(ProtocolError):
                    merge(inter, high=high)
                return True

            assert run_members(member, inters) == [True, True, True]

    def test_consumed_intergroup_rejected(self):
        with cluster(1) as parents, cluster(1) as children:
            inters = make_intergroups(parents, children)

            def member(inter):
                merge(inter, high=inter.side is Side.CHILD)
                with pytest.raises(ProtocolError):
                    merge(inter, high=inter.side is Side.CHILD)
                return True

            assert run_members(member, inters) == [True, True]
