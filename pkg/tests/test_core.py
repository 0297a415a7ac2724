import pytest
from hypothesis import given, strategies as st

from consensuslab.core import (
    EMPTY,
    NOOP,
    NOVAL,
    Ballot,
    Command,
    Entry,
    QuorumSystem,
    UnknownServer,
    ballot_succ,
    compare_entries,
    digest,
    highest_entry,
    proposer_of,
    put,
    round_of,
)

A = Command("write", "x", "A")
B = Command("write", "x", "B")


def test_ballot_succ_examples():
    assert ballot_succ(0, 1, 3) == 4
    assert ballot_succ(8, 2, 3) == 11


def test_ballot_succ_from_empty_ballot_is_round_zero():
    assert [ballot_succ(-1, p, 3) for p in range(3)] == [0, 1, 2]


@given(st.integers(-1, 500), st.integers(1, 7), st.data())
def test_ballot_succ_is_strictly_greater_and_owned(b, n, data):
    p = data.draw(st.integers(0, n - 1))
    nb = ballot_succ(b, p, n)
    assert nb > b
    assert proposer_of(nb, n) == p
    assert round_of(nb, n) == round_of(b, n) + 1


def test_ballot_succ_rejects_unknown_proposer():
    with pytest.raises(ValueError):
        ballot_succ(0, 3, 3)


def test_ballot_encoding_round_trips():
    assert Ballot(2, 2).encode(3) == 8
    assert Ballot.decode(11, 3) == Ballot(3, 2)
    with pytest.raises(ValueError):
        Ballot(0, 5).encode(3)


def test_majority_quorums():
    q3, q5 = QuorumSystem.majority(3), QuorumSystem.majority(5)
    assert q3.is_quorum({0, 1})
    assert not q3.is_quorum({2})
    assert q5.is_quorum({0, 1, 2})
    assert q3.f == 1 and q5.f == 2
    assert len(q5.minimal_quorums) == 10


def test_quorum_with_unknown_server_is_an_error():
    with pytest.raises(UnknownServer):
        QuorumSystem.majority(3).is_quorum({0, 7})


def test_quorums_must_intersect():
    with pytest.raises(ValueError):
        QuorumSystem(frozenset({0, 1}), frozenset({frozenset({0}), frozenset({1})}), 0)


def test_entry_comparison():
    assert compare_entries(Entry(2, 2, A), Entry(5, 5, B), 3) < 0
    assert compare_entries(EMPTY, Entry(0, 0, A), 3) < 0
    assert compare_entries(Entry(3, 3, A), Entry(3, 3, A), 3) == 0
    assert highest_entry([Entry(1, 1, A), Entry(4, 4, B), EMPTY], 3) == Entry(4, 4, B)
    assert highest_entry([], 3) == EMPTY


def test_put_pads_with_empty_slots():
    assert put((), 2, Entry(0, 0, A)) == (EMPTY, EMPTY, Entry(0, 0, A))
    assert put((EMPTY,), 0, Entry(0, 0, B)) == (Entry(0, 0, B),)


def test_command_kind_is_checked():
    with pytest.raises(ValueError):
        Command("delete", "x")
    assert Command("read", "x").is_read


def test_digest_is_stable_and_distinguishes_markers():
    assert digest((A, NOOP)) == digest((Command("write", "x", "A"), NOOP))
    assert digest(NOOP) != digest(NOVAL)
    assert digest(frozenset({1, 2})) == digest(frozenset({2, 1}))
    assert digest({"a": 1}) != digest({"a": 2})
