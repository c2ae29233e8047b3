import pytest

from p2pwallet import commit as cm
from p2pwallet.sim.explorer import (
    Bounds,
    BoundsTooLarge,
    ExploreSetup,
    expected_schedule_count,
    explore_exhaustive,
    skip_prepare_logging,
)


def loss_schedules(losses, round_trips):
    """Independent brute-force count: walk the chain leg by leg, branching on
    deliver vs. lose for every message while the loss budget lasts."""

    def walk(trip, leg, budget):
        if trip == round_trips:
            return 1
        nxt = (trip, 1) if leg == 0 else (trip + 1, 0)
        total = walk(*nxt, budget)
        if budget:
            # A loss on either leg means the request goes out again.
            total += walk(trip, 0, budget - 1)
        return total

    return walk(0, 0, losses)


def test_zero_faults_commit_once():
    result = explore_exhaustive(Bounds(0, 0, 0))
    assert result.schedules == 1
    (terminal,) = result.terminals.values()
    assert terminal.pair == ("committed", "committed")
    assert (terminal.seller_balance, terminal.buyer_balance) == (40, 60)


def test_fault_free_message_order():
    (terminal,) = explore_exhaustive(Bounds(0, 0, 0)).terminals.values()
    delivered = [step.split()[1] for step in terminal.schedule if step.startswith("deliver")]
    assert delivered == [
        "LookupPacket",
        "LookupResponse",
        "Quote",
        "QuoteDecision",
        "CommitRequest",
        "Agreed",
        "Commit",
        "Committed",
    ]


@pytest.mark.parametrize("losses", [0, 1, 2])
@pytest.mark.parametrize("discovery, round_trips", [(False, 2), (True, 4)])
def test_loss_only_schedule_counts(losses, discovery, round_trips):
    setup = ExploreSetup(include_discovery=discovery)
    result = explore_exhaustive(Bounds(losses, 0, 0), setup)
    oracle = loss_schedules(losses, round_trips)
    assert result.schedules == oracle
    assert expected_schedule_count(losses, round_trips) == oracle


def test_default_bounds_are_atomic_under_both_policies():
    for policy in cm.TimeoutPolicy:
        setup = ExploreSetup(config=cm.ProtocolConfig(policy=policy), include_discovery=False)
        result = explore_exhaustive(Bounds(1, 1, 1), setup)
        assert result.all_atomic and result.all_conserved, policy
        assert result.outcome_pairs <= {("committed", "committed"), ("aborted", "aborted")}


def test_mutant_is_caught():
    setup = ExploreSetup(include_discovery=False)
    result = explore_exhaustive(Bounds(1, 0, 1), setup, buyer_handler=skip_prepare_logging)
    assert not result.all_atomic
    bad = [t for t in result.terminals.values() if not t.atomic]
    assert all(any("!crash" in step for step in t.schedule) for t in bad)


def test_bounds_parsing():
    assert Bounds.parse("2,1,1") == Bounds(2, 1, 1)
    with pytest.raises(ValueError):
        Bounds.parse("2,1")
    with pytest.raises(ValueError):
        Bounds.parse("-1,0,0")
    with pytest.raises(BoundsTooLarge):
        explore_exhaustive(Bounds.parse("5,3,1"))


def test_state_cap():
    with pytest.raises(BoundsTooLarge):
        explore_exhaustive(Bounds(2, 1, 1), ExploreSetup(max_states=50))
