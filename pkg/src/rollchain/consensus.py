"""Round-robin block creation with neighbor validation and majority finalization.

One node is scheduled per tick, in strictly increasing activation order. The
scheduled node packages its pending sensor readings into a block, records it
locally, and pushes it to reachable neighbors either as the full renewed chain
or as the single new block. Receivers check the sender against their
authorized-device registry, reject out-of-queue proposals outright, and verify
hash linkage before recording anything.

A block enters the resultant chain only when strictly more than 51% of the
live nodes hold it at finalization time; turns whose block misses that bar are
recorded as lost. Failed nodes rejoin by copying the per-height majority of
their neighbors' chains.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence, Union

from .chain import (
    BadHash,
    BadIndex,
    BadLinkage,
    Block,
    LocalChain,
    NotAtCapacity,
    Transaction,
    WindowOverflow,
    assemble_full_chain,
    block_to_bytes,
    chain_to_bytes,
    make_block,
    make_genesis,
    validate_chain,
)


class Variant(str, Enum):
    """What the active node transmits: the whole renewed chain, or just the
    freshly created block."""

    FULL_CHAIN = "full-chain"
    SINGLE_BLOCK = "single-block"

    @classmethod
    def parse(cls, value: Union[str, "Variant"]) -> "Variant":
        if isinstance(value, Variant):
            return value
        aliases = {
            "a": cls.FULL_CHAIN,
            "full-chain": cls.FULL_CHAIN,
            "b": cls.SINGLE_BLOCK,
            "single-block": cls.SINGLE_BLOCK,
        }
        try:
            return aliases[value.lower()]
        except KeyError:
            raise ValueError(f"unknown dissemination variant {value!r}") from None


class Pruning(str, Enum):
    RESET = "reset"
    SLIDING = "sliding"


class Status(str, Enum):
    ALIVE = "alive"
    FAILED = "failed"      # down: neither creates nor receives
    ISOLATED = "isolated"  # links severed, state retained


class DuplicateId(ValueError):
    pass


class NoNeighbors(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleEntry:
    node_id: int
    activation_time: int
    neighbor_ids: tuple[int, ...]


@dataclass
class NodeState:
    node_id: int
    local_chain: LocalChain
    status: Status = Status.ALIVE
    authorized_registry: frozenset[int] = frozenset()
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0

    @property
    def tip(self) -> Block:
        return self.local_chain.tip


def full_mesh(node_ids: Sequence[int]) -> dict[int, list[int]]:
    return {i: [j for j in node_ids if j != i] for i in node_ids}


def ring(node_ids: Sequence[int]) -> dict[int, list[int]]:
    ids = list(node_ids)
    n = len(ids)
    if n < 3:
        return full_mesh(ids)
    return {
        ids[i]: sorted({ids[(i - 1) % n], ids[(i + 1) % n]}) for i in range(n)
    }


def line(node_ids: Sequence[int]) -> dict[int, list[int]]:
    ids = list(node_ids)
    adj: dict[int, list[int]] = {i: [] for i in ids}
    for a, b in zip(ids, ids[1:]):
        adj[a].append(b)
        adj[b].append(a)
    return adj


def build_schedule(
    node_ids: Sequence[int], topology: Mapping[int, Iterable[int]]
) -> list[ScheduleEntry]:
    """One entry per node, activation times strictly increasing in id order,
    neighbor lists (= send order) taken from the topology."""
    ids = list(node_ids)
    if len(set(ids)) != len(ids):
        raise DuplicateId("node ids must be distinct")
    return [
        ScheduleEntry(
            node_id=nid,
            activation_time=pos + 1,
            neighbor_ids=tuple(sorted(set(topology.get(nid, ())) - {nid})),
        )
        for pos, nid in enumerate(sorted(ids))
    ]


@dataclass(frozen=True)
class FailurePlan:
    """Iterations during which a node is down or cut off; absent means alive."""

    failed: Mapping[int, frozenset[int]] = field(default_factory=dict)
    isolated: Mapping[int, frozenset[int]] = field(default_factory=dict)

    @classmethod
    def from_dicts(
        cls,
        failed: Mapping[int, Iterable[int]] | None = None,
        isolated: Mapping[int, Iterable[int]] | None = None,
    ) -> "FailurePlan":
        return cls(
            {int(k): frozenset(v) for k, v in (failed or {}).items()},
            {int(k): frozenset(v) for k, v in (isolated or {}).items()},
        )

    def status_at(self, node_id: int, iteration: int) -> Status:
        if iteration in self.failed.get(node_id, ()):
            return Status.FAILED
        if iteration in self.isolated.get(node_id, ()):
            return Status.ISOLATED
        return Status.ALIVE


@dataclass(frozen=True)
class TurnRecord:
    iteration: int
    creator_id: int
    global_index: int          # index the turn's block has, or would have had
    block_hash: bytes | None   # None when the creator was down


def handle_incoming(
    node: NodeState,
    message: Union[Block, LocalChain],
    sender_id: int,
    expected_creator: int | None = None,
    pruning: Pruning = Pruning.RESET,
) -> str:
    """Validate a transmission and record it; returns "accept" or a
    "reject:<reason>" string. The node is left untouched on rejection."""
    if node.status is not Status.ALIVE:
        return "reject:unreachable"
    if sender_id not in node.authorized_registry:
        return "reject:unauthorized"
    if expected_creator is not None and sender_id != expected_creator:
        return "reject:out_of_queue"

    chain = node.local_chain
    if isinstance(message, Block):
        try:
            if pruning is Pruning.SLIDING and len(chain) == chain.capacity:
                chain.prune_sliding(message)
            else:
                _record_block(chain, message, pruning)
        except BadLinkage:
            return "reject:bad_linkage"
        except BadIndex:
            return "reject:bad_index"
        except BadHash:
            return "reject:bad_hash"
        except (WindowOverflow, NotAtCapacity):
            return "reject:window_full"
        return "accept"

    # Full-chain transmission: adopt only a validated strict extension.
    problems = validate_chain(message)
    if problems:
        kind = problems[0].kind
        return f"reject:{'bad_hash' if kind == 'bad_hash' else 'bad_linkage'}"
    tip = chain.tip
    anchor = message.find(tip.header.global_index)
    if anchor is None or anchor.header.hash != tip.header.hash:
        return "reject:bad_linkage"
    if message.tip.header.global_index <= tip.header.global_index:
        return "reject:not_extending"
    adopted = message.blocks[-(chain.capacity + 1):]
    node.local_chain = LocalChain.from_blocks(
        adopted, chain.capacity, chain.algo, validate=False
    )
    return "accept"


def _record_block(chain: LocalChain, block: Block, pruning: Pruning) -> None:
    """Append with device-local memory management: under reset pruning a full
    window is wiped down to its carry-over block before recording. The block
    is validated first, so a bad block never triggers pruning."""
    try:
        chain.append(block)
    except WindowOverflow:
        if pruning is not Pruning.RESET:
            raise
        chain.prune_reset()
        chain.append(block)


def _pending_transaction(creator_id: int, iteration: int, rng: random.Random) -> Transaction:
    # Synthetic sensor reading; payload content never affects protocol logic.
    return Transaction(
        sensor_id=creator_id,
        t0=iteration * 1000,
        step=0,
        readings=(rng.randbytes(8),),
    )


def step_iteration(
    states: Mapping[int, NodeState],
    schedule: Sequence[ScheduleEntry],
    variant: Variant,
    iteration: int,
    rng: random.Random,
    pruning: Pruning = Pruning.RESET,
    events: list[dict] | None = None,
) -> tuple[list[dict], TurnRecord]:
    """Run one scheduled turn. Every node other than the creator and its
    reachable neighbors keeps its previous state."""
    events = events if events is not None else []
    entry = schedule[(iteration - 1) % len(schedule)]
    creator = states[entry.node_id]

    if creator.status is Status.FAILED:
        events.append(
            {
                "iteration": iteration,
                "actor": creator.node_id,
                "action": "turn_skipped",
                "outcome": "failed",
                "bytes": 0,
            }
        )
        return events, TurnRecord(
            iteration,
            creator.node_id,
            creator.tip.header.global_index + 1,
            None,
        )

    tx = _pending_transaction(creator.node_id, iteration, rng)
    block = make_block(
        creator.tip,
        creator_id=creator.node_id,
        created_at=iteration,
        transactions=[tx],
        capacity=creator.local_chain.capacity,
    )
    if pruning is Pruning.SLIDING and len(creator.local_chain) == creator.local_chain.capacity:
        creator.local_chain.prune_sliding(block)
    else:
        _record_block(creator.local_chain, block, pruning)
    events.append(
        {
            "iteration": iteration,
            "actor": creator.node_id,
            "action": "create",
            "outcome": "ok",
            "bytes": 0,
            "block": block.header.global_index,
        }
    )

    if creator.status is not Status.ISOLATED:
        if variant is Variant.FULL_CHAIN:
            payload = chain_to_bytes(creator.local_chain.blocks)
            message: Union[Block, LocalChain] = creator.local_chain
        else:
            payload = block_to_bytes(block)
            message = block
        size = len(payload)
        for neighbor_id in entry.neighbor_ids:
            neighbor = states[neighbor_id]
            if neighbor.status is not Status.ALIVE:
                events.append(
                    {
                        "iteration": iteration,
                        "actor": creator.node_id,
                        "action": "send",
                        "peer": neighbor_id,
                        "outcome": "unreachable",
                        "bytes": 0,
                    }
                )
                continue
            creator.bytes_sent += size
            creator.messages_sent += 1
            neighbor.bytes_received += size
            outcome = handle_incoming(
                neighbor,
                message,
                creator.node_id,
                expected_creator=entry.node_id,
                pruning=pruning,
            )
            events.append(
                {
                    "iteration": iteration,
                    "actor": creator.node_id,
                    "action": "send",
                    "peer": neighbor_id,
                    "outcome": outcome,
                    "bytes": size,
                }
            )

    return events, TurnRecord(
        iteration, creator.node_id, block.header.global_index, block.header.hash
    )


def recover_node(node: NodeState, neighbor_states: Sequence[NodeState]) -> NodeState:
    """Rebuild the node's chain from the per-height strict majority of its
    neighbors' chains; stops at the last height where a majority agrees."""
    if not neighbor_states:
        raise NoNeighbors(f"node {node.node_id} has no neighbors to recover from")
    majority = len(neighbor_states) // 2 + 1
    start = min(
        s.local_chain.blocks[0].header.global_index for s in neighbor_states
    )
    adopted: list[Block] = []
    g = start
    while True:
        tally: dict[bytes, tuple[int, Block]] = {}
        for s in neighbor_states:
            b = s.local_chain.find(g)
            if b is not None:
                count, _ = tally.get(b.header.hash, (0, b))
                tally[b.header.hash] = (count + 1, b)
        winner = next(
            (blk for count, blk in tally.values() if count >= majority), None
        )
        if winner is None:
            break
        if adopted and winner.header.prev_hash != adopted[-1].header.hash:
            break  # defensive: majority blocks must chain together
        adopted.append(winner)
        g += 1
    if adopted:
        capacity = node.local_chain.capacity
        node.local_chain = LocalChain.from_blocks(
            adopted[-(capacity + 1):], capacity, node.local_chain.algo, validate=False
        )
    node.status = Status.ALIVE
    return node


@dataclass
class ResultantChain:
    """Outcome of majority finalization: blocks held by strictly more than 51%
    of live nodes, plus the turns whose block fell at or below that bar."""

    accepted: list[Block]
    lost: list[tuple[int, int]]  # (global_index, creator_id)
    confirmation_counts: dict[tuple[int, str], int]
    live_count: int


def _meets_threshold(count: int, live_count: int) -> bool:
    # "more than 51%", read strictly: 3 of 6 fails, 4 of 6 passes.
    return count * 100 > 51 * live_count


def finalize_resultant(
    states: Mapping[int, NodeState],
    live_count: int | None = None,
    index_range: tuple[int, int] | None = None,
) -> ResultantChain:
    """Tally every (index, hash) candidate across live nodes' chains and keep
    the ones confirmed by strictly more than 51% of ``live_count``."""
    live = [s for s in states.values() if s.status is not Status.FAILED]
    if live_count is None:
        live_count = len(live)
    tally: dict[tuple[int, bytes], tuple[int, Block]] = {}
    for s in live:
        for block in s.local_chain.blocks:
            g = block.header.global_index
            if index_range is not None and not index_range[0] <= g <= index_range[1]:
                continue
            key = (g, block.header.hash)
            count, _ = tally.get(key, (0, block))
            tally[key] = (count + 1, block)

    accepted, lost = [], []
    counts: dict[tuple[int, str], int] = {}
    for (g, digest), (count, block) in sorted(
        tally.items(), key=lambda kv: (kv[0][0], kv[0][1])
    ):
        counts[(g, digest.hex())] = count
        if _meets_threshold(count, live_count):
            accepted.append(block)
        else:
            lost.append((g, block.header.creator_id))
    return ResultantChain(accepted, sorted(lost), counts, live_count)


@dataclass
class ProtocolResult:
    resultant: ResultantChain
    counters: dict[int, dict[str, int]]
    events: list[dict]
    cycle_records: list[list[Block]]
    states: dict[int, NodeState]
    schedule: list[ScheduleEntry]
    capacity: int
    variant: Variant
    pruning: Pruning
    turns: int

    def assemble(self):
        """Stitch the recorded cycle windows into the end-to-end chain."""
        return assemble_full_chain(
            self.cycle_records,
            capacity=self.capacity,
            lost={g for g, _ in self.resultant.lost},
        )


def sent_bytes_by_iteration(events: Iterable[Mapping]) -> dict[int, int]:
    totals: dict[int, int] = {}
    for e in events:
        if e.get("action") == "send":
            totals[e["iteration"]] = totals.get(e["iteration"], 0) + e["bytes"]
    return totals


def run_protocol(
    topology: Mapping[int, Iterable[int]],
    variant: Union[Variant, str] = Variant.SINGLE_BLOCK,
    cycles: int = 1,
    capacity: int | None = None,
    pruning: Union[Pruning, str] = Pruning.RESET,
    turns: int | None = None,
    failure_plan: FailurePlan | None = None,
    seed: int = 0,
    genesis_created_at: int = 0,
    schedule: Sequence[ScheduleEntry] | None = None,
) -> ProtocolResult:
    """Execute the scheduled protocol over ``turns`` ticks (default: cycles x
    capacity), finalizing each window of indices before it can be pruned away.
    Deterministic for a given configuration and seed."""
    variant = Variant.parse(variant)
    pruning = Pruning(pruning)
    node_ids = sorted(topology)
    if not node_ids:
        raise ValueError("topology must contain at least one node")
    if capacity is None:
        capacity = len(node_ids)
    if turns is None:
        turns = cycles * capacity
    plan = failure_plan or FailurePlan()
    sched = list(schedule) if schedule is not None else build_schedule(node_ids, topology)

    genesis = make_genesis(created_at=genesis_created_at)
    registry = frozenset(node_ids)
    states = {
        nid: NodeState(
            node_id=nid,
            local_chain=LocalChain(genesis, capacity),
            authorized_registry=registry,
        )
        for nid in node_ids
    }
    rng = random.Random(seed)
    events: list[dict] = []
    turn_records: list[TurnRecord] = []

    accepted: list[Block] = []
    counts: dict[tuple[int, str], int] = {}
    cycle_records: list[list[Block]] = []
    carry = genesis
    pending_lo = 0
    last_live_count = len(node_ids)

    def finalize_range(lo: int, hi: int) -> None:
        nonlocal pending_lo, last_live_count
        if hi < lo:
            return
        part = finalize_resultant(states, index_range=(lo, hi))
        accepted.extend(part.accepted)
        counts.update(part.confirmation_counts)
        last_live_count = part.live_count
        pending_lo = hi + 1

    def live_tips() -> list[int]:
        tips = [
            s.tip.header.global_index
            for s in states.values()
            if s.status is not Status.FAILED
        ]
        return tips or [s.tip.header.global_index for s in states.values()]

    def max_tip_index() -> int:
        return max(live_tips())

    def majority_tip_index() -> int:
        # Largest index that strictly more than 51% of live nodes have
        # reached; a lone runaway node must not consume the index range.
        tips = sorted(live_tips(), reverse=True)
        for pos, tip in enumerate(tips, start=1):
            if _meets_threshold(pos, len(tips)):
                return tip
        return tips[-1]

    for k in range(1, turns + 1):
        recovering = []
        for nid in node_ids:
            new_status = plan.status_at(nid, k)
            if states[nid].status is Status.FAILED and new_status is Status.ALIVE:
                recovering.append(nid)
            states[nid].status = new_status
        for nid in recovering:
            neighbors = [
                states[j]
                for j in sorted(set(topology.get(nid, ())) - {nid})
                if states[j].status is Status.ALIVE
            ]
            if not neighbors:
                events.append(
                    {
                        "iteration": k,
                        "actor": nid,
                        "action": "recover",
                        "outcome": "no_neighbors",
                        "bytes": 0,
                    }
                )
                continue
            recover_node(states[nid], neighbors)
            events.append(
                {
                    "iteration": k,
                    "actor": nid,
                    "action": "recover",
                    "outcome": "ok",
                    "bytes": 0,
                    "block": states[nid].tip.header.global_index,
                }
            )

        if pruning is Pruning.SLIDING:
            # Indices below this bound can be evicted from an up-to-date
            # window during this turn; their tallies can only shrink now.
            finalize_range(pending_lo, max_tip_index() + 1 - capacity)

        _, record = step_iteration(
            states, sched, variant, k, rng, pruning=pruning, events=events
        )
        turn_records.append(record)

        if pruning is Pruning.RESET and k % capacity == 0:
            lo = pending_lo
            finalize_range(lo, majority_tip_index())
            new_blocks = [
                b for b in accepted if lo <= b.header.global_index < pending_lo
            ]
            if new_blocks and new_blocks[0].header.global_index == 0:
                new_blocks = new_blocks[1:]  # genesis is the record head already
            cycle_records.append([carry] + new_blocks)
            if new_blocks:
                carry = new_blocks[-1]

    finalize_range(pending_lo, max_tip_index())

    accepted_hashes = {b.header.hash for b in accepted}
    lost: list[tuple[int, int]] = []
    for record in turn_records:
        if record.block_hash is None or record.block_hash not in accepted_hashes:
            lost.append((record.global_index, record.creator_id))

    resultant = ResultantChain(
        accepted=sorted(accepted, key=lambda b: b.header.global_index),
        lost=sorted(set(lost)),
        confirmation_counts=counts,
        live_count=last_live_count,
    )
    counters = {
        nid: {
            "bytes_sent": states[nid].bytes_sent,
            "bytes_received": states[nid].bytes_received,
            "messages_sent": states[nid].messages_sent,
        }
        for nid in node_ids
    }
    return ProtocolResult(
        resultant=resultant,
        counters=counters,
        events=events,
        cycle_records=cycle_records,
        states=states,
        schedule=sched,
        capacity=capacity,
        variant=variant,
        pruning=pruning,
        turns=turns,
    )
