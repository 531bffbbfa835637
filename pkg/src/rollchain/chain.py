"""Hash-linked block and chain primitives with a bounded storage window.

A node never stores more than ``capacity + 1`` blocks: one carry-over block
(the previous cycle's tip, doubling as the new cycle's genesis) plus one full
cycle. Two pruning schemes keep the window bounded:

* reset  -- at the end of a cycle everything but the tip is wiped and the tip
            carries over as the next cycle's block 0;
* sliding -- the oldest block is evicted each time a new one is recorded.

Blocks are immutable. The identity hash covers the end-to-end block index,
creator, creation tick, previous hash, and the transaction payload. The two
cycle bookkeeping fields are stored and serialized but excluded from the hash
preimage so that a carried-over block keeps its original hash bit-exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence, Union

MAGIC = b"RBC1"
HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)
DEFAULT_HASH_ALGO = "sha256"

_U64_MAX = 2**64 - 1
_U32_MAX = 2**32 - 1


class ChainError(Exception):
    """Base class for chain integrity failures."""


class BadLinkage(ChainError):
    """prev_hash does not match the hash of the preceding block."""


class BadIndex(ChainError):
    """Block index does not continue the chain's numbering."""


class BadHash(ChainError):
    """Stored hash does not match the recomputed digest (tampering)."""


class WindowOverflow(ChainError):
    """Appending would exceed the bounded storage window."""


class CycleIncomplete(ChainError):
    """Reset pruning requested before the cycle filled the window."""


class NotAtCapacity(ChainError):
    """Sliding pruning requested on a window that is not full yet."""


class LinkageViolation(ChainError):
    """A cycle record handed to full-chain assembly is not internally linked."""


class OverlapViolation(ChainError):
    """Adjacent cycle records disagree on the shared carry-over block."""


class SerializationError(ChainError):
    """Byte stream cannot be decoded as a block."""


def _check_u64(value: int, name: str) -> int:
    if not 0 <= value <= _U64_MAX:
        raise ValueError(f"{name} must fit an unsigned 64-bit integer, got {value}")
    return value


@dataclass(frozen=True)
class Transaction:
    """One sensor's measurement record.

    ``step`` is the millisecond interval between consecutive measurements and
    must be positive whenever more than one reading is packed into the record;
    a single measurement carries step 0. Reading payloads are opaque bytes
    (encryption, if any, happens upstream and is only flagged here).
    """

    sensor_id: int
    t0: int
    step: int
    readings: tuple[bytes, ...]
    payload_encrypted: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "readings", tuple(self.readings))
        _check_u64(self.sensor_id, "sensor_id")
        _check_u64(self.t0, "t0")
        _check_u64(self.step, "step")
        if not self.readings:
            raise ValueError("transaction needs at least one reading")
        if len(self.readings) > 1 and self.step <= 0:
            raise ValueError("multi-measurement transaction needs step > 0")
        for r in self.readings:
            if not isinstance(r, bytes):
                raise TypeError("readings must be bytes")
            if len(r) > _U32_MAX:
                raise ValueError("reading too large")

    def measurement_times(self) -> list[int]:
        """Implied timestamp of each reading: t0, t0+step, t0+2*step, ..."""
        return [self.t0 + k * self.step for k in range(len(self.readings))]


@dataclass(frozen=True)
class BlockHeader:
    global_index: int
    cycle_index: int
    index_in_cycle: int
    creator_id: int
    created_at: int
    prev_hash: bytes
    hash: bytes

    def __post_init__(self) -> None:
        _check_u64(self.global_index, "global_index")
        _check_u64(self.cycle_index, "cycle_index")
        _check_u64(self.index_in_cycle, "index_in_cycle")
        _check_u64(self.creator_id, "creator_id")
        _check_u64(self.created_at, "created_at")
        if len(self.prev_hash) != HASH_SIZE or len(self.hash) != HASH_SIZE:
            raise ValueError("prev_hash and hash must be 32 bytes")


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "transactions", tuple(self.transactions))


def _transaction_bytes(tx: Transaction) -> bytes:
    parts = [struct.pack(">QQQI", tx.sensor_id, tx.t0, tx.step, len(tx.readings))]
    for r in tx.readings:
        parts.append(struct.pack(">I", len(r)))
        parts.append(r)
    return b"".join(parts)


def _payload_bytes(transactions: Sequence[Transaction]) -> bytes:
    parts = [struct.pack(">I", len(transactions))]
    parts.extend(_transaction_bytes(tx) for tx in transactions)
    return b"".join(parts)


def hash_block(
    header: BlockHeader,
    transactions: Sequence[Transaction],
    algo: str = DEFAULT_HASH_ALGO,
) -> bytes:
    """Digest of the canonical hash preimage.

    Covers global_index, creator_id, created_at, prev_hash and the full
    transaction payload. cycle_index / index_in_cycle are bookkeeping that may
    change when a block carries over into the next cycle, so they stay out of
    the preimage; the stored hash field obviously does too.
    """
    h = hashlib.new(algo)
    if h.digest_size != HASH_SIZE:
        raise ValueError(f"{algo} is not a 256-bit digest")
    h.update(MAGIC)
    h.update(struct.pack(">QQQ", header.global_index, header.creator_id, header.created_at))
    h.update(header.prev_hash)
    h.update(_payload_bytes(transactions))
    return h.digest()


def make_block(
    prev: Block,
    creator_id: int,
    created_at: int,
    transactions: Iterable[Transaction],
    capacity: int,
    algo: str = DEFAULT_HASH_ALGO,
) -> Block:
    """Build the block that extends ``prev``, with cycle bookkeeping derived
    from the global index and the window capacity."""
    txs = tuple(transactions)
    g = prev.header.global_index + 1
    header = BlockHeader(
        global_index=g,
        cycle_index=(g - 1) // capacity,
        index_in_cycle=(g - 1) % capacity + 1,
        creator_id=creator_id,
        created_at=created_at,
        prev_hash=prev.header.hash,
        hash=ZERO_HASH,
    )
    return Block(replace(header, hash=hash_block(header, txs, algo)), txs)


def make_genesis(
    created_at: int = 0,
    creator_id: int = 0,
    algo: str = DEFAULT_HASH_ALGO,
) -> Block:
    header = BlockHeader(
        global_index=0,
        cycle_index=0,
        index_in_cycle=0,
        creator_id=creator_id,
        created_at=created_at,
        prev_hash=ZERO_HASH,
        hash=ZERO_HASH,
    )
    return Block(replace(header, hash=hash_block(header, (), algo)), ())


def block_to_bytes(block: Block) -> bytes:
    """Canonical storage serialization: magic, header fields in declaration
    order (u64 big-endian), both digests, then the transaction payload."""
    h = block.header
    return b"".join(
        (
            MAGIC,
            struct.pack(
                ">QQQQQ",
                h.global_index,
                h.cycle_index,
                h.index_in_cycle,
                h.creator_id,
                h.created_at,
            ),
            h.prev_hash,
            h.hash,
            _payload_bytes(block.transactions),
        )
    )


def serialized_size(block: Block) -> int:
    return len(block_to_bytes(block))


def block_from_bytes(data: bytes, offset: int = 0) -> tuple[Block, int]:
    """Decode one block starting at ``offset``; returns (block, next_offset)."""

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise SerializationError(f"truncated block at byte {offset}")
        out = data[offset : offset + n]
        offset += n
        return out

    if take(4) != MAGIC:
        raise SerializationError(f"bad magic at byte {offset - 4}")
    g, cycle, in_cycle, creator, created = struct.unpack(">QQQQQ", take(40))
    prev_hash = take(HASH_SIZE)
    stored_hash = take(HASH_SIZE)
    (tx_count,) = struct.unpack(">I", take(4))
    txs = []
    for _ in range(tx_count):
        sensor_id, t0, step, n_readings = struct.unpack(">QQQI", take(28))
        readings = []
        for _ in range(n_readings):
            (size,) = struct.unpack(">I", take(4))
            readings.append(take(size))
        try:
            txs.append(Transaction(sensor_id, t0, step, tuple(readings)))
        except ValueError as exc:
            raise SerializationError(f"invalid transaction in block {g}: {exc}") from exc
    header = BlockHeader(g, cycle, in_cycle, creator, created, prev_hash, stored_hash)
    return Block(header, tuple(txs)), offset


def chain_to_bytes(blocks: Iterable[Block]) -> bytes:
    return b"".join(block_to_bytes(b) for b in blocks)


def chain_from_bytes(data: bytes) -> list[Block]:
    blocks, offset = [], 0
    while offset < len(data):
        block, offset = block_from_bytes(data, offset)
        blocks.append(block)
    return blocks


class LocalChain:
    """A node's bounded window of hash-linked blocks.

    Holds at most ``capacity + 1`` blocks. Mutating operations validate first
    and leave the chain untouched when they raise.
    """

    __slots__ = ("blocks", "capacity", "algo")

    def __init__(self, genesis: Block, capacity: int, algo: str = DEFAULT_HASH_ALGO):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.blocks: list[Block] = [genesis]
        self.capacity = capacity
        self.algo = algo

    @classmethod
    def from_blocks(
        cls,
        blocks: Sequence[Block],
        capacity: int,
        algo: str = DEFAULT_HASH_ALGO,
        validate: bool = True,
    ) -> "LocalChain":
        if not blocks:
            raise ValueError("a chain needs at least one block")
        if len(blocks) > capacity + 1:
            raise WindowOverflow(
                f"{len(blocks)} blocks exceed window bound {capacity + 1}"
            )
        chain = cls(blocks[0], capacity, algo)
        chain.blocks = list(blocks)
        if validate:
            problems = validate_chain(chain)
            if problems:
                raise LinkageViolation(str(problems[0]))
        return chain

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def __getitem__(self, idx):
        return self.blocks[idx]

    def copy(self) -> "LocalChain":
        dup = LocalChain(self.blocks[0], self.capacity, self.algo)
        dup.blocks = list(self.blocks)
        return dup

    def find(self, global_index: int) -> Block | None:
        head = self.blocks[0].header.global_index
        pos = global_index - head
        if 0 <= pos < len(self.blocks):
            return self.blocks[pos]
        return None

    def _check_extension(self, block: Block) -> None:
        tip = self.tip
        if block.header.prev_hash != tip.header.hash:
            raise BadLinkage(
                f"block {block.header.global_index} does not link to tip "
                f"{tip.header.global_index}"
            )
        if block.header.global_index != tip.header.global_index + 1:
            raise BadIndex(
                f"expected index {tip.header.global_index + 1}, "
                f"got {block.header.global_index}"
            )
        if hash_block(block.header, block.transactions, self.algo) != block.header.hash:
            raise BadHash(f"block {block.header.global_index} hash does not recompute")

    def append(self, block: Block) -> None:
        """Append ``block`` if it validly extends the tip; otherwise raise and
        leave the chain unchanged. Content is checked before the window bound
        so a forged block never reports as a mere overflow."""
        self._check_extension(block)
        if len(self.blocks) >= self.capacity + 1:
            raise WindowOverflow(
                f"window full at {len(self.blocks)} blocks; prune before appending"
            )
        self.blocks.append(block)

    def prune_reset(self) -> list[Block]:
        """End-of-cycle wipe: keep only the tip, re-tagged as the next cycle's
        block 0 (hash unchanged). Returns the deleted blocks, oldest first."""
        if len(self.blocks) != self.capacity + 1:
            raise CycleIncomplete(
                f"cycle incomplete: {len(self.blocks)} of {self.capacity + 1} blocks"
            )
        deleted = self.blocks[:-1]
        tip = self.blocks[-1]
        carried = Block(
            replace(
                tip.header,
                cycle_index=tip.header.cycle_index + 1,
                index_in_cycle=0,
            ),
            tip.transactions,
        )
        self.blocks = [carried]
        return deleted

    def prune_sliding(self, block: Block) -> Block:
        """Record ``block`` into a full window by evicting the oldest block.
        Returns the evicted block."""
        if len(self.blocks) != self.capacity:
            raise NotAtCapacity(
                f"window holds {len(self.blocks)} blocks, sliding needs {self.capacity}"
            )
        self._check_extension(block)
        evicted = self.blocks.pop(0)
        self.blocks.append(block)
        return evicted


@dataclass(frozen=True)
class FullChain:
    """The assembled end-to-end chain: one record per cycle, where each record
    is the full window (carry-over block first) and adjacent records share
    their boundary block."""

    cycles: tuple[tuple[Block, ...], ...]
    capacity: int
    lost: frozenset[int] = frozenset()

    @property
    def genesis(self) -> Block:
        return self.cycles[0][0]

    def matrix(self) -> list[list[Block]]:
        """Cycle-by-cycle view: row i is cycle i's window; row i's last block
        is row i+1's first."""
        return [list(rec) for rec in self.cycles]

    def flatten(self) -> list[Block]:
        """The de-duplicated block sequence from genesis to the final tip."""
        out = list(self.cycles[0])
        for rec in self.cycles[1:]:
            out.extend(rec[1:])
        return out


@dataclass(frozen=True)
class Violation:
    kind: str
    global_index: int | None
    detail: str

    def __str__(self) -> str:
        where = f" at block {self.global_index}" if self.global_index is not None else ""
        return f"{self.kind}{where}: {self.detail}"


def _expected_tags(global_index: int, capacity: int) -> tuple[int, int]:
    # In-flow bookkeeping for a created (non carry-over) block.
    return (global_index - 1) // capacity, (global_index - 1) % capacity + 1


def _validate_window(
    blocks: Sequence[Block],
    capacity: int,
    algo: str,
    allow_gaps: frozenset[int] = frozenset(),
) -> list[Violation]:
    problems: list[Violation] = []
    if len(blocks) > capacity + 1:
        problems.append(
            Violation(
                "window_overflow",
                None,
                f"{len(blocks)} blocks exceed window bound {capacity + 1}",
            )
        )
    for block in blocks:
        h = block.header
        if hash_block(h, block.transactions, algo) != h.hash:
            problems.append(
                Violation("bad_hash", h.global_index, "hash does not recompute")
            )
    head = blocks[0].header
    if head.global_index == 0:
        if head.prev_hash != ZERO_HASH:
            problems.append(
                Violation("bad_linkage", 0, "genesis prev_hash must be all zeros")
            )
        if (head.cycle_index, head.index_in_cycle) != (0, 0):
            problems.append(
                Violation("bad_cycle_tag", 0, "genesis must carry cycle tags (0, 0)")
            )
    else:
        g = head.global_index
        carried_ok = (
            g % capacity == 0
            and (head.cycle_index, head.index_in_cycle) == (g // capacity, 0)
        )
        inflow_ok = (head.cycle_index, head.index_in_cycle) == _expected_tags(g, capacity)
        if not (carried_ok or inflow_ok):
            problems.append(
                Violation(
                    "bad_cycle_tag",
                    g,
                    f"tags ({head.cycle_index}, {head.index_in_cycle}) fit neither a "
                    f"carried-over nor an in-flow block at index {g}",
                )
            )
    for prev, cur in zip(blocks, blocks[1:]):
        a, b = prev.header, cur.header
        if b.global_index == a.global_index + 1:
            if b.prev_hash != a.hash:
                problems.append(
                    Violation("bad_linkage", b.global_index, "prev_hash mismatch")
                )
            if (b.cycle_index, b.index_in_cycle) != _expected_tags(
                b.global_index, capacity
            ):
                problems.append(
                    Violation("bad_cycle_tag", b.global_index, "cycle tags inconsistent")
                )
        elif (
            b.global_index > a.global_index + 1
            and allow_gaps
            and b.global_index - a.global_index - 1 <= len(allow_gaps)
            and all(i in allow_gaps for i in range(a.global_index + 1, b.global_index))
        ):
            pass  # recorded lost-block gap; linkage across it is unverifiable
        else:
            problems.append(
                Violation(
                    "bad_index",
                    b.global_index,
                    f"expected index {a.global_index + 1}",
                )
            )
    return problems


def validate_chain(
    chain: Union[LocalChain, FullChain, Sequence[Block]],
    capacity: int | None = None,
    algo: str = DEFAULT_HASH_ALGO,
) -> list[Violation]:
    """Report every violated invariant; an empty report means valid."""
    if isinstance(chain, LocalChain):
        return _validate_window(chain.blocks, chain.capacity, chain.algo)
    if isinstance(chain, FullChain):
        problems: list[Violation] = []
        for rec in chain.cycles:
            problems.extend(_validate_window(rec, chain.capacity, algo, chain.lost))
        for cur, nxt in zip(chain.cycles, chain.cycles[1:]):
            if cur[-1].header.hash != nxt[0].header.hash:
                problems.append(
                    Violation(
                        "overlap_violation",
                        nxt[0].header.global_index,
                        "adjacent cycles disagree on the shared carry-over block",
                    )
                )
        return problems
    blocks = list(chain)
    if not blocks:
        return []
    if capacity is None:
        capacity = max(len(blocks) - 1, 1)
    return _validate_window(blocks, capacity, algo)


def assemble_full_chain(
    cycle_records: Sequence[Sequence[Block]],
    capacity: int | None = None,
    lost: Iterable[int] = (),
    algo: str = DEFAULT_HASH_ALGO,
) -> FullChain:
    """Stitch per-cycle windows into the end-to-end chain.

    Every record must be internally hash-linked (recorded lost indices excuse
    gaps), and each record's last block must be bit-identical -- same hash --
    to the next record's first. Raises LinkageViolation / OverlapViolation.
    """
    records = [tuple(rec) for rec in cycle_records]
    if not records or any(not rec for rec in records):
        raise ValueError("need at least one non-empty cycle record")
    if capacity is None:
        capacity = max(max(len(rec) - 1 for rec in records), 1)
    lost_set = frozenset(lost)
    for rec in records:
        problems = _validate_window(rec, capacity, algo, lost_set)
        if problems:
            raise LinkageViolation(str(problems[0]))
    for cur, nxt in zip(records, records[1:]):
        if cur[-1].header.hash != nxt[0].header.hash:
            raise OverlapViolation(
                f"cycle ending at block {cur[-1].header.global_index} does not "
                f"carry over into the next cycle"
            )
    return FullChain(tuple(records), capacity, lost_set)
