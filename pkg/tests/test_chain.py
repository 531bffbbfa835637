import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from rollchain.chain import (
    BadHash,
    BadIndex,
    BadLinkage,
    Block,
    BlockHeader,
    CycleIncomplete,
    LinkageViolation,
    LocalChain,
    NotAtCapacity,
    OverlapViolation,
    SerializationError,
    Transaction,
    WindowOverflow,
    ZERO_HASH,
    assemble_full_chain,
    block_from_bytes,
    block_to_bytes,
    chain_from_bytes,
    chain_to_bytes,
    hash_block,
    make_block,
    make_genesis,
    validate_chain,
)

# Published SHA-256 test vector for the empty message (FIPS 180-4 examples).
SHA256_EMPTY = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def tx(sensor=1, t0=1000, step=0, readings=(b"\x01\x02",)):
    return Transaction(sensor, t0, step, tuple(readings))


def build_chain(capacity=5, n_blocks=5, start_tick=1):
    chain = LocalChain(make_genesis(), capacity)
    for k in range(n_blocks):
        block = make_block(
            chain.tip, creator_id=k + 1, created_at=start_tick + k,
            transactions=[tx(sensor=k + 1, t0=1000 + k)], capacity=capacity,
        )
        chain.append(block)
    return chain


class TestTransaction:
    def test_requires_readings(self):
        with pytest.raises(ValueError):
            Transaction(1, 0, 0, ())

    def test_multi_reading_requires_step(self):
        with pytest.raises(ValueError):
            Transaction(1, 0, 0, (b"a", b"b"))

    def test_measurement_times_strictly_increase(self):
        t = Transaction(1, 100, 50, (b"a", b"b", b"c"))
        times = t.measurement_times()
        assert times == [100, 150, 200]
        assert all(a < b for a, b in zip(times, times[1:]))


class TestHashing:
    def test_primitive_matches_published_vector(self):
        assert hashlib.sha256(b"").hexdigest() == SHA256_EMPTY

    def test_digest_is_sha256_of_canonical_preimage(self):
        # Independent recomputation of the preimage layout.
        g = make_genesis(created_at=7, creator_id=3)
        preimage = (
            b"RBC1"
            + (0).to_bytes(8, "big")      # global_index
            + (3).to_bytes(8, "big")      # creator_id
            + (7).to_bytes(8, "big")      # created_at
            + ZERO_HASH                   # prev_hash
            + (0).to_bytes(4, "big")      # transaction count
        )
        assert g.header.hash == hashlib.sha256(preimage).digest()

    def test_deterministic(self):
        a = make_block(make_genesis(), 1, 1, [tx()], capacity=3)
        b = make_block(make_genesis(), 1, 1, [tx()], capacity=3)
        assert a.header.hash == b.header.hash

    def test_single_byte_change_changes_digest(self):
        base = make_block(make_genesis(), 1, 1, [tx(readings=(b"\x00\x01",))], capacity=3)
        flipped = make_block(make_genesis(), 1, 1, [tx(readings=(b"\x00\x00",))], capacity=3)
        assert base.header.hash != flipped.header.hash

    def test_selectable_algorithm(self):
        assert make_genesis(algo="sha3_256").header.hash != make_genesis().header.hash
        with pytest.raises(ValueError):
            make_genesis(algo="sha512")

    def test_cycle_tags_not_in_preimage(self):
        chain = build_chain(capacity=2, n_blocks=2)
        before = chain.tip.header.hash
        chain.prune_reset()
        assert chain.tip.header.hash == before


class TestAppend:
    def test_append_valid_block(self):
        chain = LocalChain(make_genesis(), 5)
        chain.append(make_block(chain.tip, 1, 1, [tx()], capacity=5))
        assert len(chain) == 2

    def test_bad_prev_hash(self):
        chain = build_chain(n_blocks=2)
        good = make_block(chain.tip, 9, 9, [tx()], capacity=5)
        from dataclasses import replace
        bad = Block(replace(good.header, prev_hash=b"\xaa" * 32), good.transactions)
        with pytest.raises(BadLinkage):
            chain.append(bad)
        assert len(chain) == 3  # unchanged

    def test_bad_index(self):
        chain = build_chain(n_blocks=2)
        good = make_block(chain.tip, 9, 9, [tx()], capacity=5)
        from dataclasses import replace
        header = replace(good.header, global_index=good.header.global_index + 1)
        with pytest.raises(BadIndex):
            chain.append(Block(header, good.transactions))

    def test_tampered_payload_rejected(self):
        chain = build_chain(n_blocks=2)
        good = make_block(chain.tip, 9, 9, [tx(readings=(b"\x01",))], capacity=5)
        forged = Block(good.header, (tx(readings=(b"\x02",)),))
        with pytest.raises(BadHash):
            chain.append(forged)

    def test_window_bound_enforced(self):
        chain = build_chain(capacity=3, n_blocks=3)
        with pytest.raises(WindowOverflow):
            chain.append(make_block(chain.tip, 9, 9, [tx()], capacity=3))

    def test_six_appends_yield_ordered_indices(self):
        chain = build_chain(capacity=6, n_blocks=6)
        assert [b.header.global_index for b in chain] == list(range(7))
        assert validate_chain(chain) == []


class TestPruneReset:
    def test_keeps_tip_as_next_cycle_zero(self):
        chain = build_chain(capacity=5, n_blocks=5)
        tip_hash = chain.tip.header.hash
        deleted = chain.prune_reset()
        assert [b.header.global_index for b in deleted] == [0, 1, 2, 3, 4]
        assert len(chain) == 1
        carried = chain.tip
        assert carried.header.hash == tip_hash
        assert carried.header.global_index == 5
        assert carried.header.cycle_index == 1
        assert carried.header.index_in_cycle == 0

    def test_smallest_cycle(self):
        chain = build_chain(capacity=1, n_blocks=1)
        deleted = chain.prune_reset()
        assert [b.header.global_index for b in deleted] == [0]
        assert chain.tip.header.global_index == 1

    def test_incomplete_cycle_rejected(self):
        chain = build_chain(capacity=5, n_blocks=3)
        with pytest.raises(CycleIncomplete):
            chain.prune_reset()

    def test_next_cycle_links_to_carried_block(self):
        chain = build_chain(capacity=3, n_blocks=3)
        carry_hash = chain.tip.header.hash
        chain.prune_reset()
        nxt = make_block(chain.tip, 7, 10, [tx()], capacity=3)
        chain.append(nxt)
        assert nxt.header.prev_hash == carry_hash
        assert validate_chain(chain) == []


class TestPruneSliding:
    def test_evicts_oldest(self):
        chain = build_chain(capacity=5, n_blocks=4)  # genesis + 4 = window of 5
        new = make_block(chain.tip, 9, 9, [tx()], capacity=5)
        evicted = chain.prune_sliding(new)
        assert evicted.header.global_index == 0
        assert [b.header.global_index for b in chain] == [1, 2, 3, 4, 5]
        assert validate_chain(chain) == []

    def test_capacity_one(self):
        chain = build_chain(capacity=1, n_blocks=0)
        b1 = make_block(chain.tip, 1, 1, [tx()], capacity=1)
        evicted = chain.prune_sliding(b1)
        assert evicted.header.global_index == 0
        assert [b.header.global_index for b in chain] == [1]

    def test_not_at_capacity(self):
        chain = build_chain(capacity=5, n_blocks=2)
        with pytest.raises(NotAtCapacity):
            chain.prune_sliding(make_block(chain.tip, 9, 9, [tx()], capacity=5))

    def test_window_tracks_unbounded_reference(self):
        # Independent oracle: an unbounded list of every block ever created.
        capacity = 5
        chain = build_chain(capacity=capacity, n_blocks=capacity - 1)
        reference = list(chain.blocks)
        for step in range(20):
            new = make_block(
                chain.tip, creator_id=step + 10, created_at=step + 10,
                transactions=[tx(sensor=step + 10)], capacity=capacity,
            )
            reference.append(new)
            chain.prune_sliding(new)
            assert chain.blocks == reference[-capacity:]


class TestFullChain:
    def run_cycles(self, capacity=4, cycles=3):
        chain = LocalChain(make_genesis(), capacity)
        records, history = [], [chain.tip]
        tick = 1
        for _ in range(cycles):
            for _ in range(capacity):
                block = make_block(chain.tip, tick, tick, [tx(sensor=tick)], capacity)
                chain.append(block)
                history.append(block)
                tick += 1
            records.append(list(chain.blocks))
            chain.prune_reset()
        return records, history

    def test_single_cycle(self):
        records, history = self.run_cycles(cycles=1)
        full = assemble_full_chain(records)
        assert full.genesis.header.global_index == 0
        assert full.flatten() == history

    def test_two_cycle_replay_overlap(self):
        records, history = self.run_cycles(cycles=2)
        full = assemble_full_chain(records)
        assert full.flatten() == history
        assert [b.header.global_index for b in full.flatten()] == list(range(9))
        assert validate_chain(full) == []

    def test_perturbed_overlap_rejected(self):
        records, _ = self.run_cycles(cycles=2)
        from dataclasses import replace
        head = records[1][0]
        records[1][0] = Block(
            replace(head.header, hash=bytes(32)), head.transactions
        )
        with pytest.raises((OverlapViolation, LinkageViolation)):
            assemble_full_chain(records)

    def test_unlinked_record_rejected(self):
        records, _ = self.run_cycles(cycles=1)
        records[0] = records[0][:2] + records[0][3:]  # drop an interior block
        with pytest.raises(LinkageViolation):
            assemble_full_chain(records)

    def test_matrix_rows_share_boundary_blocks(self):
        records, _ = self.run_cycles(cycles=3)
        matrix = assemble_full_chain(records).matrix()
        assert len(matrix) == 3
        for row, nxt in zip(matrix, matrix[1:]):
            assert row[-1].header.hash == nxt[0].header.hash


class TestValidateChain:
    def test_fresh_chain_is_clean(self):
        assert validate_chain(build_chain(capacity=6, n_blocks=6)) == []

    def test_mutated_transaction_names_exact_block(self):
        chain = build_chain(capacity=6, n_blocks=6)
        victim = chain.blocks[3]
        reading = victim.transactions[0].readings[0]
        forged_tx = Transaction(
            victim.transactions[0].sensor_id,
            victim.transactions[0].t0,
            victim.transactions[0].step,
            (bytes([reading[0] ^ 1]) + reading[1:],),
        )
        chain.blocks[3] = Block(victim.header, (forged_tx,))
        report = validate_chain(chain)
        assert [(v.kind, v.global_index) for v in report] == [("bad_hash", 3)]

    @pytest.mark.parametrize("victim", range(1, 6))
    def test_deleted_interior_block_breaks_successor(self, victim):
        chain = build_chain(capacity=6, n_blocks=6)
        del chain.blocks[victim]
        report = validate_chain(chain)
        kinds = {(v.kind, v.global_index) for v in report}
        assert ("bad_index", victim + 1) in kinds or ("bad_linkage", victim + 1) in kinds

    def test_cycle_tag_flip_detected(self):
        chain = build_chain(capacity=4, n_blocks=4)
        chain.prune_reset()
        from dataclasses import replace
        head = chain.blocks[0]
        chain.blocks[0] = Block(
            replace(head.header, cycle_index=head.header.cycle_index ^ 1),
            head.transactions,
        )
        assert any(v.kind == "bad_cycle_tag" for v in validate_chain(chain))


class TestSerialization:
    def test_round_trip(self):
        chain = build_chain(capacity=4, n_blocks=4)
        data = chain_to_bytes(chain.blocks)
        back = chain_from_bytes(data)
        assert back == chain.blocks
        assert validate_chain(back, capacity=4) == []

    def test_multi_reading_round_trip(self):
        t = Transaction(7, 5000, 250, (b"", b"\xff" * 3, b"x"))
        block = make_block(make_genesis(), 1, 1, [t], capacity=2)
        decoded, _ = block_from_bytes(block_to_bytes(block))
        assert decoded.transactions[0].readings == t.readings

    def test_bad_magic(self):
        data = bytearray(block_to_bytes(make_genesis()))
        data[0] ^= 0xFF
        with pytest.raises(SerializationError):
            block_from_bytes(bytes(data))

    def test_truncated(self):
        data = block_to_bytes(make_genesis())
        with pytest.raises(SerializationError):
            block_from_bytes(data[:-1])

    @given(st.data())
    @settings(max_examples=80, deadline=None)
    def test_any_bit_flip_is_detected(self, data):
        chain = build_chain(capacity=4, n_blocks=4)
        raw = bytearray(chain_to_bytes(chain.blocks))
        pos = data.draw(st.integers(0, len(raw) - 1))
        bit = data.draw(st.integers(0, 7))
        raw[pos] ^= 1 << bit
        try:
            blocks = chain_from_bytes(bytes(raw))
        except SerializationError:
            return  # detected at parse time
        assert validate_chain(blocks, capacity=4) != []


chain_ops = st.lists(st.sampled_from(["append", "cycle"]), min_size=0, max_size=30)


class TestWindowProperties:
    @given(ops=chain_ops, capacity=st.integers(1, 6))
    @settings(max_examples=60, deadline=None)
    def test_reset_mode_window_bound_and_rolling_equivalence(self, ops, capacity):
        chain = LocalChain(make_genesis(), capacity)
        reference = [chain.tip]
        deleted_all = []
        tick = 1
        for op in ops:
            if op == "append" and len(chain) <= capacity:
                block = make_block(chain.tip, tick, tick, [tx(sensor=tick)], capacity)
                chain.append(block)
                reference.append(block)
                tick += 1
            elif op == "cycle" and len(chain) == capacity + 1:
                deleted_all.extend(chain.prune_reset())
            assert len(chain) <= capacity + 1
            assert validate_chain(chain) == []
        # Deleted blocks + retained window reconstruct the unbounded history.
        rebuilt = deleted_all + list(chain.blocks)
        assert [b.header.hash for b in rebuilt] == [b.header.hash for b in reference]

    @given(steps=st.integers(0, 25), capacity=st.integers(1, 5))
    @settings(max_examples=60, deadline=None)
    def test_sliding_mode_window_bound_and_rolling_equivalence(self, steps, capacity):
        chain = LocalChain(make_genesis(), capacity)
        reference = [chain.tip]
        evicted_all = []
        for tick in range(1, steps + 1):
            block = make_block(chain.tip, tick, tick, [tx(sensor=tick)], capacity)
            reference.append(block)
            if len(chain) == capacity:
                evicted_all.append(chain.prune_sliding(block))
            else:
                chain.append(block)
            assert len(chain) <= capacity + 1
            assert validate_chain(chain) == []
        rebuilt = evicted_all + list(chain.blocks)
        assert rebuilt == reference
