"""Index-format tests: round-trips, position estimation, optimistic window
search against a loaded-array binary-search oracle, and the header baseline."""

import bisect
import math
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from walstore.errors import CorruptionError
from walstore.index_format import (ENTRY_SIZE, HEADER_SIZE, BytesSource,
                                   CountingSource, IndexEntry, WindowConfig,
                                   entries_from_bytes, estimate_entry_index,
                                   header_lookup, load_all, optimistic_lookup,
                                   serialize_flat, serialize_header)


def make_key(value: int) -> bytes:
    return value.to_bytes(32, "big")


def random_entries(n: int, rng: random.Random) -> list[IndexEntry]:
    keys = sorted({rng.randbytes(32) for _ in range(n + 8)})[:n]
    assert len(keys) == n
    return [IndexEntry(k, rng.randrange(1 << 62)) for k in keys]


def oracle_lookup(entries: list[IndexEntry], key: bytes):
    """Independent oracle: binary search over the fully loaded array."""
    keys = [e.key for e in entries]
    i = bisect.bisect_left(keys, key)
    if i < len(entries) and keys[i] == key:
        return entries[i].position
    return None


# ----------------------------------------------------------------------
# flat serialization

def test_serialize_empty():
    assert serialize_flat([]) == b""


def test_serialize_single_entry_is_40_bytes():
    data = serialize_flat([IndexEntry(make_key(5), 77)])
    assert len(data) == ENTRY_SIZE
    assert data == make_key(5) + struct.pack("<Q", 77)


def test_round_trip_thousand_entries():
    rng = random.Random(7)
    entries = random_entries(1000, rng)
    data = serialize_flat(entries)
    assert len(data) == 40 * 1000
    assert load_all(BytesSource(data), 1000) == entries


def test_serialize_rejects_disorder():
    entries = [IndexEntry(make_key(2), 1), IndexEntry(make_key(1), 2)]
    with pytest.raises(ValueError):
        serialize_flat(entries)


def test_serialize_rejects_duplicate_keys():
    entries = [IndexEntry(make_key(2), 1), IndexEntry(make_key(2), 2)]
    with pytest.raises(ValueError):
        serialize_flat(entries)


def test_serialize_rejects_wrong_key_length():
    with pytest.raises(ValueError):
        serialize_flat([IndexEntry(b"short", 1)])


def test_load_rejects_misaligned_length():
    with pytest.raises(CorruptionError):
        entries_from_bytes(b"x" * 41)


def test_load_rejects_disorder():
    data = make_key(9) + struct.pack("<Q", 0) + make_key(3) + struct.pack("<Q", 0)
    with pytest.raises(CorruptionError):
        entries_from_bytes(data)


# ----------------------------------------------------------------------
# position estimation

def test_estimate_midpoint_key():
    key = bytes([0x80] + [0] * 31)
    assert estimate_entry_index(key, 1_000_000) == 500_000


def test_estimate_zero_key():
    for n in (1, 10, 12345):
        assert estimate_entry_index(bytes(32), n) == 0


def test_estimate_quarter_key():
    key = bytes([0x40] + [0] * 31)
    assert estimate_entry_index(key, 1000) == 250


def test_estimate_max_key_clamps():
    assert estimate_entry_index(b"\xff" * 32, 1000) == 999


@settings(max_examples=300, deadline=None)
@given(key=st.binary(min_size=32, max_size=32), n=st.integers(1, 1 << 40))
def test_estimate_matches_exact_floor(key, n):
    expected = (int.from_bytes(key, "big") * n) // (1 << 256)
    assert estimate_entry_index(key, n) == min(expected, n - 1)


# ----------------------------------------------------------------------
# optimistic lookup

def test_single_window_matches_binary_search():
    rng = random.Random(1)
    entries = random_entries(500, rng)  # n < W: one window covers the file
    source = BytesSource(serialize_flat(entries))
    for _ in range(200):
        key = rng.choice(entries).key if rng.random() < 0.5 else rng.randbytes(32)
        outcome = optimistic_lookup(source, 500, key)
        assert outcome.iterations == 1
        assert outcome.position == oracle_lookup(entries, key)


def test_oracle_equivalence_random_probes():
    rng = random.Random(2)
    entries = random_entries(20_000, rng)
    source = BytesSource(serialize_flat(entries))
    for _ in range(2_000):
        key = rng.choice(entries).key if rng.random() < 0.5 else rng.randbytes(32)
        outcome = optimistic_lookup(source, len(entries), key)
        assert outcome.position == oracle_lookup(entries, key)
        assert outcome.iterations >= 1


def test_empty_index_lookup():
    outcome = optimistic_lookup(BytesSource(b""), 0, make_key(1))
    assert outcome.position is None and outcome.iterations == 0


def clustered_entries(n: int) -> list[IndexEntry]:
    """Adversarial keys packed into a tiny slice of the key space, so the
    uniform estimate is maximally wrong."""
    base = int.from_bytes(b"\xf0" + bytes(31), "big")
    return [IndexEntry((base + i).to_bytes(32, "big"), i) for i in range(n)]


def test_termination_bound_on_clustered_keys():
    n, window = 5_000, 64
    entries = clustered_entries(n)
    source = BytesSource(serialize_flat(entries))
    cfg = WindowConfig(window)
    bound = math.ceil(n / (window - 1))
    rng = random.Random(3)
    probes = [e.key for e in rng.sample(entries, 50)]
    probes += [bytes(32), b"\xff" * 32, b"\x01" + bytes(31)]
    for key in probes:
        outcome = optimistic_lookup(source, n, key, cfg)
        assert outcome.iterations <= bound
        assert outcome.position == oracle_lookup(entries, key)


def test_edge_keys_exit_without_extra_reads():
    entries = clustered_entries(3_000)
    data = serialize_flat(entries)
    cfg = WindowConfig(100)
    # far below every key: window walks to offset 0 and stops there
    below = bytes(32)
    source = CountingSource(BytesSource(data))
    outcome = optimistic_lookup(source, 3_000, below, cfg)
    assert outcome.position is None
    assert outcome.iterations == source.reads
    # far above every key: estimate clamps to the file-end window, one read
    above = b"\xff" * 32
    source = CountingSource(BytesSource(data))
    outcome = optimistic_lookup(source, 3_000, above, cfg)
    assert outcome.position is None
    assert outcome.iterations == 1


def test_read_volume_per_iteration():
    rng = random.Random(4)
    n, window = 10_000, 800
    entries = random_entries(n, rng)
    source = CountingSource(BytesSource(serialize_flat(entries)))
    probes = [rng.randbytes(32) for _ in range(50)]
    total_iterations = 0
    for key in probes:
        outcome = optimistic_lookup(source, n, key, WindowConfig(window))
        total_iterations += outcome.iterations
    assert source.reads == total_iterations
    assert source.bytes_read == total_iterations * min(window, n) * ENTRY_SIZE


def test_window_coverage_hit_rate():
    """Uniform keys, W=800: the first window contains the key >= 99% of the
    time for files in the 10k-100k range."""
    rng = random.Random(5)
    for n in (10_000, 50_000):
        entries = random_entries(n, rng)
        source = BytesSource(serialize_flat(entries))
        trials = 2_000
        first_try = 0
        for _ in range(trials):
            key = rng.choice(entries).key
            outcome = optimistic_lookup(source, n, key, WindowConfig(800))
            assert outcome.position is not None
            if outcome.iterations == 1:
                first_try += 1
        assert first_try / trials >= 0.99


def test_malformed_window_raises():
    entries = [IndexEntry(make_key(3), 1), IndexEntry(make_key(2), 2),
               IndexEntry(make_key(1), 3)]
    data = b"".join(e.key + struct.pack("<Q", e.position) for e in entries)
    with pytest.raises(CorruptionError):
        optimistic_lookup(BytesSource(data), 3, make_key(2))


# ----------------------------------------------------------------------
# header format

def test_header_empty_index():
    data = serialize_header([])
    assert len(data) == HEADER_SIZE
    assert data == b"\x00" * HEADER_SIZE


def test_header_single_entry_bucket_zero():
    entry = IndexEntry(bytes(32), 9)  # top 7 bits = 0 -> bucket 0
    data = serialize_header([entry])
    offsets = struct.unpack("<128Q", data[:HEADER_SIZE])
    assert offsets[0] == 0
    assert all(off == 40 for off in offsets[1:])
    assert data[HEADER_SIZE:] == serialize_flat([entry])


def test_header_bucket_slices_reassemble():
    rng = random.Random(6)
    entries = random_entries(1000, rng)
    data = serialize_header(entries)
    offsets = list(struct.unpack("<128Q", data[:HEADER_SIZE]))
    offsets.append(len(data) - HEADER_SIZE)
    body = data[HEADER_SIZE:]
    reassembled = []
    for b in range(128):
        chunk = body[offsets[b]:offsets[b + 1]]
        slice_entries = entries_from_bytes(chunk)
        assert all(e.key[0] >> 1 == b for e in slice_entries)
        reassembled.extend(slice_entries)
    assert reassembled == entries


def test_header_lookup_uses_exactly_two_reads():
    rng = random.Random(7)
    entries = random_entries(2_000, rng)
    source = CountingSource(BytesSource(serialize_header(entries)))
    probes = [rng.randbytes(32) for _ in range(64)]
    probes += [e.key for e in rng.sample(entries, 64)]
    probes += [b"\xff" * 32, bytes(32)]  # first and last bucket edges
    for key in probes:
        before = source.reads
        header_lookup(source, key)
        assert source.reads - before == 2


def test_header_lookup_matches_oracle():
    rng = random.Random(8)
    entries = random_entries(3_000, rng)
    source = BytesSource(serialize_header(entries))
    for _ in range(2_000):
        key = rng.choice(entries).key if rng.random() < 0.5 else rng.randbytes(32)
        assert header_lookup(source, key) == oracle_lookup(entries, key)


def test_header_lookup_empty_bucket_absent():
    # single entry in bucket 0; probing bucket 64 hits an empty region
    entries = [IndexEntry(bytes(32), 1)]
    source = CountingSource(BytesSource(serialize_header(entries)))
    key = bytes([0x80]) + bytes(31)
    assert header_lookup(source, key) is None
    assert source.reads == 2


def test_header_lookup_detects_disorder():
    good = serialize_header([IndexEntry(make_key(1), 1), IndexEntry(make_key(2), 2)])
    body = bytearray(good)
    first = body[HEADER_SIZE:HEADER_SIZE + 40]
    second = body[HEADER_SIZE + 40:HEADER_SIZE + 80]
    body[HEADER_SIZE:HEADER_SIZE + 40] = second
    body[HEADER_SIZE + 40:HEADER_SIZE + 80] = first
    with pytest.raises(CorruptionError):
        header_lookup(BytesSource(bytes(body)), make_key(1))


# ----------------------------------------------------------------------
# cross-format equivalence

def test_three_way_oracle_equivalence():
    rng = random.Random(9)
    for n in (1, 100, 5_000):
        entries = random_entries(n, rng)
        flat = BytesSource(serialize_flat(entries))
        headered = BytesSource(serialize_header(entries))
        for _ in range(500):
            key = rng.choice(entries).key if rng.random() < 0.5 else rng.randbytes(32)
            expected = oracle_lookup(entries, key)
            assert optimistic_lookup(flat, n, key).position == expected
            assert header_lookup(headered, key) == expected
