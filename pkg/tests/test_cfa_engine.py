"""Log engine unit tests: entry packing, compression, capacity, decompression."""

import struct

import pytest
from hypothesis import given, settings, strategies as st

from cfaudit import cfa_engine as eng
from cfaudit.cfa_engine import (AppendResult, CfLog, MalformedLog, decompress,
                                encode_address, encode_count,
                                UNIT_PAIR, UNIT_SINGLE, UNIT_STATIC)

A, B, C = 0x1000, 0x2000, 0x3000


def test_every_entry_is_four_bytes():
    log = CfLog(capacity=64)
    log.append(A)
    log.append(B)
    assert log.size == 8
    assert len(log.to_bytes()) == 8


def test_address_entry_top_bit_clear():
    word = struct.unpack(">I", encode_address(0x7FFFFFFC))[0]
    assert word >> 31 == 0
    with pytest.raises(ValueError):
        encode_address(1 << 31)


def test_count_entry_top_bit_set():
    word = struct.unpack(">I", encode_count(UNIT_SINGLE, 3))[0]
    assert word >> 31 == 1
    assert (word >> 29) & 0x3 == UNIT_SINGLE
    assert word & eng.COUNT_MASK == 3


def test_plain_sequence_stored_verbatim():
    log = CfLog(capacity=64)
    for dest in (A, B, C):
        assert log.append(dest) is AppendResult.OK
    assert decompress(log.to_bytes()) == [A, B, C]


def test_backward_pair_repetition_compresses():
    log = CfLog(capacity=64)
    seq = [A, B, A, B, A, B]
    for i, dest in enumerate(seq):
        log.append(dest, backward=(dest == A and i > 0))
    log.flush_pending()
    assert log.size == 12
    assert decompress(log.to_bytes()) == seq


def test_backward_singleton_repetition_compresses():
    log = CfLog(capacity=64)
    log.append(A)
    for _ in range(4):
        log.append(A, backward=True)
    log.append(B)
    log.flush_pending()
    assert log.size == 12
    assert decompress(log.to_bytes()) == [A] * 5 + [B]


def test_forward_repetition_not_compressed():
    log = CfLog(capacity=64)
    for _ in range(3):
        log.append(A, backward=False)
    assert log.size == 12
    assert decompress(log.to_bytes()) == [A, A, A]


def test_pending_break_flushes_then_continues():
    log = CfLog(capacity=128)
    seq = [A, B, A, B, A, B, C, A]
    for i, dest in enumerate(seq):
        log.append(dest, backward=(dest == A and i > 0))
    log.flush_pending()
    assert decompress(log.to_bytes()) == seq


def test_partial_pair_repetition_flushes_prefix():
    log = CfLog(capacity=128)
    seq = [A, B, A, B, A, C]
    for i, dest in enumerate(seq):
        log.append(dest, backward=(dest == A and i > 0))
    log.flush_pending()
    assert decompress(log.to_bytes()) == seq


def test_static_loop_record_is_eight_bytes():
    log = CfLog(capacity=64)
    assert log.log_static_loop(0x100, 5) is AppendResult.OK
    assert log.size == 8
    assert decompress(log.to_bytes()) == [0x100] * 4


def test_static_loop_zero_and_one_limits():
    for limit, copies in [(0, 0), (1, 0), (2, 1)]:
        log = CfLog(capacity=64)
        log.log_static_loop(0x100, limit)
        assert decompress(log.to_bytes()) == [0x100] * copies


def test_append_at_capacity_reports_full_without_mutation():
    log = CfLog(capacity=8)
    log.append(A)
    log.append(B)
    before = log.to_bytes()
    assert log.append(C) is AppendResult.FULL
    assert log.to_bytes() == before
    assert log.size == 8


def test_static_loop_at_capacity_reports_full():
    log = CfLog(capacity=8)
    log.append(A)
    log.append(B)
    assert log.log_static_loop(0x100, 3) is AppendResult.FULL
    assert decompress(log.to_bytes()) == [A, B]


def test_pending_reserve_guarantees_flush_fits():
    log = CfLog(capacity=24)
    log.append(A)
    log.append(B, backward=False)
    log.append(A, backward=True)      # starts a pair unit, reserves room
    for _ in range(200):
        log.append(B, backward=False)
        log.append(A, backward=True)
    log.flush_pending()
    assert log.size <= 24
    stream = decompress(log.to_bytes())
    assert stream[0:2] == [A, B]


def test_full_then_flush_pending_still_fits():
    log = CfLog(capacity=16)
    log.append(A)
    log.append(A, backward=True)
    while log.append(C) is not AppendResult.FULL:
        pass
    log.flush_pending()
    assert log.size <= 16
    decompress(log.to_bytes())


def test_clear_resets_but_keeps_capacity():
    log = CfLog(capacity=32)
    log.append(A)
    log.clear()
    assert log.size == 0
    for _ in range(8):
        log.append(B)
    assert log.size == 32


def test_decompress_rejects_orphan_static_count():
    with pytest.raises(MalformedLog):
        decompress(encode_count(UNIT_STATIC, 4))


def test_decompress_rejects_count_without_preceding_addresses():
    data = encode_address(A) + encode_count(UNIT_PAIR, 2)
    with pytest.raises(MalformedLog):
        decompress(data)


def test_decompress_rejects_truncated_entry():
    with pytest.raises(MalformedLog):
        decompress(b"\x00\x00\x10")


def test_decompress_rejects_count_after_count():
    data = (encode_address(A)
            + encode_count(UNIT_SINGLE, 1)
            + encode_count(UNIT_SINGLE, 1))
    with pytest.raises(MalformedLog):
        decompress(data)


def test_external_buffer_is_written_in_place():
    buf = bytearray(64)
    log = CfLog(capacity=32, buffer=memoryview(buf))
    log.append(A)
    assert bytes(buf[0:4]) == encode_address(A)


@st.composite
def dest_streams(draw):
    addrs = draw(st.lists(st.sampled_from([A, B, C, 0x4000]), min_size=1, max_size=40))
    flags = draw(st.lists(st.booleans(), min_size=len(addrs), max_size=len(addrs)))
    return list(zip(addrs, flags))


@given(dest_streams())
@settings(max_examples=200, deadline=None)
def test_compression_round_trips(stream):
    log = CfLog(capacity=1 << 16)
    for dest, backward in stream:
        assert log.append(dest, backward=backward) is AppendResult.OK
    log.flush_pending()
    assert decompress(log.to_bytes()) == [dest for dest, _ in stream]


@given(dest_streams())
@settings(max_examples=100, deadline=None)
def test_compression_never_beats_identity_when_forward(stream):
    log = CfLog(capacity=1 << 16)
    for dest, _ in stream:
        log.append(dest, backward=False)
    log.flush_pending()
    assert log.size == 4 * len(stream)


@given(st.lists(st.tuples(st.sampled_from([A, B]), st.integers(0, 6)),
                min_size=0, max_size=10))
@settings(max_examples=100, deadline=None)
def test_static_records_round_trip(records):
    log = CfLog(capacity=1 << 16)
    expected = []
    for dest, limit in records:
        log.log_static_loop(dest, limit)
        expected += [dest] * max(limit - 1, 0)
    assert decompress(log.to_bytes()) == expected
