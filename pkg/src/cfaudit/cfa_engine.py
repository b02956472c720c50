"""Append-only control-flow log with backward-edge compression.

Entries are 4-byte big-endian words. The MSB is a tag bit:

    0  branch destination address (31-bit payload)
    1  loop-count record; bits 30..29 select the repetition unit
       (0 = static-loop limit, 1 = preceding single entry,
        2 = preceding pair of entries) and bits 28..0 hold the count.

Count records for dynamic loops mean "the unit repeats COUNT additional
times beyond its logged occurrence". A static-loop record is the pair
(header address, limit) written atomically; it expands to max(limit-1, 0)
occurrences of the header, the number of backward traversals a canonical
counted loop performs.

Compression only collapses immediate repetition anchored at a backward
edge whose destination matches the last one or two committed entries; no
general pattern mining. Appends that merely extend a pending repetition
do not grow the log, which is what bounds log size for hot loops.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

ENTRY_WIDTH = 4
TAG_BIT = 1 << 31
UNIT_SHIFT = 29
UNIT_MASK = 0b11 << UNIT_SHIFT
UNIT_STATIC = 0
UNIT_SINGLE = 1
UNIT_PAIR = 2
COUNT_MASK = (1 << UNIT_SHIFT) - 1
ADDR_MASK = TAG_BIT - 1

# Bytes a pending repetition may need when it collapses back into the
# log: one count record plus one partially matched unit element.
PENDING_RESERVE = 8

DEFAULT_LOG_MAX = 50 * 1024


class InactiveEngine(Exception):
    """Append attempted while the audit status flag is inactive."""


class MalformedLog(Exception):
    """Entry stream violates the format; carries the entry index."""

    def __init__(self, index: int, msg: str = "malformed log"):
        super().__init__(f"{msg} at entry {index}")
        self.index = index


class AppendResult:
    OK = "ok"
    FULL = "full"


def encode_address(addr: int) -> bytes:
    if not 0 <= addr < TAG_BIT:
        raise ValueError(f"address {addr:#x} exceeds 31 bits")
    return struct.pack(">I", addr)


def encode_count(unit: int, count: int) -> bytes:
    count = min(count, COUNT_MASK)
    return struct.pack(">I", TAG_BIT | (unit << UNIT_SHIFT) | count)


@dataclass
class PendingLoop:
    """An in-flight repetition not yet flushed to the log."""

    unit: tuple[int, ...]   # one or two destination addresses
    count: int              # completed additional repetitions
    pos: int                # elements of the current repetition matched


class CfLog:
    """Bounded append-only log, optionally backed by an external buffer
    (the retained-memory window) so entries survive machine resets."""

    def __init__(self, capacity: int = DEFAULT_LOG_MAX, buffer: memoryview | None = None):
        if buffer is not None and len(buffer) < capacity:
            raise ValueError("backing buffer smaller than capacity")
        self.capacity = capacity
        self.buf = buffer if buffer is not None else memoryview(bytearray(capacity))
        self.size = 0
        self.active = True
        self.pending: PendingLoop | None = None
        # kinds/values of the last two committed entries, for unit matching
        self._tail: list[tuple[bool, int]] = []   # (is_address, value)

    # -- raw entry plumbing ----------------------------------------------

    def _commit(self, word: bytes, is_addr: bool, value: int) -> None:
        self.buf[self.size:self.size + ENTRY_WIDTH] = word
        self.size += ENTRY_WIDTH
        self._tail.append((is_addr, value))
        del self._tail[:-2]

    def _flush_bytes_needed(self) -> int:
        if self.pending is None:
            return 0
        p = self.pending
        return (ENTRY_WIDTH if p.count > 0 else 0) + ENTRY_WIDTH * p.pos

    def _flush(self) -> None:
        p = self.pending
        if p is None:
            return
        if p.count > 0:
            unit_kind = UNIT_PAIR if len(p.unit) == 2 else UNIT_SINGLE
            self._commit(encode_count(unit_kind, p.count), False, p.count)
        for elem in p.unit[:p.pos]:
            self._commit(encode_address(elem), True, elem)
        self.pending = None

    # -- public operations --------------------------------------------------

    def append(self, dest: int, backward: bool = False) -> str:
        """Log one dynamic branch destination. Returns AppendResult.FULL,
        leaving the log unmodified, when the entry cannot fit."""
        if not self.active:
            raise InactiveEngine("audit engine is inactive")

        p = self.pending
        if p is not None:
            if dest == p.unit[p.pos]:
                p.pos += 1
                if p.pos == len(p.unit):
                    p.count += 1
                    p.pos = 0
                return AppendResult.OK
            # repetition broken: flush, then handle dest as a fresh append
            need = self._flush_bytes_needed() + ENTRY_WIDTH
            if self.size + need > self.capacity:
                return AppendResult.FULL
            self._flush()

        if backward:
            unit = self._match_tail(dest)
            if unit is not None and self.size + PENDING_RESERVE <= self.capacity:
                self.pending = PendingLoop(unit, 0, 0)
                p = self.pending
                p.pos = 1
                if p.pos == len(unit):
                    p.count, p.pos = 1, 0
                return AppendResult.OK

        if self.size + ENTRY_WIDTH > self.capacity:
            return AppendResult.FULL
        self._commit(encode_address(dest), True, dest)
        return AppendResult.OK

    def _match_tail(self, dest: int) -> tuple[int, ...] | None:
        t = self._tail
        if t and t[-1] == (True, dest):
            return (dest,)
        if len(t) == 2 and t[0] == (True, dest) and t[1][0]:
            return (dest, t[1][1])
        return None

    def log_static_loop(self, dest: int, limit: int) -> str:
        """Record a counted loop as (header address, limit): 8 bytes total."""
        if not self.active:
            raise InactiveEngine("audit engine is inactive")
        need = self._flush_bytes_needed() + 2 * ENTRY_WIDTH
        if self.size + need > self.capacity:
            return AppendResult.FULL
        self._flush()
        self._commit(encode_address(dest), True, dest)
        self._commit(encode_count(UNIT_STATIC, limit), False, limit)
        return AppendResult.OK

    def flush_pending(self) -> None:
        """Materialize any pending repetition; called before every report
        so each transmitted slice is self-contained."""
        self._flush()

    def clear(self) -> None:
        """Drop the acknowledged slice."""
        self.size = 0
        self.pending = None
        self._tail = []

    def to_bytes(self) -> bytes:
        return bytes(self.buf[:self.size])

    # -- suspend/resume ----------------------------------------------------
    #
    # The buffer itself can sit in retained memory, but the matcher state
    # (in-flight repetition and committed tail) lives in engine RAM and
    # would vanish on a power cycle, silently dropping destinations that
    # were already acknowledged as appended. Checkpointing it alongside the
    # buffer keeps the log complete across resets.

    STATE_WIDTH = 24

    def checkpoint(self) -> bytes:
        p = self.pending
        unit = (p.unit + (0, 0))[:2] if p else (0, 0)
        tail_flags = sum(1 << i for i, (is_addr, _) in enumerate(self._tail)
                         if is_addr)
        tail_vals = [v for _, v in self._tail] + [0, 0]
        return struct.pack(">BBIIIBBII",
                           len(p.unit) if p else 0,
                           p.pos if p else 0,
                           p.count if p else 0,
                           unit[0], unit[1],
                           len(self._tail), tail_flags,
                           tail_vals[0], tail_vals[1])

    def restore(self, state: bytes) -> None:
        (unit_len, pos, count, u0, u1,
         tail_len, tail_flags, t0, t1) = struct.unpack(">BBIIIBBII", state)
        self.pending = None
        if unit_len:
            self.pending = PendingLoop((u0, u1)[:unit_len], count, pos)
        self._tail = [(bool(tail_flags >> i & 1), v)
                      for i, v in enumerate((t0, t1)[:tail_len])]


def iter_entries(data: bytes):
    if len(data) % ENTRY_WIDTH:
        raise MalformedLog(len(data) // ENTRY_WIDTH, "truncated entry")
    for i in range(0, len(data), ENTRY_WIDTH):
        yield struct.unpack_from(">I", data, i)[0]


def decompress(data: bytes) -> list[int]:
    """Expand an entry stream back to the raw dynamic destination sequence.

    Inverse of the append-side compression; raises MalformedLog when a
    count record lacks the entries its unit refers to.
    """
    words = list(iter_entries(data))
    out: list[int] = []
    i = 0
    n = len(words)
    while i < n:
        w = words[i]
        if not w & TAG_BIT:
            addr = w & ADDR_MASK
            if i + 1 < n and words[i + 1] & TAG_BIT \
                    and (words[i + 1] & UNIT_MASK) >> UNIT_SHIFT == UNIT_STATIC:
                limit = words[i + 1] & COUNT_MASK
                out.extend([addr] * max(limit - 1, 0))
                i += 2
                continue
            out.append(addr)
            i += 1
            continue
        unit_kind = (w & UNIT_MASK) >> UNIT_SHIFT
        count = w & COUNT_MASK
        if unit_kind == UNIT_STATIC:
            raise MalformedLog(i, "static loop count without header entry")
        width = 1 if unit_kind == UNIT_SINGLE else 2
        if i < width or any(words[i - k] & TAG_BIT for k in range(1, width + 1)):
            raise MalformedLog(i, "count record lacks preceding unit")
        unit = [words[i - k] & ADDR_MASK for k in range(width, 0, -1)]
        out.extend(unit * count)
        i += 1
    return out
