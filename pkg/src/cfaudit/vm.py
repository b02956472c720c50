"""Two-world micro-machine: Non-Secure app execution under Secure-World control.

The machine executes the toy ISA from :mod:`cfaudit.isa`. Non-Secure code is
subject to a permission map and a secure watchdog timer; Secure-World code
(the monitor, modeled at the Python level) has unrestricted access. Entering
the secure-gateway window from the Non-Secure world never executes bytes, it
yields an ``NscEntry`` event instead, standing in for gateway veneer code.

Faults never raise: they come back as ``Fault`` events so the caller can
route them through the reset path the way the hardware would.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field

from . import isa
from .isa import (
    DMEM_BASE, DMEM_SIZE, INSTR_WIDTH, LR, NSC_BASE, NSC_SIZE, PC,
    PMEM_BASE, PMEM_CAPACITY, RETAINED_BASE, RETAINED_SIZE, SECURE_BASE,
    SECURE_SIZE, SP, STACK_TOP,
)

MASK32 = 0xFFFFFFFF


class World(enum.Enum):
    SECURE = "secure"
    NONSECURE = "nonsecure"


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


class FaultKind(enum.Enum):
    READ_VIOLATION = "read_violation"
    WRITE_VIOLATION = "write_violation"
    EXEC_VIOLATION = "exec_violation"
    UNMAPPED = "unmapped"
    UNALIGNED = "unaligned"
    ILLEGAL_INSTRUCTION = "illegal_instruction"


class WorldViolation(Exception):
    """Secure-only operation attempted from the wrong world."""


class UnmappedAddress(Exception):
    """Address belongs to no region."""

    def __init__(self, addr: int):
        super().__init__(f"unmapped address {addr:#x}")
        self.addr = addr


# --- events -------------------------------------------------------------

@dataclass(frozen=True)
class Executed:
    pc: int


@dataclass(frozen=True)
class TimerTrigger:
    """Watchdog deadline reached before the next Non-Secure instruction."""


@dataclass(frozen=True)
class NscSnapshot:
    """Register context captured at a secure-gateway entry."""

    regs: tuple[int, ...]
    caller_pc: int        # address of the branch that entered the gateway
    pre_caller_pc: int    # address of the instruction executed before that
    prev_lr: int          # lr value before the most recent lr write

    @property
    def lr(self) -> int:
        return self.regs[LR]

    @property
    def r10(self) -> int:
        return self.regs[10]

    @property
    def r11(self) -> int:
        return self.regs[11]


@dataclass(frozen=True)
class NscEntry:
    addr: int             # which gateway entry point
    snapshot: NscSnapshot


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    addr: int


@dataclass(frozen=True)
class Halted:
    pass


Event = Executed | TimerTrigger | NscEntry | Fault | Halted


# --- permissions ---------------------------------------------------------

@dataclass
class Region:
    name: str
    base: int
    size: int
    world: World
    read: bool
    write: bool
    execute: bool

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size


class PermissionMap:
    """Per-region access flags enforced on Non-Secure accesses only.

    The Secure World passes every check: on the modeled hardware the secure
    side owns the attribution unit and is trusted with full access.
    """

    def __init__(self, pmem_size: int):
        self.regions = {
            "pmem": Region("pmem", PMEM_BASE, pmem_size, World.NONSECURE, True, True, True),
            "dmem": Region("dmem", DMEM_BASE, DMEM_SIZE, World.NONSECURE, True, True, False),
            "secure": Region("secure", SECURE_BASE, SECURE_SIZE, World.SECURE, True, True, False),
            "retained": Region("retained", RETAINED_BASE, RETAINED_SIZE, World.SECURE, True, True, False),
        }
        self.ns_reconfigurable = True
        self.pmem_locked = False

    def region_at(self, addr: int) -> Region | None:
        for r in self.regions.values():
            if r.contains(addr):
                return r
        return None

    def check_access(self, addr: int, kind: AccessKind, world: World) -> bool:
        """True when allowed; False on a violation. Raises UnmappedAddress."""
        r = self.region_at(addr)
        if r is None:
            raise UnmappedAddress(addr)
        if world is World.SECURE:
            return True
        if r.world is not World.NONSECURE:
            return False
        if kind is AccessKind.READ:
            return r.read
        if kind is AccessKind.WRITE:
            return r.write
        return r.execute


def check_access(pm: PermissionMap, addr: int, kind: AccessKind, world: World) -> bool:
    return pm.check_access(addr, kind, world)


# --- secure timer --------------------------------------------------------

@dataclass
class SecureTimer:
    """Counts Non-Secure instructions; the deadline cannot be silenced
    from the Non-Secure side."""

    delta: int = 0
    elapsed: int = 0
    active: bool = False
    paused: bool = False

    def arm(self, delta: int) -> None:
        self.delta = delta
        self.elapsed = 0
        self.active = True
        self.paused = False

    def clear_and_pause(self) -> None:
        self.elapsed = 0
        self.paused = True

    def resume(self) -> None:
        self.elapsed = 0
        self.paused = False

    def deactivate(self) -> None:
        self.active = False
        self.paused = False
        self.elapsed = 0

    @property
    def expired(self) -> bool:
        return self.active and not self.paused and self.elapsed >= self.delta


# --- machine -------------------------------------------------------------

class Machine:
    """Registers, four memory regions, permission map, and secure timer."""

    def __init__(self, pmem: bytes):
        if len(pmem) > PMEM_CAPACITY:
            raise ValueError("program exceeds pmem capacity")
        self.pmem = bytearray(pmem)
        self.dmem = bytearray(DMEM_SIZE)
        self.secure_mem = bytearray(SECURE_SIZE)
        self.retained_mem = bytearray(RETAINED_SIZE)
        self.perm = PermissionMap(len(self.pmem))
        self.timer = SecureTimer()
        self.regs = [0] * 16
        self.regs[SP] = STACK_TOP
        self.regs[PC] = PMEM_BASE
        self.world = World.SECURE
        self.halted = False
        self.cycle_count = 0
        self.flag_z = False
        self.flag_n = False
        # bookkeeping for gateway snapshots
        self.last_exec_pc = 0
        self.prev_exec_pc = 0
        self.prev_lr = 0
        self._decode_cache: dict[int, isa.Instruction | None] = {}
        self.access_trace: list[tuple[World, AccessKind, int, bool]] | None = None

    # -- registers ------------------------------------------------------

    @property
    def pc(self) -> int:
        return self.regs[PC]

    @pc.setter
    def pc(self, v: int) -> None:
        self.regs[PC] = v & MASK32

    # -- memory ---------------------------------------------------------

    def _backing(self, addr: int) -> tuple[bytearray, int] | None:
        r = self.perm.region_at(addr)
        if r is None:
            return None
        store = {"pmem": self.pmem, "dmem": self.dmem,
                 "secure": self.secure_mem, "retained": self.retained_mem}[r.name]
        return store, addr - r.base

    def _checked(self, addr: int, kind: AccessKind) -> FaultKind | None:
        """Permission check for the current world; returns a fault kind or None."""
        try:
            ok = self.perm.check_access(addr, kind, self.world)
        except UnmappedAddress:
            if self.access_trace is not None:
                self.access_trace.append((self.world, kind, addr, False))
            return FaultKind.UNMAPPED
        if self.world is World.NONSECURE and self.perm.pmem_locked \
                and kind is AccessKind.WRITE and self.perm.regions["pmem"].contains(addr):
            ok = False
        if self.access_trace is not None:
            self.access_trace.append((self.world, kind, addr, ok))
        if not ok:
            return {
                AccessKind.READ: FaultKind.READ_VIOLATION,
                AccessKind.WRITE: FaultKind.WRITE_VIOLATION,
                AccessKind.EXECUTE: FaultKind.EXEC_VIOLATION,
            }[kind]
        return None

    def load_word(self, addr: int) -> int:
        store, off = self._backing(addr)
        return struct.unpack_from(">I", store, off)[0]

    def store_word(self, addr: int, value: int) -> None:
        store, off = self._backing(addr)
        struct.pack_into(">I", store, off, value & MASK32)
        if store is self.pmem:
            self._decode_cache.pop(addr, None)

    def write_pmem(self, addr: int, data: bytes) -> None:
        """Secure-side program-memory write (provisioning, remediation)."""
        off = addr - PMEM_BASE
        if not 0 <= off <= len(self.pmem) - len(data):
            raise UnmappedAddress(addr)
        self.pmem[off:off + len(data)] = data
        self._decode_cache.clear()

    # -- secure-world operations -----------------------------------------

    def hash_pmem(self) -> bytes:
        return hashlib.sha256(bytes(self.pmem)).digest()

    def lock_pmem(self) -> None:
        """Read/execute-only pmem, non-executable dmem, NS reconfig revoked."""
        if self.world is not World.SECURE:
            raise WorldViolation("lock_pmem requires Secure World")
        self.perm.pmem_locked = True
        self.perm.regions["pmem"].write = False
        self.perm.regions["dmem"].execute = False
        self.perm.ns_reconfigurable = False

    def unlock_pmem(self) -> None:
        if self.world is not World.SECURE:
            raise WorldViolation("unlock_pmem requires Secure World")
        self.perm.pmem_locked = False
        self.perm.regions["pmem"].write = True
        self.perm.ns_reconfigurable = True

    def reset(self) -> None:
        """Warm reset: volatile state cleared, pmem and retained preserved."""
        self.regs = [0] * 16
        self.regs[SP] = STACK_TOP
        self.regs[PC] = PMEM_BASE
        self.dmem = bytearray(DMEM_SIZE)
        self.secure_mem = bytearray(SECURE_SIZE)
        self.timer = SecureTimer()
        self.perm = PermissionMap(len(self.pmem))
        self.world = World.SECURE
        self.halted = False
        self.cycle_count = 0
        self.flag_z = False
        self.flag_n = False
        self.last_exec_pc = 0
        self.prev_exec_pc = 0
        self.prev_lr = 0

    def enter_nonsecure(self, entry: int) -> None:
        if self.world is not World.SECURE:
            raise WorldViolation("world switch is a Secure-World operation")
        self.world = World.NONSECURE
        self.pc = entry

    def enter_secure(self) -> None:
        self.world = World.SECURE

    # -- execution --------------------------------------------------------

    def _fetch(self, addr: int) -> isa.Instruction | None:
        inst = self._decode_cache.get(addr)
        if inst is None and addr not in self._decode_cache:
            store, off = self._backing(addr)
            inst = isa.decode(bytes(store[off:off + INSTR_WIDTH]))
            self._decode_cache[addr] = inst
        return inst

    def _set_lr(self, value: int) -> None:
        self.prev_lr = self.regs[LR]
        self.regs[LR] = value & MASK32

    def step(self) -> Event:
        """Execute one cycle. Never raises for program behavior: bad accesses
        and bad encodings come back as Fault events with pc unchanged."""
        self.cycle_count += 1
        if self.halted:
            return Halted()

        if self.world is World.NONSECURE:
            if self.timer.expired:
                # deadline wins before the next instruction executes
                self.world = World.SECURE
                return TimerTrigger()
            if NSC_BASE <= self.pc < NSC_BASE + NSC_SIZE:
                snap = NscSnapshot(tuple(self.regs), self.last_exec_pc,
                                   self.prev_exec_pc, self.prev_lr)
                self.world = World.SECURE
                return NscEntry(self.pc, snap)

        pc = self.pc
        if pc % INSTR_WIDTH:
            return Fault(FaultKind.UNALIGNED, pc)
        fk = self._checked(pc, AccessKind.EXECUTE)
        if fk is not None:
            return Fault(fk, pc)
        inst = self._fetch(pc)
        if inst is None:
            return Fault(FaultKind.ILLEGAL_INSTRUCTION, pc)

        ev = self._execute(inst, pc)
        if isinstance(ev, (Executed, Halted)) and not isinstance(ev, Fault):
            self.prev_exec_pc = self.last_exec_pc
            self.last_exec_pc = pc
            if self.world is World.NONSECURE and self.timer.active and not self.timer.paused:
                self.timer.elapsed += 1
        return ev

    def _execute(self, inst: isa.Instruction, pc: int) -> Event:
        op, ra, rb, imm = inst.op, inst.ra, inst.rb, inst.imm
        regs = self.regs
        next_pc = pc + INSTR_WIDTH

        if op == isa.OP_MOV_IMM:
            if ra == LR:
                self._set_lr(imm)
            else:
                regs[ra] = imm
        elif op == isa.OP_MOV_REG:
            if ra == LR:
                self._set_lr(regs[rb])
            else:
                regs[ra] = regs[rb]
        elif op == isa.OP_LDR:
            addr = (regs[rb] + imm) & MASK32
            if addr % 4:
                return Fault(FaultKind.UNALIGNED, addr)
            fk = self._checked(addr, AccessKind.READ)
            if fk is not None:
                return Fault(fk, addr)
            regs[ra] = self.load_word(addr)
        elif op == isa.OP_STR:
            addr = (regs[rb] + imm) & MASK32
            if addr % 4:
                return Fault(FaultKind.UNALIGNED, addr)
            fk = self._checked(addr, AccessKind.WRITE)
            if fk is not None:
                return Fault(fk, addr)
            self.store_word(addr, regs[ra])
        elif op == isa.OP_ADD_RI:
            regs[ra] = (regs[rb] + imm) & MASK32
        elif op == isa.OP_ADD_RR:
            regs[ra] = (regs[rb] + regs[imm]) & MASK32
        elif op == isa.OP_SUB_RI:
            regs[ra] = (regs[rb] - imm) & MASK32
        elif op == isa.OP_SUB_RR:
            regs[ra] = (regs[rb] - regs[imm]) & MASK32
        elif op == isa.OP_CMP_RI:
            self._set_flags(regs[ra], imm)
        elif op == isa.OP_CMP_RR:
            self._set_flags(regs[ra], regs[rb])
        elif op == isa.OP_B:
            self.pc = imm
            return Executed(pc)
        elif op == isa.OP_BCOND:
            if self._cond(ra):
                self.pc = imm
            else:
                self.pc = next_pc
            return Executed(pc)
        elif op == isa.OP_BL:
            self._set_lr(next_pc)
            self.pc = imm
            return Executed(pc)
        elif op == isa.OP_BLX:
            self._set_lr(next_pc)
            self.pc = regs[ra] & MASK32
            return Executed(pc)
        elif op == isa.OP_BX_LR:
            self.pc = regs[LR]
            return Executed(pc)
        elif op == isa.OP_PUSH:
            addr = (regs[SP] - 4) & MASK32
            if addr % 4:
                return Fault(FaultKind.UNALIGNED, addr)
            fk = self._checked(addr, AccessKind.WRITE)
            if fk is not None:
                return Fault(fk, addr)
            regs[SP] = addr
            self.store_word(addr, regs[ra])
        elif op == isa.OP_POP:
            addr = regs[SP]
            if addr % 4:
                return Fault(FaultKind.UNALIGNED, addr)
            fk = self._checked(addr, AccessKind.READ)
            if fk is not None:
                return Fault(fk, addr)
            val = self.load_word(addr)
            regs[SP] = (addr + 4) & MASK32
            if ra == PC:
                self.pc = val
                return Executed(pc)
            if ra == LR:
                self._set_lr(val)
            else:
                regs[ra] = val
        elif op == isa.OP_NSC_CALL:
            if self.world is World.NONSECURE:
                # protected return into the Secure World; traps next step
                self.pc = isa.NSC_EXIT
                return Executed(pc)
            # without a monitor attached the gateway return ends execution
            self.halted = True
            return Halted()
        elif op == isa.OP_HALT:
            self.halted = True
            return Halted()
        else:  # pragma: no cover - decode() filters unknown opcodes
            return Fault(FaultKind.ILLEGAL_INSTRUCTION, pc)

        self.pc = next_pc
        return Executed(pc)

    def _set_flags(self, a: int, b: int) -> None:
        sa = a - (1 << 32) if a & 0x80000000 else a
        sb = b - (1 << 32) if b & 0x80000000 else b
        self.flag_z = sa == sb
        self.flag_n = sa < sb

    def _cond(self, code: int) -> bool:
        z, n = self.flag_z, self.flag_n
        return {
            isa.COND_EQ: z,
            isa.COND_NE: not z,
            isa.COND_LT: n,
            isa.COND_GE: not n,
            isa.COND_GT: not n and not z,
            isa.COND_LE: n or z,
        }[code]


def load_program(asm_text: str) -> Machine:
    """Assemble and install a program; machine starts in the Secure World
    with pc at the entry label."""
    prog = isa.assemble(asm_text)
    m = Machine(prog.image)
    m.pc = prog.entry
    return m


def hash_pmem(m: Machine) -> bytes:
    return m.hash_pmem()
