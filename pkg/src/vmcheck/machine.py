"""Bit-exact model of a small x86-64 fragment with 4-level paging.

Machine state is a register file plus a sparse two-level physical memory
map: an outer finite map from 52-bit frame numbers to inner finite maps
from 12-bit page offsets to 64-bit words.  All memory is word-granular;
inner keys are always multiples of 8.  Reads of absent words fault;
writes also require the word to exist (the memory domain is the set of
allocated words, and fixtures allocate explicitly).

Virtual addresses translate through four levels of page tables rooted at
the physical address held in ``cr3``.  Bits 48..63 of a virtual address
are ignored by translation.  Uninitialized registers read as zero.

All operations are pure over value-semantics state: ``step``/``run``
return fresh states and never mutate their input.  The one deliberate
exception is ``translate``/``walk`` with ``set_accessed=True``, which
updates accessed bits in the ``mem`` mapping it was handed; ``step``
only ever passes in a private copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Union

PAGE_SIZE = 4096
WORD_BYTES = 8
ENTRIES_PER_TABLE = 512

_WIDTHS = (64, 52, 12, 9)


@dataclass(frozen=True)
class Word:
    """Fixed-width unsigned machine word (widths 64, 52, 12, or 9).

    Construction checks the range; narrowing an existing value must go
    through an explicit slice, never silent truncation.
    """

    value: int
    width: int = 64

    def __post_init__(self) -> None:
        if self.width not in _WIDTHS:
            raise ValueError(f"unsupported word width {self.width}")
        if not (0 <= self.value < (1 << self.width)):
            raise ValueError(
                f"value {self.value:#x} out of range for a {self.width}-bit word"
            )

    def slice(self, lo: int, hi: int, width: int) -> "Word":
        """Extract bits lo..hi (inclusive) into a new word of `width` bits."""
        if not (0 <= lo <= hi < self.width):
            raise ValueError(f"bad bit range {lo}..{hi} for width {self.width}")
        if hi - lo + 1 > width:
            raise ValueError("slice wider than target width")
        return Word((self.value >> lo) & ((1 << (hi - lo + 1)) - 1), width)

    def __int__(self) -> int:
        return self.value


def w64(v: int) -> Word:
    return Word(v, 64)


def w52(v: int) -> Word:
    return Word(v, 52)


def w12(v: int) -> Word:
    return Word(v, 12)


def w9(v: int) -> Word:
    return Word(v, 9)


class Reg(str, Enum):
    """Register identifiers.  cr3 is the page-table control register and
    is rejected wherever a data register is expected."""

    RAX = "rax"
    RBX = "rbx"
    RCX = "rcx"
    RDX = "rdx"
    RSI = "rsi"
    RDI = "rdi"
    RBP = "rbp"
    RSP = "rsp"
    R8 = "r8"
    R9 = "r9"
    R10 = "r10"
    R11 = "r11"
    R12 = "r12"
    R13 = "r13"
    R14 = "r14"
    R15 = "r15"
    CR3 = "cr3"

    @property
    def is_data(self) -> bool:
        return self is not Reg.CR3

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


DATA_REGS = tuple(r for r in Reg if r.is_data)


@dataclass(frozen=True)
class PhysAddr:
    """A translated physical address split into frame and page offset."""

    frame: Word  # 52-bit frame number
    offset: Word  # 12-bit offset within the frame

    @classmethod
    def of(cls, frame: int, offset: int) -> "PhysAddr":
        return cls(w52(frame), w12(offset))

    @property
    def byte(self) -> int:
        return (self.frame.value << 12) | self.offset.value

    @property
    def word_aligned(self) -> bool:
        return self.offset.value % WORD_BYTES == 0


PTE_PRESENT = 1 << 0
PTE_WRITABLE = 1 << 1
PTE_ACCESSED = 1 << 5
_FRAME_MASK = (1 << 40) - 1


@dataclass(frozen=True)
class Pte:
    """Decoded view of a 64-bit table entry.

    Control bits: present (bit 0), read-write (bit 1), accessed (bit 5).
    The target frame lives in bits 12..51 and is zero-extended to 52 bits.
    """

    raw: int

    def __post_init__(self) -> None:
        if not (0 <= self.raw < (1 << 64)):
            raise ValueError(f"entry {self.raw:#x} is not a 64-bit word")

    @property
    def present(self) -> bool:
        return bool(self.raw & PTE_PRESENT)

    @property
    def writable(self) -> bool:
        return bool(self.raw & PTE_WRITABLE)

    @property
    def accessed(self) -> bool:
        return bool(self.raw & PTE_ACCESSED)

    @property
    def frame(self) -> Word:
        return w52((self.raw >> 12) & _FRAME_MASK)


def decode_pte(entry: int) -> Pte:
    """Decode a raw 64-bit word into its entry views."""
    return Pte(entry)


def encode_pte(frame: int, present: bool = True, writable: bool = False,
               accessed: bool = False) -> Pte:
    """Build an entry from a 40-bit frame number plus control bits."""
    if not (0 <= frame <= _FRAME_MASK):
        raise ValueError(f"frame {frame:#x} does not fit in 40 bits")
    raw = frame << 12
    if present:
        raw |= PTE_PRESENT
    if writable:
        raw |= PTE_WRITABLE
    if accessed:
        raw |= PTE_ACCESSED
    return Pte(raw)


# --------------------------------------------------------------------------
# Faults


class Fault:
    """Base for every machine-level failure value."""


@dataclass(frozen=True)
class NotPresent(Fault):
    level: int  # 1..4, the table level whose entry failed the present check
    va: int


@dataclass(frozen=True)
class FrameUnmapped(Fault):
    phys: int  # byte address of the absent table frame or word


@dataclass(frozen=True)
class Misaligned(Fault):
    addr: int


@dataclass(frozen=True)
class ReadOnly(Fault):
    level: int
    va: int


@dataclass(frozen=True)
class BadRegister(Fault):
    reg: Reg


@dataclass(frozen=True)
class PcOutOfRange(Fault):
    pc: int


# --------------------------------------------------------------------------
# State

Mem = dict  # {frame: {offset: word}}


@dataclass
class MachineState:
    """Register file, sparse physical memory, and program counter."""

    regs: dict = field(default_factory=dict)  # {Reg: int}
    mem: Mem = field(default_factory=dict)
    pc: int = 0

    def reg(self, r: Reg) -> int:
        return self.regs.get(r, 0)

    def copy(self) -> "MachineState":
        return MachineState(
            regs=dict(self.regs),
            mem={f: dict(words) for f, words in self.mem.items()},
            pc=self.pc,
        )

    def read_word(self, frame: int, off: int) -> Union[int, FrameUnmapped]:
        if off % WORD_BYTES:
            raise ValueError(f"offset {off:#x} is not word aligned")
        words = self.mem.get(frame)
        if words is None or off not in words:
            return FrameUnmapped((frame << 12) | off)
        return words[off]

    def write_word(self, frame: int, off: int, value: int) -> Optional[FrameUnmapped]:
        if off % WORD_BYTES:
            raise ValueError(f"offset {off:#x} is not word aligned")
        if not (0 <= value < (1 << 64)):
            raise ValueError(f"value {value:#x} is not a 64-bit word")
        words = self.mem.get(frame)
        if words is None or off not in words:
            return FrameUnmapped((frame << 12) | off)
        words[off] = value
        return None


def mem_set(mem: Mem, frame: int, off: int, value: int) -> None:
    """Allocate-and-store used by fixtures; step never allocates."""
    if off % WORD_BYTES:
        raise ValueError(f"offset {off:#x} is not word aligned")
    mem.setdefault(frame, {})[off] = value


# --------------------------------------------------------------------------
# Instructions


class Instr:
    """Base for the mov-family instruction forms."""


def _check_disp(disp: int) -> None:
    if disp % WORD_BYTES:
        raise ValueError(f"displacement {disp} is not a multiple of 8")
    if not (-PAGE_SIZE < disp < PAGE_SIZE):
        raise ValueError(f"displacement {disp} out of range")


def _check_imm(imm: int) -> None:
    if not (0 <= imm < (1 << 64)):
        raise ValueError(f"immediate {imm:#x} is not a 64-bit word")


@dataclass(frozen=True)
class MovRegReg(Instr):
    dst: Reg
    src: Reg


@dataclass(frozen=True)
class MovRegImm(Instr):
    dst: Reg
    imm: int

    def __post_init__(self) -> None:
        _check_imm(self.imm)


@dataclass(frozen=True)
class AddRegImm(Instr):
    dst: Reg
    imm: int

    def __post_init__(self) -> None:
        _check_imm(self.imm)


@dataclass(frozen=True)
class MovRegFromMem(Instr):
    dst: Reg
    base: Reg
    disp: int = 0

    def __post_init__(self) -> None:
        _check_disp(self.disp)


@dataclass(frozen=True)
class MovMemFromReg(Instr):
    base: Reg
    disp: int
    src: Reg

    def __post_init__(self) -> None:
        _check_disp(self.disp)


@dataclass(frozen=True)
class MovToCr3FromReg(Instr):
    src: Reg


@dataclass(frozen=True)
class MovRegFromCr3(Instr):
    dst: Reg


@dataclass(frozen=True)
class MovMemFromCr3(Instr):
    base: Reg
    disp: int = 0

    def __post_init__(self) -> None:
        _check_disp(self.disp)


@dataclass(frozen=True)
class MovToCr3FromMem(Instr):
    base: Reg
    disp: int = 0

    def __post_init__(self) -> None:
        _check_disp(self.disp)


@dataclass(frozen=True)
class Skip(Instr):
    pass


# --------------------------------------------------------------------------
# Address translation


def split_va(va: int) -> tuple:
    """Split a virtual address into the four 9-bit table indices plus the
    12-bit page offset.  Bits 48..63 are ignored."""
    if not (0 <= va < (1 << 64)):
        raise ValueError(f"virtual address {va:#x} is not a 64-bit word")
    return (
        w9((va >> 39) & 0x1FF),
        w9((va >> 30) & 0x1FF),
        w9((va >> 21) & 0x1FF),
        w9((va >> 12) & 0x1FF),
        w12(va & 0xFFF),
    )


@dataclass(frozen=True)
class WalkTrace:
    """Every table slot visited by one translation attempt, in walk order
    (level 4 first), plus the final outcome."""

    va: int
    steps: tuple  # ((level, slot_frame, slot_off, Pte), ...)
    result: Union[PhysAddr, Fault]

    @property
    def ok(self) -> bool:
        return isinstance(self.result, PhysAddr)

    def entry(self, level: int) -> Optional[Pte]:
        for lvl, _frame, _off, pte in self.steps:
            if lvl == level:
                return pte
        return None


def walk(root: int, mem: Mem, va: int, set_accessed: bool = False) -> WalkTrace:
    """Perform the 4-level table walk from `root`, recording each slot.

    With ``set_accessed`` the accessed bit is set on each entry that
    passes its present check, mutating ``mem`` in place.
    """
    if root % PAGE_SIZE:
        raise ValueError(f"table root {root:#x} is not page aligned")
    i4, i3, i2, i1, off = split_va(va)
    table_frame = root >> 12
    steps = []
    for level, index in ((4, i4), (3, i3), (2, i2), (1, i1)):
        slot_off = index.value * WORD_BYTES
        words = mem.get(table_frame)
        if words is None or slot_off not in words:
            return WalkTrace(va, tuple(steps),
                             FrameUnmapped((table_frame << 12) | slot_off))
        entry = decode_pte(words[slot_off])
        steps.append((level, table_frame, slot_off, entry))
        if not entry.present:
            return WalkTrace(va, tuple(steps), NotPresent(level, va))
        if set_accessed and not entry.accessed:
            words[slot_off] = entry.raw | PTE_ACCESSED
        table_frame = entry.frame.value
    return WalkTrace(va, tuple(steps), PhysAddr.of(table_frame, off.value))


def translate(root: int, mem: Mem, va: int,
              set_accessed: bool = False) -> Union[PhysAddr, Fault]:
    """Translate `va` under the tables rooted at `root`."""
    return walk(root, mem, va, set_accessed=set_accessed).result


def chain_slots(root: int, va: int, l4e: Pte, l3e: Pte, l2e: Pte) -> tuple:
    """The four (frame, offset) table slots a walk of `va` reads, computed
    from the root and the first three entries without touching memory."""
    i4, i3, i2, i1, _off = split_va(va)
    return (
        (root >> 12, i4.value * WORD_BYTES),
        (l4e.frame.value, i3.value * WORD_BYTES),
        (l3e.frame.value, i2.value * WORD_BYTES),
        (l2e.frame.value, i1.value * WORD_BYTES),
    )


# --------------------------------------------------------------------------
# Small-step semantics


@dataclass(frozen=True)
class StepOpts:
    """Execution switches: read-write enforcement on writes, and hardware
    accessed-bit updates during translation.  Both independent."""

    enforce_rw: bool = True
    set_accessed: bool = True


DEFAULT_OPTS = StepOpts()


def _effective_va(state: MachineState, base: Reg, disp: int) -> int:
    return (state.reg(base) + disp) % (1 << 64)


def _translate_for(state: MachineState, va: int, opts: StepOpts,
                   write: bool = False) -> Union[WalkTrace, Fault]:
    if va % WORD_BYTES:
        return Misaligned(va)
    root = state.reg(Reg.CR3)
    if root % PAGE_SIZE:
        return Misaligned(root)
    trace = walk(root, state.mem, va, set_accessed=opts.set_accessed)
    if not trace.ok:
        return trace.result
    if write and opts.enforce_rw:
        for level, _frame, _off, pte in trace.steps:
            if not pte.writable:
                return ReadOnly(level, va)
    return trace


def step(state: MachineState, instr: Instr,
         opts: StepOpts = DEFAULT_OPTS) -> Union[MachineState, Fault]:
    """Execute one instruction, returning the successor state or the fault.

    The input state is never modified; at most one memory word changes in
    the result (plus accessed bits when enabled).
    """
    nxt = state.copy()
    nxt.pc = state.pc + 1

    if isinstance(instr, Skip):
        return nxt

    if isinstance(instr, MovRegReg):
        if not (instr.dst.is_data and instr.src.is_data):
            return BadRegister(instr.dst if not instr.dst.is_data else instr.src)
        nxt.regs[instr.dst] = state.reg(instr.src)
        return nxt

    if isinstance(instr, MovRegImm):
        if not instr.dst.is_data:
            return BadRegister(instr.dst)
        nxt.regs[instr.dst] = instr.imm
        return nxt

    if isinstance(instr, AddRegImm):
        if not instr.dst.is_data:
            return BadRegister(instr.dst)
        nxt.regs[instr.dst] = (state.reg(instr.dst) + instr.imm) % (1 << 64)
        return nxt

    if isinstance(instr, MovRegFromMem):
        if not (instr.dst.is_data and instr.base.is_data):
            return BadRegister(instr.dst if not instr.dst.is_data else instr.base)
        va = _effective_va(state, instr.base, instr.disp)
        trace = _translate_for(nxt, va, opts)
        if isinstance(trace, Fault):
            return trace
        pa = trace.result
        value = nxt.read_word(pa.frame.value, pa.offset.value)
        if isinstance(value, Fault):
            return value
        nxt.regs[instr.dst] = value
        return nxt

    if isinstance(instr, MovMemFromReg):
        if not (instr.src.is_data and instr.base.is_data):
            return BadRegister(instr.src if not instr.src.is_data else instr.base)
        va = _effective_va(state, instr.base, instr.disp)
        trace = _translate_for(nxt, va, opts, write=True)
        if isinstance(trace, Fault):
            return trace
        pa = trace.result
        fail = nxt.write_word(pa.frame.value, pa.offset.value, state.reg(instr.src))
        if fail is not None:
            return fail
        return nxt

    if isinstance(instr, MovToCr3FromReg):
        if not instr.src.is_data:
            return BadRegister(instr.src)
        nxt.regs[Reg.CR3] = state.reg(instr.src)
        return nxt

    if isinstance(instr, MovRegFromCr3):
        if not instr.dst.is_data:
            return BadRegister(instr.dst)
        nxt.regs[instr.dst] = state.reg(Reg.CR3)
        return nxt

    if isinstance(instr, MovMemFromCr3):
        if not instr.base.is_data:
            return BadRegister(instr.base)
        va = _effective_va(state, instr.base, instr.disp)
        trace = _translate_for(nxt, va, opts, write=True)
        if isinstance(trace, Fault):
            return trace
        pa = trace.result
        fail = nxt.write_word(pa.frame.value, pa.offset.value, state.reg(Reg.CR3))
        if fail is not None:
            return fail
        return nxt

    if isinstance(instr, MovToCr3FromMem):
        if not instr.base.is_data:
            return BadRegister(instr.base)
        va = _effective_va(state, instr.base, instr.disp)
        trace = _translate_for(nxt, va, opts)
        if isinstance(trace, Fault):
            return trace
        pa = trace.result
        value = nxt.read_word(pa.frame.value, pa.offset.value)
        if isinstance(value, Fault):
            return value
        nxt.regs[Reg.CR3] = value
        return nxt

    raise TypeError(f"unknown instruction {instr!r}")


def run(state: MachineState, program: Iterable[Instr],
        opts: StepOpts = DEFAULT_OPTS) -> Union[MachineState, tuple]:
    """Fold `step` over the program, halting at the end of the list.

    Returns the final state, or (pc, fault) for the first fault.
    """
    program = list(program)
    current = state
    if not (0 <= current.pc <= len(program)):
        return (current.pc, PcOutOfRange(current.pc))
    while current.pc < len(program):
        result = step(current, program[current.pc], opts)
        if isinstance(result, Fault):
            return (current.pc, result)
        current = result
    return current


# --------------------------------------------------------------------------
# Table synthesis


def synth_tables(mappings: Iterable[tuple], alloc_base: int) -> tuple:
    """Build page tables realizing `mappings` and return (mem, root).

    ``mappings`` is a list of (va, pa, writable) with page-aligned pa;
    table frames are allocated sequentially starting at frame number
    ``alloc_base``, each filled with 512 zero entries.  Interior entries
    are present and writable; leaf entries carry the mapping's flag.
    Conflicting duplicate mappings are rejected.
    """
    mem: Mem = {}
    next_frame = alloc_base

    def alloc() -> int:
        nonlocal next_frame
        frame = next_frame
        next_frame += 1
        mem[frame] = {off: 0 for off in range(0, PAGE_SIZE, WORD_BYTES)}
        return frame

    root_frame = alloc()
    seen: dict = {}

    for va, pa, writable in mappings:
        if pa % PAGE_SIZE:
            raise ValueError(f"target {pa:#x} is not page aligned")
        page = va & ~(PAGE_SIZE - 1) & ((1 << 64) - 1)
        key = page
        if key in seen:
            if seen[key] != (pa, bool(writable)):
                raise ValueError(f"conflicting mappings for page {page:#x}")
            continue
        seen[key] = (pa, bool(writable))

        i4, i3, i2, i1, _ = split_va(va)
        table = root_frame
        for index in (i4, i3, i2):
            slot = index.value * WORD_BYTES
            entry = decode_pte(mem[table][slot])
            if not entry.present:
                child = alloc()
                mem[table][slot] = encode_pte(child, writable=True).raw
                table = child
            else:
                table = entry.frame.value
        slot = i1.value * WORD_BYTES
        existing = decode_pte(mem[table][slot])
        if existing.present:
            raise ValueError(f"conflicting mappings for page {page:#x}")
        mem[table][slot] = encode_pte(pa >> 12, writable=bool(writable)).raw

    return mem, root_frame << 12
