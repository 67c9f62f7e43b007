"""Micro-op word encoding, triads, sequence words and microcode images.

The control store is addressed by 15-bit addresses split into triads of
three 48-bit micro-op words plus one sequence word.  Addresses 0x0000 to
0x7BFF are ROM, 0x7C00 to 0x7FFF are writable patch RAM.  Within a triad
the slot index is ``address % 4``; slot 3 never holds a micro-op (it is
where the sequence word lives conceptually) and is not a legal fetch
target.

Word layout (fixed for this engine):

    bits 47..36  opcode (12 bits)
    bits 35..30  destination register index (6 bits)
    bits 29..24  source register index (6 bits)
    bits 23..0   immediate (24 bits)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

ADDRESS_SPACE = 0x8000
ROM_LIMIT = 0x7C00
PATCH_BASE = 0x7C00
PATCH_TRIADS = 256

OPCODE_BITS = 12
REG_BITS = 6
IMM_BITS = 24

OPCODE_MASK = (1 << OPCODE_BITS) - 1
REG_MASK = (1 << REG_BITS) - 1
IMM_MASK = (1 << IMM_BITS) - 1
WORD_MASK = (1 << 48) - 1


class UcodeError(Exception):
    """Base class for microcode model errors."""


class FieldOverflow(UcodeError):
    """A micro-op field does not fit its bit width."""


class InvalidAddress(UcodeError):
    """Address is outside the control store or names slot 3."""


# ---------------------------------------------------------------------------
# Register file
# ---------------------------------------------------------------------------
# 0..15   tmp0..tmp15        scratch micro-registers
# 16..23  r0..r7             guest architectural registers
# 24/25   arg_a / arg_b      decoded macro operand registers (indirection)
# 26      m_imm              decoded macro immediate (read-only)
# 27      ip_next            guest IP after the current macro instruction
# 28/29   zf / cf            guest flag bits
# 30      zero               reads 0, writes are discarded
# 31      ip_cur             guest IP of the current macro instruction (RO)

REG_TMP0 = 0
REG_R0 = 16
REG_ARG_A = 24
REG_ARG_B = 25
REG_M_IMM = 26
REG_IP_NEXT = 27
REG_ZF = 28
REG_CF = 29
REG_ZERO = 30
REG_IP_CUR = 31

REG_NAMES: dict[int, str] = {}
REG_NAMES.update({i: f"tmp{i}" for i in range(16)})
REG_NAMES.update({REG_R0 + i: f"r{i}" for i in range(8)})
REG_NAMES.update({
    REG_ARG_A: "arg_a",
    REG_ARG_B: "arg_b",
    REG_M_IMM: "m_imm",
    REG_IP_NEXT: "ip_next",
    REG_ZF: "zf",
    REG_CF: "cf",
    REG_ZERO: "zero",
    REG_IP_CUR: "ip_cur",
})

REG_ALIASES = {
    "rax": REG_R0,
    "rcx": REG_R0 + 1,
    "rdx": REG_R0 + 2,
    "rbx": REG_R0 + 3,
    "rsp": REG_R0 + 7,
    # Banked temporaries seen in third-party dumps; folded onto tmp0/tmp1.
    "tmpv0": 0,
    "tmpv1": 1,
}

REG_INDEX = {name: idx for idx, name in REG_NAMES.items()}
REG_INDEX.update(REG_ALIASES)


# ---------------------------------------------------------------------------
# Opcodes
# ---------------------------------------------------------------------------

class Op(IntEnum):
    NOP = 0x001
    NOPB = 0x002
    MOVETOCREG_DSZ64 = 0x004
    MOVEFROMCREG_DSZ64 = 0x005
    ADD_DSZ64 = 0x010
    SUB_DSZ64 = 0x011
    XOR_DSZ64 = 0x012
    MOVETOCREG_AND_DSZ64 = 0x082
    MOVETOCREG_BTS_DSZ64 = 0x096
    MOVETOCREG_BTR_DSZ64 = 0x0A6
    ZEROEXT_DSZ64 = 0x0AB
    LDPPHYS = 0x0C0
    LDPPHYS_ASZ16 = 0x0C1
    LDPPHYS_DSZ16 = 0x0C2
    STPPHYS = 0x0C8
    STPPHYS_ASZ16 = 0x0C9
    STPPHYS_DSZ16 = 0x0CA
    LDSTGBUF = 0x0E7
    STSTGBUF = 0x0E8
    UJMP = 0x140
    UJMPREG = 0x141
    SAVEUIP = 0x142
    UJMPCC_DIRECT_NOTTAKEN_CONDNZ = 0x151
    UNK_256 = 0x256
    WRSEGFLD = 0xC6B
    # Flag-updating ALU variants (result also drives ZF/CF).
    ADD_DSZ64_F = 0x810
    SUB_DSZ64_F = 0x811
    XOR_DSZ64_F = 0x812
    ZEROEXT_DSZ64_F = 0x8AB


#: opcode -> flag-updating twin
FLAG_VARIANT = {
    Op.ADD_DSZ64: Op.ADD_DSZ64_F,
    Op.SUB_DSZ64: Op.SUB_DSZ64_F,
    Op.XOR_DSZ64: Op.XOR_DSZ64_F,
    Op.ZEROEXT_DSZ64: Op.ZEROEXT_DSZ64_F,
}
FLAG_BASE = {v: k for k, v in FLAG_VARIANT.items()}

DEFINED_OPCODES = {int(op) for op in Op}

#: mnemonic aliases accepted by the assembler in addition to canonical names
MNEMONIC_ALIASES = {
    "LDPPHYS_DSZ32_ASZ16_SC1": Op.LDPPHYS,
    "LDPPHYS_DSZ64_ASZ16_SC1": Op.LDPPHYS,
    "LDSTGBUF_DSZ64_ASZ16_SC1": Op.LDSTGBUF,
    "STSTGBUF_DSZ64_ASZ16_SC1": Op.STSTGBUF,
}

# MOVETOCREG immediate bit 23: the effective CRBUS address adds the decoded
# macro immediate (window addressing for guest-issued control writes).
CRADDR_MACRO_REL = 1 << 23

SEG_SELECTORS = {"GDT": 0, "TSS": 1, "CS": 2, "DS": 3}
SEG_FIELDS = {"BASE": 0, "LIMIT": 1}


def encode_uop(opcode: int, dst: int = 0, src: int = 0, imm: int = 0) -> int:
    """Pack micro-op fields into a 48-bit word."""
    if not 0 <= opcode <= OPCODE_MASK:
        raise FieldOverflow(f"opcode 0x{opcode:x} exceeds {OPCODE_BITS} bits")
    if not 0 <= dst <= REG_MASK:
        raise FieldOverflow(f"dst {dst} exceeds {REG_BITS} bits")
    if not 0 <= src <= REG_MASK:
        raise FieldOverflow(f"src {src} exceeds {REG_BITS} bits")
    if not 0 <= imm <= IMM_MASK:
        raise FieldOverflow(f"imm 0x{imm:x} exceeds {IMM_BITS} bits")
    return (opcode << 36) | (dst << 30) | (src << 24) | imm


def decode_uop(raw: int) -> tuple[int, int, int, int]:
    """Unpack a 48-bit word into (opcode, dst, src, imm)."""
    raw &= WORD_MASK
    return (raw >> 36) & OPCODE_MASK, (raw >> 30) & REG_MASK, (raw >> 24) & REG_MASK, raw & IMM_MASK


@dataclass(frozen=True)
class MicroOpWord:
    """A single 48-bit control word holding one micro-op."""

    raw: int

    def __post_init__(self) -> None:
        if not 0 <= self.raw <= WORD_MASK:
            raise FieldOverflow(f"word 0x{self.raw:x} exceeds 48 bits")

    @property
    def opcode(self) -> int:
        return (self.raw >> 36) & OPCODE_MASK

    @property
    def dst(self) -> int:
        return (self.raw >> 30) & REG_MASK

    @property
    def src(self) -> int:
        return (self.raw >> 24) & REG_MASK

    @property
    def imm(self) -> int:
        return self.raw & IMM_MASK

    @property
    def defined(self) -> bool:
        return self.opcode in DEFINED_OPCODES

    @classmethod
    def make(cls, opcode: int, dst: int = 0, src: int = 0, imm: int = 0) -> "MicroOpWord":
        return cls(encode_uop(opcode, dst, src, imm))


NOP_WORD = MicroOpWord.make(Op.NOP)


class Sync(IntEnum):
    NONE = 0
    LFNCEWAIT = 1
    SYNCFULL = 2


@dataclass(frozen=True)
class SequenceWord:
    """Per-triad control: termination, synchronization, static branch."""

    uend: bool = False
    sync: Sync = Sync.NONE
    goto: int | None = None

    def __post_init__(self) -> None:
        if self.goto is not None:
            if not 0 <= self.goto < ADDRESS_SPACE:
                raise InvalidAddress(f"goto 0x{self.goto:04x} out of range")
            if self.goto % 4 != 0:
                raise InvalidAddress(f"goto 0x{self.goto:04x} must land on slot 0")

    def encode(self) -> int:
        word = int(self.uend) | (int(self.sync) << 2)
        if self.goto is not None:
            word |= 1 << 4
            word |= self.goto << 16
        return word

    @classmethod
    def decode(cls, word: int) -> "SequenceWord":
        goto = (word >> 16) & (ADDRESS_SPACE - 1) if word & (1 << 4) else None
        return cls(uend=bool(word & 1), sync=Sync((word >> 2) & 3), goto=goto)


SEQ_NONE = SequenceWord()
SEQ_UEND = SequenceWord(uend=True)


@dataclass(frozen=True)
class Triad:
    """Three micro-ops plus a sequence word; serializes to four 48-bit words."""

    ops: tuple[MicroOpWord, MicroOpWord, MicroOpWord]
    seq: SequenceWord = SEQ_NONE

    def words(self) -> tuple[int, int, int, int]:
        return (self.ops[0].raw, self.ops[1].raw, self.ops[2].raw, self.seq.encode())

    @classmethod
    def make(cls, ops: list[MicroOpWord], seq: SequenceWord = SEQ_NONE) -> "Triad":
        if len(ops) > 3:
            raise UcodeError(f"triad holds at most 3 micro-ops, got {len(ops)}")
        padded = list(ops) + [NOP_WORD] * (3 - len(ops))
        return cls(ops=(padded[0], padded[1], padded[2]), seq=seq)

    @classmethod
    def from_words(cls, words: tuple[int, int, int, int]) -> "Triad":
        return cls(
            ops=(MicroOpWord(words[0]), MicroOpWord(words[1]), MicroOpWord(words[2])),
            seq=SequenceWord.decode(words[3]),
        )


def slot_of(addr: int) -> int:
    return addr % 4


def triad_base(addr: int) -> int:
    return addr & ~3


def is_valid_address(addr: int) -> bool:
    return 0 <= addr < ADDRESS_SPACE and addr % 4 != 3


def is_rom(addr: int) -> bool:
    return 0 <= addr < ROM_LIMIT


def is_patch_ram(addr: int) -> bool:
    return PATCH_BASE <= addr < ADDRESS_SPACE


def is_hookable(addr: int) -> bool:
    """A hook source must be an even, valid ROM address.

    Its odd partner ``addr + 1`` is covered implicitly by the pairing
    mechanism of the hook table.
    """
    return is_rom(addr) and addr % 4 != 3 and addr % 2 == 0


def hookable_even_addresses() -> range:
    """Iterate every hookable address in the ROM region (slots 0 and 2)."""
    # Even valid addresses repeat with period 4 as base+0 and base+2.
    return range(0, ROM_LIMIT, 2)


def count_hookable() -> int:
    return ROM_LIMIT // 2


class UcodeImage:
    """Control-store contents: ROM triads plus up to 256 patch-RAM triads.

    Images are immutable by convention once execution starts; the engine
    mutates patch RAM only through its control ports.
    """

    def __init__(self) -> None:
        self.rom: dict[int, Triad] = {}
        self.ram: dict[int, Triad] = {}

    def store(self, base: int, triad: Triad) -> None:
        if base % 4 != 0 or not 0 <= base < ADDRESS_SPACE:
            raise InvalidAddress(f"triad base 0x{base:04x} not slot-0 aligned")
        if base < ROM_LIMIT:
            self.rom[base] = triad
        else:
            if len(self.ram) >= PATCH_TRIADS and base not in self.ram:
                raise UcodeError("patch RAM capacity exceeded")
            self.ram[base] = triad

    def triad_at(self, base: int) -> Triad | None:
        if base < ROM_LIMIT:
            return self.rom.get(base)
        return self.ram.get(base)

    def op_at(self, addr: int) -> MicroOpWord | None:
        if not is_valid_address(addr):
            raise InvalidAddress(f"0x{addr:04x} is not a fetchable address")
        triad = self.triad_at(triad_base(addr))
        if triad is None:
            return None
        return triad.ops[slot_of(addr)]

    def seq_at(self, addr: int) -> SequenceWord | None:
        triad = self.triad_at(triad_base(addr))
        return triad.seq if triad is not None else None

    def bases(self) -> list[int]:
        return sorted(self.rom.keys()) + sorted(self.ram.keys())

    def copy(self) -> "UcodeImage":
        img = UcodeImage()
        img.rom = dict(self.rom)
        img.ram = dict(self.ram)
        return img

    # -- binary image file: sequence of (u16 base, 4 x u48-in-u64) ---------

    def to_bytes(self) -> bytes:
        out = bytearray()
        for base in self.bases():
            triad = self.triad_at(base)
            assert triad is not None
            out += struct.pack("<H", base)
            for word in triad.words():
                out += struct.pack("<Q", word)
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "UcodeImage":
        img = cls()
        record = struct.Struct("<HQQQQ")
        if len(blob) % record.size != 0:
            raise UcodeError("truncated image file")
        for off in range(0, len(blob), record.size):
            base, w0, w1, w2, w3 = record.unpack_from(blob, off)
            for w in (w0, w1, w2, w3):
                if w > WORD_MASK:
                    raise UcodeError(f"control word 0x{w:x} exceeds 48 bits")
            img.store(base, Triad.from_words((w0, w1, w2, w3)))
        return img

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UcodeImage):
            return NotImplemented
        return self.rom == other.rom and self.ram == other.ram
