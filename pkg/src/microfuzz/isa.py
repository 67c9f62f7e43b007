"""Guest instruction set: variable-length encoding and decoder.

Every macro instruction dispatches to microcode at ``index * 8`` where
``index`` is the opcode byte, or ``0x100 + byte`` for the ``0x0F``
extended page — 512 entry points below 0x1000, aligned to 8.  Unknown
bytes decode to a UD pseudo-instruction of length 1 whose entry is a
trap routine, so the decode function is total.

Register operand bytes use their low three bits; relative operands are
sign-extended into the macro-immediate alias register.
"""

from __future__ import annotations

from dataclasses import dataclass

MASK64 = (1 << 64) - 1

OP_HLT = 0x00
OP_NOP = 0x01
OP_FENCE = 0x02
OP_MOVI = 0x10
OP_ADD = 0x11
OP_SUB = 0x12
OP_XOR = 0x13
OP_LOAD = 0x20
OP_STORE = 0x21
OP_LOADRIP = 0x22
OP_JMP = 0x30
OP_JZ = 0x31
OP_JNZ = 0x32
OP_CALL = 0x33
OP_RET = 0x34
OP_CRND = 0x40
OP_CREP = 0x41
OP_CSEG = 0x42
OP_CCR = 0x43
OP_IOW = 0x50
OP_PREFIX_EXT = 0x0F
OP_CPUINFO = 0x101  # 0x0F 0x01

#: index -> (mnemonic, total length, operand format)
FORMATS: dict[int, tuple[str, int, str]] = {
    OP_HLT: ("HLT", 1, "none"),
    OP_NOP: ("NOP", 1, "none"),
    OP_FENCE: ("FENCE", 1, "none"),
    OP_MOVI: ("MOVI", 6, "r_i32"),
    OP_ADD: ("ADD", 3, "r_r"),
    OP_SUB: ("SUB", 3, "r_r"),
    OP_XOR: ("XOR", 3, "r_r"),
    OP_LOAD: ("LOAD", 4, "r_r_d8"),
    OP_STORE: ("STORE", 4, "r_d8_r"),
    OP_LOADRIP: ("LOADRIP", 4, "r_rel16"),
    OP_JMP: ("JMP", 2, "rel8"),
    OP_JZ: ("JZ", 2, "rel8"),
    OP_JNZ: ("JNZ", 2, "rel8"),
    OP_CALL: ("CALL", 2, "rel8"),
    OP_RET: ("RET", 1, "none"),
    OP_CRND: ("CRND", 2, "r"),
    OP_CREP: ("CREP", 2, "r"),
    OP_CSEG: ("CSEG", 2, "r"),
    OP_CCR: ("CCR", 3, "r_i8"),
    OP_IOW: ("IOW", 2, "i8"),
    OP_CPUINFO: ("CPUINFO", 2, "none"),
}

CONTROL_FLOW = {OP_JMP, OP_JZ, OP_JNZ, OP_CALL}
CONDITIONAL = {OP_JZ, OP_JNZ}


class OffsetOutOfRange(Exception):
    pass


@dataclass(frozen=True)
class GisaInstruction:
    index: int  # opcode index incl. extended page; entry = index * 8
    mnemonic: str
    length: int
    a: int | None = None
    b: int | None = None
    imm: int = 0  # operand value as seen by microcode (sign-extended where relative)

    @property
    def entry(self) -> int:
        return self.index * 8

    @property
    def is_ud(self) -> bool:
        return self.mnemonic == "UD"


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return ((value ^ sign) - sign) & MASK64


CODE_REGION_SIZE = 0x4000  # execute-only window of the guest address space


def decode_instruction(code: bytes, offset: int, limit: int = CODE_REGION_SIZE) -> tuple[GisaInstruction, int]:
    """Decode one instruction at ``offset``; bytes past ``len(code)`` read
    as zero (the code region is zero-filled)."""
    if offset < 0 or offset >= limit:
        raise OffsetOutOfRange(f"offset {offset:#x} outside code")

    def byte(i: int) -> int:
        return code[i] if i < len(code) else 0

    op = byte(offset)
    index = op
    if op == OP_PREFIX_EXT:
        index = 0x100 + byte(offset + 1)
        if index not in FORMATS:
            return GisaInstruction(index, "UD", 2), 2
    elif op not in FORMATS:
        return GisaInstruction(index, "UD", 1), 1

    mnemonic, length, fmt = FORMATS[index]
    o = offset
    if fmt == "none":
        insn = GisaInstruction(index, mnemonic, length)
    elif fmt == "r":
        insn = GisaInstruction(index, mnemonic, length, a=byte(o + 1) & 7)
    elif fmt == "r_i32":
        imm = int.from_bytes(bytes(byte(o + i) for i in range(2, 6)), "little")
        insn = GisaInstruction(index, mnemonic, length, a=byte(o + 1) & 7, imm=imm)
    elif fmt == "r_r":
        insn = GisaInstruction(index, mnemonic, length, a=byte(o + 1) & 7, b=byte(o + 2) & 7)
    elif fmt == "r_r_d8":
        insn = GisaInstruction(
            index, mnemonic, length,
            a=byte(o + 1) & 7, b=byte(o + 2) & 7, imm=_sext(byte(o + 3), 8),
        )
    elif fmt == "r_d8_r":
        insn = GisaInstruction(
            index, mnemonic, length,
            a=byte(o + 1) & 7, b=byte(o + 3) & 7, imm=_sext(byte(o + 2), 8),
        )
    elif fmt == "r_rel16":
        rel = byte(o + 2) | (byte(o + 3) << 8)
        insn = GisaInstruction(index, mnemonic, length, a=byte(o + 1) & 7, imm=_sext(rel, 16))
    elif fmt == "rel8":
        insn = GisaInstruction(index, mnemonic, length, imm=_sext(byte(o + 1), 8))
    elif fmt == "r_i8":
        insn = GisaInstruction(index, mnemonic, length, a=byte(o + 1) & 7, imm=byte(o + 2))
    elif fmt == "i8":
        insn = GisaInstruction(index, mnemonic, length, imm=byte(o + 1))
    else:  # pragma: no cover
        raise AssertionError(fmt)
    return insn, length


def branch_target(insn: GisaInstruction, offset: int) -> int | None:
    """Absolute target of a statically resolvable control transfer."""
    if insn.index in CONTROL_FLOW:
        return (offset + insn.length + insn.imm) & 0xFFFF
    return None


def encode(index: int, a: int = 0, b: int = 0, imm: int = 0) -> bytes:
    """Assemble one guest instruction (test/corpus helper)."""
    if index not in FORMATS:
        raise ValueError(f"no format for index {index:#x}")
    mnemonic, length, fmt = FORMATS[index]
    if index >= 0x100:
        return bytes([OP_PREFIX_EXT, index - 0x100])
    if fmt == "none":
        return bytes([index])
    if fmt == "r":
        return bytes([index, a])
    if fmt == "r_i32":
        return bytes([index, a]) + (imm & 0xFFFFFFFF).to_bytes(4, "little")
    if fmt == "r_r":
        return bytes([index, a, b])
    if fmt == "r_r_d8":
        return bytes([index, a, b, imm & 0xFF])
    if fmt == "r_d8_r":
        return bytes([index, a, imm & 0xFF, b])
    if fmt == "r_rel16":
        return bytes([index, a]) + (imm & 0xFFFF).to_bytes(2, "little")
    if fmt == "rel8":
        return bytes([index, imm & 0xFF])
    if fmt == "r_i8":
        return bytes([index, a, imm & 0xFF])
    if fmt == "i8":
        return bytes([index, imm & 0xFF])
    raise AssertionError(fmt)  # pragma: no cover
