"""Two-pass microcode assembler and the matching disassembler.

Listing grammar, one micro-op per line:

    .org 0x0100                        ; set triad emission address
    entry:                             ; label (binds to next micro-op)
    tmp2 := ZEROEXT_DSZ64(0xabab)
    UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, <taken>)
    NOP SEQW LFNCEWAIT, UEND0

A ``SEQW`` suffix closes the current triad (shorter triads are padded
with NOPs).  Three micro-ops without a ``SEQW`` close the triad with an
empty sequence word.  Labels may be written ``name:`` or ``<name>`` on
their own line and referenced as ``<name>`` or ``name`` in address
operands.  ``!f`` selects the flag-updating variant of an ALU op;
``!m<n>`` mode markers are accepted and ignored.  Unknown opcodes
disassemble as ``UNK_<hex>(dst, src, imm)`` and assemble back
bit-identically.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .model import (
    ADDRESS_SPACE,
    CRADDR_MACRO_REL,
    FLAG_BASE,
    FLAG_VARIANT,
    IMM_MASK,
    MNEMONIC_ALIASES,
    REG_INDEX,
    REG_NAMES,
    REG_ZERO,
    SEG_FIELDS,
    SEG_SELECTORS,
    MicroOpWord,
    Op,
    SequenceWord,
    Sync,
    Triad,
    UcodeError,
    UcodeImage,
    encode_uop,
)

SEG_SELECTOR_NAMES = {v: k for k, v in SEG_SELECTORS.items()}
SEG_FIELD_NAMES = {v: k for k, v in SEG_FIELDS.items()}

_ALU_OPS = (Op.ADD_DSZ64, Op.SUB_DSZ64, Op.XOR_DSZ64, Op.ZEROEXT_DSZ64)
_LOAD_OPS = (Op.LDPPHYS, Op.LDPPHYS_ASZ16, Op.LDPPHYS_DSZ16, Op.LDSTGBUF)
_STORE_OPS = (Op.STPPHYS, Op.STPPHYS_ASZ16, Op.STPPHYS_DSZ16, Op.STSTGBUF)
_BITCR_OPS = (Op.MOVETOCREG_BTS_DSZ64, Op.MOVETOCREG_BTR_DSZ64, Op.MOVETOCREG_AND_DSZ64)


class AsmError(UcodeError):
    pass


class ParseError(AsmError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnknownMnemonic(AsmError):
    pass


class UnresolvedLabel(AsmError):
    pass


@dataclass
class _PendingOp:
    addr: int
    opcode: int
    dst: int
    src: int
    imm: int | str  # str = unresolved label
    line_no: int


_LABEL_RE = re.compile(r"^(?:<(?P<angle>\w+)>|(?P<plain>\w+):)\s*(?P<rest>.*)$")
_ASSIGN_RE = re.compile(r"^(?P<dst>\w+)\s*:=\s*(?P<rest>.+)$")
_OP_RE = re.compile(
    r"^(?P<mn>[A-Za-z_][\w.]*)\s*(?:\((?P<args>[^)]*)\))?\s*(?P<mods>(?:!\w[\w,]*\s*)*)$"
)


def _parse_int(tok: str) -> int | None:
    try:
        return int(tok.strip(), 0)
    except ValueError:
        return None


def _parse_reg(tok: str) -> int | None:
    return REG_INDEX.get(tok.strip().lower())


class Assembler:
    def __init__(self, org: int = 0) -> None:
        self.labels: dict[str, int] = {}
        self.pending: list[_PendingOp] = []
        self.triads: dict[int, tuple[list[_PendingOp], SequenceWord]] = {}
        self._goto_fixups: list[tuple[int, str, int, bool, Sync]] = []
        self._base = org
        self._cur: list[_PendingOp] = []

    # -- pass 1 -------------------------------------------------------------

    def _addr(self) -> int:
        return self._base + len(self._cur)

    def _close(self, seq: SequenceWord, line_no: int) -> None:
        if self._base in self.triads:
            raise ParseError(line_no, f"triad 0x{self._base:04x} assembled twice")
        self.triads[self._base] = (list(self._cur), seq)
        self._base += 4
        self._cur = []

    def feed(self, line: str, line_no: int) -> None:
        text = line.split(";", 1)[0].strip()
        if not text:
            return
        if text.startswith(".org"):
            arg = _parse_int(text[4:])
            if arg is None or arg % 4 != 0:
                raise ParseError(line_no, f"bad .org operand: {text[4:].strip()!r}")
            if self._cur:
                self._close(SequenceWord(), line_no)
            self._base = arg
            return
        m = _LABEL_RE.match(text)
        if m and (m.group("angle") or m.group("plain")):
            name = m.group("angle") or m.group("plain")
            if name in self.labels:
                raise ParseError(line_no, f"label {name!r} redefined")
            if self._cur:
                # Labels are jump targets; align them to a fresh triad.
                self._close(SequenceWord(), line_no)
            self.labels[name] = self._addr()
            text = m.group("rest").strip()
            if not text:
                return

        seq: SequenceWord | None = None
        upper = text.upper()
        if "SEQW" in upper:
            idx = upper.index("SEQW")
            seq = self._parse_seqw(text[idx + 4:], line_no)
            text = text[:idx].strip()

        if text:
            self._parse_uop(text, line_no)
        if seq is not None:
            self._close(seq, line_no)
        elif len(self._cur) == 3:
            self._close(SequenceWord(), line_no)

    def _parse_seqw(self, clause: str, line_no: int) -> SequenceWord:
        uend = False
        sync = Sync.NONE
        goto: int | None = None
        for part in [p.strip() for p in clause.split(",") if p.strip()]:
            up = part.upper()
            if up in ("UEND", "UEND0"):
                uend = True
            elif up == "LFNCEWAIT":
                sync = Sync.LFNCEWAIT
            elif up == "SYNCFULL":
                sync = Sync.SYNCFULL
            elif up.startswith("GOTO"):
                tgt = part[4:].strip()
                val = _parse_int(tgt)
                if val is None:
                    self._goto_fixups.append((self._base, tgt.strip("<>"), line_no, uend, sync))
                else:
                    goto = val
            else:
                raise ParseError(line_no, f"unknown SEQW clause {part!r}")
        return SequenceWord(uend=uend, sync=sync, goto=goto)

    def _parse_uop(self, text: str, line_no: int) -> None:
        dst = 0
        m = _ASSIGN_RE.match(text)
        if m:
            reg = _parse_reg(m.group("dst"))
            if reg is None:
                raise ParseError(line_no, f"unknown destination register {m.group('dst')!r}")
            dst = reg
            text = m.group("rest").strip()
        m = _OP_RE.match(text)
        if not m:
            raise ParseError(line_no, f"cannot parse micro-op {text!r}")
        name = m.group("mn").upper()
        args = [a.strip() for a in (m.group("args") or "").split(",") if a.strip()]
        mods = (m.group("mods") or "").lower()
        flag = "!f" in mods

        opcode = self._lookup_mnemonic(name, line_no)
        if flag:
            if opcode not in FLAG_VARIANT:
                raise ParseError(line_no, f"{name} has no flag-updating variant")
            opcode = FLAG_VARIANT[opcode]

        dst, src, imm = self._encode_operands(int(opcode), dst, args, line_no)
        self._emit(_PendingOp(self._addr(), int(opcode), dst, src, imm, line_no))

    def _emit(self, op: _PendingOp) -> None:
        self._cur.append(op)
        self.pending.append(op)

    def _lookup_mnemonic(self, name: str, line_no: int) -> int:
        if name in Op.__members__:
            return Op[name]
        if name in MNEMONIC_ALIASES:
            return MNEMONIC_ALIASES[name]
        if name.startswith("UNK_"):
            try:
                return int(name[4:], 16)
            except ValueError:
                pass
        raise UnknownMnemonic(f"line {line_no}: unknown mnemonic {name!r}")

    def _encode_operands(
        self, opcode: int, dst: int, args: list[str], line_no: int
    ) -> tuple[int, int, int | str]:
        base = FLAG_BASE.get(opcode, opcode)

        def reg_or_fail(tok: str) -> int:
            reg = _parse_reg(tok)
            if reg is None:
                raise ParseError(line_no, f"expected register, got {tok!r}")
            return reg

        def addr_value(tok: str) -> int | str:
            val = _parse_int(tok)
            return val if val is not None else tok.strip("<>")

        if base in (Op.NOP, Op.NOPB, Op.SAVEUIP):
            return dst, REG_ZERO if base == Op.SAVEUIP else 0, 0
        if base == Op.UNK_256:
            return dst, 0, 0
        if base in _ALU_OPS:
            ops = list(args)
            if ops and _parse_reg(ops[0]) == dst and len(ops) > 1 and base != Op.ZEROEXT_DSZ64:
                ops = ops[1:]
            src, imm = REG_ZERO, 0
            for tok in ops:
                reg = _parse_reg(tok)
                if reg is not None:
                    src = reg
                else:
                    val = _parse_int(tok)
                    if val is None:
                        raise ParseError(line_no, f"bad ALU operand {tok!r}")
                    imm = val
            return dst, src, imm
        if base in _LOAD_OPS:
            src, imm = REG_ZERO, 0
            for tok in args:
                reg = _parse_reg(tok)
                if reg is not None:
                    src = reg
                else:
                    val = _parse_int(tok)
                    if val is None:
                        raise ParseError(line_no, f"bad address operand {tok!r}")
                    imm = val
            return dst, src, imm
        if base in _STORE_OPS:
            # (addr-reg and/or displacement, value-reg); the address register
            # rides in the dst field since stores write no register.
            if not args:
                raise ParseError(line_no, "store needs operands")
            val_reg = reg_or_fail(args[-1])
            addr_reg, disp = REG_ZERO, 0
            for tok in args[:-1]:
                reg = _parse_reg(tok)
                if reg is not None:
                    addr_reg = reg
                else:
                    val = _parse_int(tok)
                    if val is None:
                        raise ParseError(line_no, f"bad store operand {tok!r}")
                    disp = val
            return addr_reg, val_reg, disp
        if base == Op.MOVETOCREG_DSZ64:
            if not args:
                raise ParseError(line_no, "MOVETOCREG needs (src, craddr)")
            regs = [r for r in (_parse_reg(a) for a in args) if r is not None]
            return dst, regs[0] if regs else REG_ZERO, self._craddr(args[-1], line_no)
        if base == Op.MOVEFROMCREG_DSZ64:
            if len(args) != 1:
                raise ParseError(line_no, "MOVEFROMCREG needs (craddr)")
            return dst, REG_ZERO, self._craddr(args[0], line_no)
        if base in _BITCR_OPS:
            if not args:
                raise ParseError(line_no, "bit-op needs operands")
            rest = args
            src = REG_ZERO
            if _parse_reg(args[0]) is not None:
                src = reg_or_fail(args[0])
                rest = args[1:]
            if len(rest) == 1:
                bit, addr_tok = 0, rest[0]
            elif len(rest) == 2:
                bit_val = _parse_int(rest[0])
                if bit_val is None:
                    raise ParseError(line_no, f"bad bit operand {rest[0]!r}")
                bit, addr_tok = bit_val, rest[1]
            else:
                raise ParseError(line_no, "bit-op needs (reg, bit, craddr)")
            addr = _parse_int(addr_tok)
            if addr is None:
                raise ParseError(line_no, f"bad CRBUS address {addr_tok!r}")
            return dst, src, ((bit & 0x3F) << 12) | (addr & 0xFFF)
        if base == Op.WRSEGFLD:
            if len(args) != 3:
                raise ParseError(line_no, "WRSEGFLD needs (reg, selector, field)")
            sel = SEG_SELECTORS.get(args[1].upper())
            fld = SEG_FIELDS.get(args[2].upper())
            if sel is None or fld is None:
                raise ParseError(line_no, f"bad segment operand {args[1]!r}/{args[2]!r}")
            return dst, reg_or_fail(args[0]), (sel << 6) | fld
        if base == Op.UJMP:
            if len(args) != 1:
                raise ParseError(line_no, "UJMP needs a target")
            return dst, REG_ZERO, addr_value(args[0])
        if base == Op.UJMPREG:
            if len(args) != 1:
                raise ParseError(line_no, "UJMPREG needs a register")
            return dst, reg_or_fail(args[0]), 0
        if base == Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ:
            if len(args) != 2:
                raise ParseError(line_no, "UJMPCC needs (reg, target)")
            return dst, reg_or_fail(args[0]), addr_value(args[1])
        # Raw numeric form (round-trips unknown opcodes).
        nums = [_parse_int(a) for a in args]
        if any(n is None for n in nums):
            raise ParseError(line_no, f"opcode 0x{base:03x} takes numeric operands")
        padded = [n if n is not None else 0 for n in nums] + [0, 0, 0]
        return padded[0], padded[1], padded[2]

    def _craddr(self, tok: str, line_no: int) -> int:
        tok = tok.strip()
        rel = False
        if tok.lower().endswith("+m_imm"):
            rel = True
            tok = tok[: -len("+m_imm")]
        val = _parse_int(tok)
        if val is None:
            raise ParseError(line_no, f"bad CRBUS address {tok!r}")
        return (val & 0xFFF) | (CRADDR_MACRO_REL if rel else 0)

    # -- pass 2 -------------------------------------------------------------

    def finish(self) -> UcodeImage:
        if self._cur:
            self._close(SequenceWord(), -1)
        image = UcodeImage()
        resolved: dict[int, MicroOpWord] = {}
        for op in self.pending:
            imm = op.imm
            if isinstance(imm, str):
                if imm not in self.labels:
                    raise UnresolvedLabel(f"line {op.line_no}: undefined label {imm!r}")
                imm = self.labels[imm]
            resolved[op.addr] = MicroOpWord(encode_uop(op.opcode, op.dst, op.src, imm & IMM_MASK))
        goto_by_base: dict[int, SequenceWord] = {}
        for base, name, line_no, uend, sync in self._goto_fixups:
            if name not in self.labels:
                raise UnresolvedLabel(f"line {line_no}: undefined label {name!r}")
            goto_by_base[base] = SequenceWord(uend=uend, sync=sync, goto=self.labels[name])
        for base, (ops, seq) in self.triads.items():
            words = [resolved[op.addr] for op in ops]
            image.store(base, Triad.make(words, goto_by_base.get(base, seq)))
        return image


def assemble(source: str, org: int = 0) -> UcodeImage:
    """Assemble a textual listing into an image fragment."""
    asm = Assembler(org)
    for line_no, line in enumerate(source.splitlines(), start=1):
        asm.feed(line, line_no)
    return asm.finish()


# ---------------------------------------------------------------------------
# Disassembler
# ---------------------------------------------------------------------------

def format_uop(word: MicroOpWord) -> str:
    opcode, dst, src, imm = word.opcode, word.dst, word.src, word.imm
    base = FLAG_BASE.get(opcode, opcode)
    flag = " !f" if opcode in FLAG_BASE else ""
    rn = lambda i: REG_NAMES.get(i, f"reg{i}")  # noqa: E731
    if base not in {int(o) for o in Op}:
        return f"UNK_{opcode:03X}({dst}, {src}, 0x{imm:x})"
    base = Op(base)
    if base is Op.NOP:
        return "NOP"
    if base is Op.NOPB:
        return "NOPB"
    if base == Op.UNK_256:
        return "UNK_256()"
    if base in _ALU_OPS:
        parts = [] if base is Op.ZEROEXT_DSZ64 else [rn(dst)]
        if src != REG_ZERO:
            parts.append(rn(src))
        if imm or len(parts) == (0 if base is Op.ZEROEXT_DSZ64 else 1):
            parts.append(f"0x{imm:x}")
        return f"{rn(dst)} := {base.name}({', '.join(parts)}){flag}"
    if base in _LOAD_OPS:
        parts = []
        if src != REG_ZERO:
            parts.append(rn(src))
        if imm or not parts:
            parts.append(f"0x{imm:x}")
        return f"{rn(dst)} := {base.name}({', '.join(parts)})"
    if base in _STORE_OPS:
        parts = []
        if dst != REG_ZERO:
            parts.append(rn(dst))
        if imm or not parts:
            parts.append(f"0x{imm:x}")
        parts.append(rn(src))
        return f"{base.name}({', '.join(parts)})"
    if base == Op.MOVETOCREG_DSZ64:
        addr = imm & 0xFFF
        suffix = "+m_imm" if imm & CRADDR_MACRO_REL else ""
        lhs = f"{rn(dst)} := " if dst != 0 else ""
        return f"{lhs}{base.name}({rn(src)}, 0x{addr:03x}{suffix})"
    if base == Op.MOVEFROMCREG_DSZ64:
        return f"{rn(dst)} := {base.name}(0x{imm & 0xFFF:03x})"
    if base in _BITCR_OPS:
        bit = (imm >> 12) & 0x3F
        addr = imm & 0xFFF
        lhs = f"{rn(dst)} := " if dst != 0 else ""
        return f"{lhs}{base.name}({rn(src)}, 0x{bit:08x}, 0x{addr:03x})"
    if base == Op.WRSEGFLD:
        sel = SEG_SELECTOR_NAMES.get((imm >> 6) & 0x3F, f"SEL{(imm >> 6) & 0x3F}")
        fld = SEG_FIELD_NAMES.get(imm & 0x3F, f"FLD{imm & 0x3F}")
        return f"{base.name}({rn(src)}, {sel}, {fld})"
    if base == Op.UJMP:
        return f"UJMP(0x{imm:04x})"
    if base == Op.UJMPREG:
        return f"UJMPREG({rn(src)})"
    if base == Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ:
        return f"{base.name}({rn(src)}, 0x{imm:04x})"
    if base is Op.SAVEUIP:
        return f"{rn(dst)} := SAVEUIP()"
    return f"UNK_{opcode:03X}({dst}, {src}, 0x{imm:x})"


def format_seqw(seq: SequenceWord) -> str:
    clauses = []
    if seq.sync is Sync.LFNCEWAIT:
        clauses.append("LFNCEWAIT")
    elif seq.sync is Sync.SYNCFULL:
        clauses.append("SYNCFULL")
    if seq.goto is not None:
        clauses.append(f"GOTO 0x{seq.goto:04x}")
    if seq.uend:
        clauses.append("UEND0")
    return "SEQW " + ", ".join(clauses) if clauses else ""


def disassemble(image: UcodeImage, start: int = 0, end: int = ADDRESS_SPACE) -> str:
    """Render the triads of ``image`` within [start, end) as a listing."""
    lines: list[str] = []
    for base in image.bases():
        if not start <= base < end:
            continue
        triad = image.triad_at(base)
        assert triad is not None
        lines.append(f".org 0x{base:04x}")
        for slot in range(3):
            text = "    " + format_uop(triad.ops[slot])
            if slot == 2:
                seq_text = format_seqw(triad.seq)
                if seq_text:
                    text += " " + seq_text
            lines.append(text)
    return "\n".join(lines) + ("\n" if lines else "")
