import random

import pytest

from microfuzz.ucode import asm
from microfuzz.ucode.asm import assemble, disassemble, format_uop
from microfuzz.ucode.model import (
    REG_ZERO,
    MicroOpWord,
    Op,
    SequenceWord,
    Sync,
    Triad,
    UcodeImage,
    encode_uop,
)

SPEC_WINDOW_LISTING = """
<entry>
tmp2 := ZEROEXT_DSZ64(0xabab)
tmp0 := ZEROEXT_DSZ64(0x1000)
tmp1 := LDPPHYS_DSZ32_ASZ16_SC1(tmp0)
tmp0 := SUB_DSZ64(tmp0, tmp1)

; Speculative branch | misprediction forced
UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, <taken>)
rax := ZEROEXT_DSZ64(0xdead)
NOPB
NOP SEQW SYNCFULL
NOPB

<taken>
unk_256 !m1 SEQW LFNCEWAIT, UEND0
"""


def test_single_nop_triad_uend():
    img = assemble("NOP SEQW UEND0")
    triad = img.triad_at(0)
    assert triad is not None
    assert triad.seq.uend
    assert [op.opcode for op in triad.ops] == [Op.NOP] * 3


def test_speculative_window_listing_shape():
    img = assemble(SPEC_WINDOW_LISTING, org=0x7C00)
    bases = img.bases()
    assert len(bases) == 5  # the window template packs into five triads
    first = img.triad_at(bases[0])
    assert first.ops[0].opcode == Op.ZEROEXT_DSZ64
    assert first.ops[0].imm == 0xABAB
    assert first.ops[0].src == REG_ZERO
    # the forced-misprediction branch targets the fenced landing pad
    branch = next(
        op
        for base in bases
        for op in img.triad_at(base).ops
        if op.opcode == Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ
    )
    landing = bases[-1]
    assert branch.imm == landing
    last = img.triad_at(landing)
    assert last.ops[0].opcode == Op.UNK_256
    assert last.seq.uend and last.seq.sync is Sync.LFNCEWAIT


def test_label_used_before_definition():
    src = """
    UJMP(<later>)
    NOP
    NOP SEQW UEND0
    later:
    NOPB SEQW UEND0
    """
    img = assemble(src)
    assert img.triad_at(0).ops[0].imm == 4
    again = assemble(disassemble(img))
    assert again == img


def test_unresolved_label_errors():
    with pytest.raises(asm.UnresolvedLabel):
        assemble("UJMP(<nowhere>) SEQW UEND0")


def test_unknown_mnemonic_errors():
    with pytest.raises(asm.UnknownMnemonic):
        assemble("FROBNICATE(tmp0)")


def test_parse_error_carries_line():
    with pytest.raises(asm.ParseError) as err:
        assemble("NOP\ntmp0 := ZEROEXT_DSZ64(bogusreg)\n")
    assert err.value.line_no == 2


def test_catalog_row_shape_roundtrip():
    # A control-register write re-encoded with this layout's fields must
    # disassemble back to the same mnemonic/operand shape.
    word = MicroOpWord.make(Op.MOVETOCREG_DSZ64, 0, 2, 0x701)
    text = format_uop(word)
    assert text == "MOVETOCREG_DSZ64(tmp2, 0x701)"
    img = assemble(text + " SEQW UEND0")
    assert img.triad_at(0).ops[0] == word


def test_wrsegfld_shape():
    word = MicroOpWord.make(Op.WRSEGFLD, 0, 7, 0)
    assert format_uop(word) == "WRSEGFLD(tmp7, GDT, BASE)"
    img = assemble("WRSEGFLD(tmp7, GDT, BASE)")
    assert img.triad_at(0).ops[0] == word


def test_unknown_opcode_prints_unk():
    word = MicroOpWord(encode_uop(0x3F3, 5, 12, 0x1C))
    text = format_uop(word)
    assert text.startswith("UNK_3F3")
    img = assemble(text)
    assert img.triad_at(0).ops[0] == word


def _random_defined_word(rng: random.Random) -> MicroOpWord:
    # Canonical field use per opcode family, matching what the assembler
    # itself can emit (the fixpoint property quantifies over those).
    op = rng.choice(list(Op))
    dst = rng.randrange(32)
    src = rng.randrange(30)
    imm = rng.randrange(1 << 15)
    if op in (Op.MOVETOCREG_DSZ64, Op.MOVEFROMCREG_DSZ64):
        imm &= 0xFFF
    if op in (Op.MOVETOCREG_BTS_DSZ64, Op.MOVETOCREG_BTR_DSZ64, Op.MOVETOCREG_AND_DSZ64):
        imm = ((rng.randrange(0x40)) << 12) | rng.randrange(0x1000)
    if op is Op.WRSEGFLD:
        dst = 0
        imm = (rng.randrange(4) << 6) | rng.randrange(2)
    if op in (Op.NOP, Op.NOPB, Op.UNK_256):
        dst = src = imm = 0
    if op is Op.SAVEUIP:
        src, imm = REG_ZERO, 0
    if op in (Op.UJMP, Op.MOVEFROMCREG_DSZ64):
        src = REG_ZERO
    if op in (Op.UJMP, Op.UJMPREG, Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ):
        dst = 0
        imm &= 0x7FFC
    if op is Op.UJMPREG:
        imm = 0
    return MicroOpWord.make(op, dst, src, imm)


def test_full_image_fixpoint():
    # assemble(disassemble(image)) reproduces identical control words.
    rng = random.Random(0xF1F0)
    img = UcodeImage()
    for base in range(0, 0x200, 4):
        ops = [_random_defined_word(rng) for _ in range(3)]
        seq = SequenceWord(
            uend=bool(rng.getrandbits(1)),
            sync=Sync(rng.randrange(3)),
            goto=rng.randrange(0, 0x7C00, 4) if rng.getrandbits(1) else None,
        )
        img.store(base, Triad.make(ops, seq))
    listing = disassemble(img)
    rebuilt = assemble(listing)
    assert rebuilt == img
