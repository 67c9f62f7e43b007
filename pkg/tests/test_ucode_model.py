import random

import pytest
from hypothesis import given, strategies as st

from microfuzz.ucode import model
from microfuzz.ucode.model import (
    FieldOverflow,
    MicroOpWord,
    Op,
    SequenceWord,
    Sync,
    Triad,
    UcodeImage,
    decode_uop,
    encode_uop,
)


def test_encode_layout_nop():
    # Forced by the field layout: opcode 0x001, everything else zero.
    assert encode_uop(0x001, 0, 0, 0) == 0x001000000000


def test_encode_layout_zeroext_imm():
    assert encode_uop(0x0AB, 2, 0, 0xABAB) == 0x0AB08000ABAB


def test_encode_rejects_overflow():
    with pytest.raises(FieldOverflow):
        encode_uop(0x1000, 0, 0, 0)
    with pytest.raises(FieldOverflow):
        encode_uop(0x001, 64, 0, 0)
    with pytest.raises(FieldOverflow):
        encode_uop(0x001, 0, 64, 0)
    with pytest.raises(FieldOverflow):
        encode_uop(0x001, 0, 0, 1 << 24)


def test_encode_decode_roundtrip_random():
    rng = random.Random(0xC0DE)
    for _ in range(1000):
        fields = (
            rng.randrange(1 << 12),
            rng.randrange(1 << 6),
            rng.randrange(1 << 6),
            rng.randrange(1 << 24),
        )
        assert decode_uop(encode_uop(*fields)) == fields


@given(st.integers(min_value=0, max_value=(1 << 48) - 1))
def test_decode_encode_fixpoint(raw):
    assert encode_uop(*decode_uop(raw)) == raw


def test_unknown_opcode_flagged():
    word = MicroOpWord.make(0x3FF)
    assert not word.defined
    assert MicroOpWord.make(Op.NOP).defined


def test_triad_serializes_to_four_words():
    triad = Triad.make([MicroOpWord.make(Op.NOP)], SequenceWord(uend=True))
    assert len(triad.words()) == 4
    assert Triad.from_words(triad.words()) == triad


def test_sequence_word_roundtrip():
    for seq in (
        SequenceWord(),
        SequenceWord(uend=True),
        SequenceWord(sync=Sync.LFNCEWAIT, uend=True),
        SequenceWord(sync=Sync.SYNCFULL),
        SequenceWord(goto=0x1230),
        SequenceWord(uend=True, sync=Sync.SYNCFULL, goto=0x7C00),
    ):
        assert SequenceWord.decode(seq.encode()) == seq


def test_sequence_goto_must_be_slot0():
    with pytest.raises(model.InvalidAddress):
        SequenceWord(goto=0x1231)


def test_address_predicates():
    assert model.slot_of(0x0102) == 2
    assert model.is_valid_address(0x0102)
    assert not model.is_valid_address(0x0103)  # slot 3
    assert not model.is_valid_address(0x8000)
    # hookable: even, valid slot, ROM region
    assert model.is_hookable(0x0100)
    assert model.is_hookable(0x0102)
    assert not model.is_hookable(0x0101)
    assert not model.is_hookable(0x7C00)  # patch RAM
    # every hookable source's successor math avoids slot 3 on real fetches:
    for s in range(0, 64, 2):
        if model.is_hookable(s) and model.slot_of(s) == 0:
            assert model.slot_of(s + 1) == 1


def test_hookable_population_matches_round_arithmetic():
    # 0x7C00 addresses, half of them even: 992 rounds of 16 sources.
    assert model.count_hookable() == 0x7C00 // 2
    assert model.count_hookable() // 16 == 992


def test_image_store_and_lookup():
    img = UcodeImage()
    triad = Triad.make([MicroOpWord.make(Op.NOP)], SequenceWord(uend=True))
    img.store(0x0100, triad)
    assert img.triad_at(0x0100) == triad
    assert img.op_at(0x0101).opcode == Op.NOP
    with pytest.raises(model.InvalidAddress):
        img.store(0x0101, triad)
    with pytest.raises(model.InvalidAddress):
        img.op_at(0x0103)


def test_image_binary_roundtrip():
    rng = random.Random(7)
    img = UcodeImage()
    for base in range(0, 0x100, 4):
        ops = [MicroOpWord(rng.randrange(1 << 48)) for _ in range(3)]
        img.store(base, Triad.make(ops, SequenceWord(uend=bool(rng.getrandbits(1)))))
    img.store(0x7C04, Triad.make([MicroOpWord.make(Op.NOPB)]))
    blob = img.to_bytes()
    assert UcodeImage.from_bytes(blob) == img


def test_patch_ram_capacity():
    # The patch window holds exactly 256 triads; overwrites don't grow it.
    img = UcodeImage()
    triad = Triad.make([])
    for i in range(256):
        img.store(0x7C00 + 4 * i, triad)
    assert len(img.ram) == 256
    img.store(0x7C00, Triad.make([MicroOpWord.make(Op.NOP)]))
    assert len(img.ram) == 256
    with pytest.raises(model.InvalidAddress):
        img.store(0x8000, triad)
