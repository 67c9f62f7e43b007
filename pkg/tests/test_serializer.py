import random

import pytest

from microfuzz import isa
from microfuzz.isa import encode
from microfuzz.serializer import (
    CapacityExceeded,
    SerializedProgram,
    UnmappableTarget,
    UnmappedOffset,
    map_ip,
    map_post_ip,
    serialize,
    unroll_misaligned,
)
from microfuzz.vm import VmConfig, run_testcase


from microfuzz.oracle import evaluate_pair


def assert_equivalent(code: bytes, rng_supply: int = 0, traced: set[int] | None = None):
    program = serialize(code, traced_ips=traced)
    p_res = run_testcase(VmConfig(code=code, rng_supply=rng_supply))
    q_res = run_testcase(VmConfig(code=program.code, rng_supply=rng_supply))
    verdict = evaluate_pair(p_res, q_res, program)
    if verdict.status == "skipped":
        return None
    assert verdict.status == "equal", (
        f"{verdict.reason}\nP={code.hex()}\nQ={program.code.hex()}"
    )
    return program


# ---------------------------------------------------------------------------
# Shape
# ---------------------------------------------------------------------------

def test_simple_program_gets_fences():
    code = encode(isa.OP_MOVI, 0, imm=5) + encode(isa.OP_HLT)
    program = serialize(code)
    # every twin has a fence immediately in front of it
    for (frag, orig), ser in program.map.entries.items():
        assert program.code[ser - 1] == isa.OP_FENCE
    # MOVI twin, then fence, then HLT twin
    movi_ser = program.map.entries[(0, 0)]
    assert program.code[movi_ser:movi_ser + 6] == code[:6]
    assert program.code[movi_ser + 6] == isa.OP_FENCE


def test_equivalence_simple():
    assert_equivalent(encode(isa.OP_MOVI, 0, imm=5) + encode(isa.OP_HLT))


def test_fragments_joined_with_hlt():
    # JMP into the middle of the MOVI immediate forces a second fragment.
    movi = encode(isa.OP_MOVI, 0, imm=0x01010101)
    code = encode(isa.OP_JMP, imm=2) + movi + encode(isa.OP_HLT)
    program = serialize(code)
    assert len(program.fragments) >= 2
    origins = {origin for _, origin in program.fragments}
    assert 4 in origins  # interior of the MOVI payload
    for start, _ in program.fragments[1:]:
        # the byte before a fragment's leading fence is the joining HLT
        assert program.code[start - 1] == isa.OP_HLT


def test_misaligned_jump_equivalence():
    # Jump lands inside the MOVI payload; the bytes there decode as a
    # different instruction stream that must behave identically in Q.
    inner = encode(isa.OP_MOVI, 3, imm=0x99) + encode(isa.OP_HLT)
    movi = bytes([0x10, 0x00]) + inner[:4]  # MOVI r0 swallowing the inner code
    code = encode(isa.OP_JMP, imm=2) + movi + inner[4:]
    program = assert_equivalent(code)
    assert program is not None


def test_unroll_matches_linear_decode():
    rng = random.Random(17)
    for _ in range(50):
        code = bytes(rng.randrange(256) for _ in range(40))
        for origin in range(len(code)):
            stream = unroll_misaligned(code, origin)
            off = origin
            for stream_off, insn in stream:
                assert stream_off == off
                expected, length = isa.decode_instruction(code, off)
                assert expected == insn
                off += length
            last = stream[-1][1]
            assert last.index == isa.OP_HLT or last.is_ud


def test_unroll_at_ud_byte():
    stream = unroll_misaligned(bytes([0xFE, 0x00]), 0)
    assert len(stream) == 1 and stream[0][1].is_ud


def test_map_roundtrip():
    code = (
        encode(isa.OP_MOVI, 0, imm=5)
        + encode(isa.OP_JZ, imm=1)
        + encode(isa.OP_NOP)
        + encode(isa.OP_HLT)
    )
    program = serialize(code)
    assert map_ip(program, program.map.entries[(0, 0)]) == 0
    for (frag, orig), ser in program.map.entries.items():
        assert program.original_at(ser) == (frag, orig)
    fence_ser = program.map.entries[(0, 0)] - 1
    with pytest.raises(UnmappedOffset):
        map_ip(program, fence_ser)


def test_loadrip_absolute_address_preserved():
    # LOADRIP targeting the read-only tables must read the same address
    # from the moved location.
    rel = 0x8000 - 4
    code = encode(isa.OP_LOADRIP, 1, imm=rel) + encode(isa.OP_HLT)
    program = assert_equivalent(code)
    ser = program.map.entries[(0, 0)]
    new_rel = int.from_bytes(program.code[ser + 2:ser + 4], "little")
    absolute = (ser + 4 + ((new_rel ^ 0x8000) - 0x8000)) & 0xFFFF
    assert absolute == 0x8000


def test_out_of_region_target_rejected():
    code = encode(isa.OP_JMP, imm=-8)  # wraps far outside the code region
    with pytest.raises(UnmappableTarget):
        serialize(code)


def test_oversize_input_rejected():
    with pytest.raises(CapacityExceeded):
        serialize(bytes(isa.CODE_REGION_SIZE // 4 + 1))


# ---------------------------------------------------------------------------
# Displacement relaxation
# ---------------------------------------------------------------------------

def _padded_jump(pad_len: int) -> bytes:
    # JMP forward over pad_len bytes of NOPs to a MOVI+HLT tail.
    return (
        encode(isa.OP_JMP, imm=pad_len)
        + bytes([isa.OP_NOP]) * pad_len
        + encode(isa.OP_MOVI, 2, imm=0x77)
        + encode(isa.OP_HLT)
    )


def test_forward_jump_at_displacement_boundary():
    for pad in (10, 60, 100, 120, 126):
        assert_equivalent(_padded_jump(pad))


def test_relaxed_jump_has_hop_islands():
    # 120 NOPs serialize to 240+ bytes: the displacement overflows rel8
    # and must be threaded through at least one hop.
    program = assert_equivalent(_padded_jump(120))
    assert len(program.code) > 240


def test_backward_jump_relaxation():
    # Loop backwards over a long stretch: decremented r0 breaks the loop.
    pad = 100
    code = (
        encode(isa.OP_MOVI, 0, imm=1)
        + encode(isa.OP_JMP, imm=pad)      # skip the pad
        + bytes([isa.OP_NOP]) * pad        # landing pad for the backward jump
        + encode(isa.OP_SUB, 0, 1)         # r0 -= r1 (r1=0) ... sets ZF when r0==0
        + encode(isa.OP_JNZ, imm=-(pad + 5))  # backwards while r0 != 0
        + encode(isa.OP_HLT)
    )
    # make it terminate: r0 starts 1, SUB r0,r1 with r1=0 leaves 1... use SUB r0,r2? simpler:
    code = (
        encode(isa.OP_MOVI, 0, imm=2)
        + encode(isa.OP_MOVI, 1, imm=1)
        + bytes([isa.OP_NOP]) * pad
        + encode(isa.OP_SUB, 0, 1)
        + encode(isa.OP_JNZ, imm=-(pad + 3 + 2))
        + encode(isa.OP_HLT)
    )
    assert_equivalent(code)


def test_conditional_both_paths_after_relaxation():
    pad = 121
    for zf_seed in (0, 1):
        prologue = encode(isa.OP_XOR, 0, 0) if zf_seed else (
            encode(isa.OP_MOVI, 0, imm=1) + encode(isa.OP_XOR, 0, 0)
            + encode(isa.OP_MOVI, 0, imm=1) + encode(isa.OP_ADD, 0, 0)
        )
        code = (
            prologue
            + encode(isa.OP_JZ, imm=pad)
            + bytes([isa.OP_NOP]) * pad
            + encode(isa.OP_MOVI, 3, imm=0xAA)
            + encode(isa.OP_HLT)
        )
        assert_equivalent(code)


# ---------------------------------------------------------------------------
# Randomized equivalence (the oracle the acceptance suite scales up)
# ---------------------------------------------------------------------------

def test_random_equivalence_small():
    rng = random.Random(0xD1FF)
    skipped = 0
    for _ in range(300):
        code = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 96)))
        try:
            result = assert_equivalent(code, rng_supply=rng.randrange(1 << 32))
        except (UnmappableTarget, CapacityExceeded):
            skipped += 1
            continue
        if result is None:
            skipped += 1
    assert skipped < 150  # most random inputs must actually be compared


def test_random_valid_equivalence():
    from microfuzz.corpus import gen_valid_corpus

    seeds = gen_valid_corpus(60, 48, seed=77)
    for seed in seeds:
        try:
            assert_equivalent(bytes(seed.data), rng_supply=5)
        except (UnmappableTarget, CapacityExceeded):
            continue


def test_wire_roundtrip():
    code = encode(isa.OP_MOVI, 0, imm=5) + encode(isa.OP_HLT)
    program = serialize(code)
    back = SerializedProgram.from_bytes(program.to_bytes())
    assert back.code == program.code
    assert back.map.entries == program.map.entries
