"""Synthetic control-store ROM implementing the guest ISA in microcode.

Every guest opcode's handler starts at ``index * 8`` (two triads of
room); longer routines continue in the shared region above 0x1000.
Undefined opcode indices get a trap routine that requests the
undefined-opcode VM exit, so all 512 entry points below 0x1000 are
populated and execution never falls into an empty control store.

Conditional guest behavior is built on the statically-predicted-not-
taken micro-branch, which means taken guest branches genuinely
mispredict and speculate into the following instruction's microcode —
the property the speculation-fuzzing layers exercise.
"""

from __future__ import annotations

from . import isa
from .engine import PORT_EXIT_HALT, PORT_EXIT_IO, PORT_EXIT_UD, PORT_GDT_BASE, PORT_RNG
from .ucode.model import (
    CRADDR_MACRO_REL,
    REG_ARG_A,
    REG_ARG_B,
    REG_CF,
    REG_IP_NEXT,
    REG_M_IMM,
    REG_R0,
    REG_ZERO,
    REG_ZF,
    MicroOpWord,
    Op,
    SequenceWord,
    Sync,
    Triad,
    UcodeImage,
)

RSP = REG_R0 + 7

# Continuation blocks shared by entry routines.
REL_JUMP = 0x1000  # apply the relative displacement to the next-IP register
CRND_NZ = 0x1010  # set CF after a nonzero hardware-random draw
CREP_LOOP = 0x1020  # decrement-and-repeat loop body

# Window into the control-register bus reachable from guest code through
# the control-write instruction: effective address = 0x602 + imm8.
GUEST_CR_WINDOW = 0x602


def u(op: Op, dst: int = 0, src: int = REG_ZERO, imm: int = 0) -> MicroOpWord:
    return MicroOpWord.make(op, dst, src, imm)


def triad(*ops: MicroOpWord, uend: bool = False, sync: Sync = Sync.NONE,
          goto: int | None = None) -> Triad:
    return Triad.make(list(ops), SequenceWord(uend=uend, sync=sync, goto=goto))


UEND = dict(uend=True)


def _ud_trap() -> Triad:
    return triad(u(Op.MOVETOCREG_DSZ64, imm=PORT_EXIT_UD), **UEND)


def build_rom() -> UcodeImage:
    image = UcodeImage()

    def entry(index: int, *triads: Triad) -> None:
        base = index * 8
        if len(triads) > 2:
            raise ValueError(f"entry {index:#x} needs a continuation block")
        for i, t in enumerate(triads):
            image.store(base + 4 * i, t)

    # Populate every entry point with the trap first; real handlers
    # overwrite their slots below.
    for index in range(0x200):
        entry(index, _ud_trap())

    entry(isa.OP_HLT, triad(u(Op.MOVETOCREG_DSZ64, imm=PORT_EXIT_HALT), **UEND))
    entry(isa.OP_NOP, triad(**UEND))
    entry(isa.OP_FENCE, triad(uend=True, sync=Sync.LFNCEWAIT))

    entry(isa.OP_MOVI, triad(u(Op.ZEROEXT_DSZ64, REG_ARG_A, REG_M_IMM), **UEND))
    entry(isa.OP_ADD, triad(u(Op.ADD_DSZ64_F, REG_ARG_A, REG_ARG_B), **UEND))
    entry(isa.OP_SUB, triad(u(Op.SUB_DSZ64_F, REG_ARG_A, REG_ARG_B), **UEND))
    entry(isa.OP_XOR, triad(u(Op.XOR_DSZ64_F, REG_ARG_A, REG_ARG_B), **UEND))

    entry(isa.OP_LOAD, triad(
        u(Op.ZEROEXT_DSZ64, 0, REG_ARG_B),
        u(Op.ADD_DSZ64, 0, REG_M_IMM),
        u(Op.LDPPHYS_ASZ16, REG_ARG_A, 0),
        **UEND,
    ))
    entry(isa.OP_STORE, triad(
        u(Op.ZEROEXT_DSZ64, 0, REG_ARG_A),
        u(Op.ADD_DSZ64, 0, REG_M_IMM),
        u(Op.STPPHYS_ASZ16, 0, REG_ARG_B),
        **UEND,
    ))
    entry(isa.OP_LOADRIP, triad(
        u(Op.ZEROEXT_DSZ64, 0, REG_IP_NEXT),
        u(Op.ADD_DSZ64, 0, REG_M_IMM),
        u(Op.LDPPHYS_ASZ16, REG_ARG_A, 0),
        **UEND,
    ))

    entry(isa.OP_JMP, triad(u(Op.ADD_DSZ64, REG_IP_NEXT, REG_M_IMM), **UEND))
    entry(isa.OP_JZ, triad(
        u(Op.ZEROEXT_DSZ64, 0, REG_ZF),
        u(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, 0, 0, REL_JUMP),
        **UEND,
    ))
    entry(isa.OP_JNZ, triad(
        u(Op.ZEROEXT_DSZ64, 0, imm=1),
        u(Op.SUB_DSZ64, 0, REG_ZF),
        u(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, 0, 0, REL_JUMP),
        **UEND,
    ))
    entry(
        isa.OP_CALL,
        triad(
            u(Op.ZEROEXT_DSZ64, 0, imm=8),
            u(Op.SUB_DSZ64, RSP, 0),
            u(Op.STPPHYS_ASZ16, RSP, REG_IP_NEXT),
        ),
        triad(u(Op.ADD_DSZ64, REG_IP_NEXT, REG_M_IMM), **UEND),
    )
    entry(
        isa.OP_RET,
        triad(
            u(Op.LDPPHYS_ASZ16, 0, RSP),
            u(Op.ZEROEXT_DSZ64, 1, imm=8),
            u(Op.ADD_DSZ64, RSP, 1),
        ),
        triad(u(Op.ZEROEXT_DSZ64, REG_IP_NEXT, 0), **UEND),
    )

    entry(
        isa.OP_CRND,
        triad(
            u(Op.MOVEFROMCREG_DSZ64, 0, imm=PORT_RNG),
            u(Op.ZEROEXT_DSZ64, REG_ARG_A, 0),
            u(Op.ZEROEXT_DSZ64, REG_CF, imm=0),
        ),
        triad(u(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, 0, 0, CRND_NZ), **UEND),
    )
    entry(isa.OP_CREP, triad(
        u(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, 0, REG_ARG_A, CREP_LOOP), **UEND,
    ))
    entry(isa.OP_CSEG, triad(
        u(Op.MOVEFROMCREG_DSZ64, 2, imm=PORT_GDT_BASE),
        u(Op.WRSEGFLD, 0, REG_ARG_A, 0),  # (GDT, BASE)
        u(Op.ZEROEXT_DSZ64, REG_ARG_A, 2),
        **UEND,
    ))
    entry(isa.OP_CCR, triad(
        u(Op.MOVETOCREG_DSZ64, 0, REG_ARG_A, GUEST_CR_WINDOW | CRADDR_MACRO_REL),
        **UEND,
    ))
    entry(isa.OP_IOW, triad(
        u(Op.MOVETOCREG_DSZ64, 0, REG_M_IMM, PORT_EXIT_IO), **UEND,
    ))
    entry(isa.OP_CPUINFO, triad(
        u(Op.ZEROEXT_DSZ64, REG_R0 + 0, imm=1),
        u(Op.MOVEFROMCREG_DSZ64, REG_R0 + 1, imm=PORT_GDT_BASE),
        u(Op.MOVEFROMCREG_DSZ64, REG_R0 + 2, imm=0x692),
        **UEND,
    ))

    # Shared continuations.
    image.store(REL_JUMP, triad(u(Op.ADD_DSZ64, REG_IP_NEXT, REG_M_IMM), **UEND))
    image.store(CRND_NZ, triad(u(Op.ZEROEXT_DSZ64, REG_CF, imm=1), **UEND))
    image.store(CREP_LOOP, triad(
        u(Op.ZEROEXT_DSZ64, 0, imm=1),
        u(Op.SUB_DSZ64, REG_ARG_A, 0),
        u(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, 0, REG_ARG_A, CREP_LOOP),
        **UEND,
    ))

    return image


_ROM_CACHE: UcodeImage | None = None


def shared_rom() -> UcodeImage:
    """The immutable ROM singleton; callers copy before mutating."""
    global _ROM_CACHE
    if _ROM_CACHE is None:
        _ROM_CACHE = build_rom()
    return _ROM_CACHE
