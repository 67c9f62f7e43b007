"""Coverage instrumentation: hook patches, installation, readback.

A plan assigns up to sixteen hook-table slots to even ROM addresses.
Fetching a hooked address ``S`` redirects into patch RAM where a
per-slot entry block disambiguates the even/odd pair with an immediate
jump, per-parity handlers stash the two link registers (tmp10/tmp14) in
the staging buffer and load the counter index and exit address, and a
shared handler bumps the 16-bit saturating counter, records the guest
IP, restores every clobbered register and returns through tmp14.  The
exit blocks restore tmp14, inline the original micro-op(s) displaced by
the redirection and continue at the original successor (or the original
jump target when the displaced micro-op was itself a jump).

Most of the patch is plan-independent and stays resident; installing a
plan rewrites only the two exit triads and the hook register of each
slot — nine control words per hook, 144 for a full table.

Counter words occupy coverage-RAM offset ``0x1000 + idx*2`` and the
last-IP slots ``0x1400 + idx*8`` with ``idx = 2*slot + parity``; the
region is agent-owned and invisible to guest loads and stores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import (
    COV_BASE,
    CTRL_HOOK_BASE,
    CTRL_PATCH_BASE,
    Engine,
    UcodeError,
)
from .ucode.model import (
    PATCH_BASE,
    REG_CF,
    REG_IP_CUR,
    REG_ZF,
    MicroOpWord,
    Op,
    SequenceWord,
    Triad,
    UcodeImage,
    is_hookable,
    slot_of,
    triad_base,
)

MAX_HOOKS = 16

# Patch RAM layout (triad bases).
ENTRY_BLOCKS = 0x7C00          # 16 x 1 triad
HANDLER_EVEN = 0x7C40          # 16 x 2 triads
HANDLER_ODD = 0x7CC0           # 16 x 2 triads
EXIT_EVEN = 0x7D40             # 16 x 1 triad (rewritten per plan)
EXIT_ODD = 0x7D80              # 16 x 1 triad (rewritten per plan)
SHARED_HANDLER = 0x7DC0        # counter/last-ip logic
SAT_CLAMP = 0x7DF0             # saturation path

# Staging-buffer save slots; 0xba00/0xbb00 hold the two link registers.
SAVE_TMP10 = 0xBA00
SAVE_TMP14 = 0xBB00
SAVE_TMP0 = 0xBA10
SAVE_TMP1 = 0xBA18
SAVE_TMP2 = 0xBA20
SAVE_ZF = 0xBA28
SAVE_CF = 0xBA30

# Coverage-map layout (byte offsets inside the coverage region).
COUNTER_OFFSET = 0x1000
LAST_IP_OFFSET = 0x1400
COUNTER_SATURATION = 0xFFFF

_COUNTER_PHYS = COV_BASE + COUNTER_OFFSET
_LAST_IP_PHYS = COV_BASE + LAST_IP_OFFSET


class InstrumentationError(UcodeError):
    pass


class UnhookableAddress(InstrumentationError):
    pass


class UnrelocatableOriginalUop(InstrumentationError):
    pass


class PatchRamOverflow(InstrumentationError):
    pass


@dataclass(frozen=True)
class HookPlan:
    """Slot assignments; each source covers itself and its odd partner."""

    hooks: tuple[tuple[int, int], ...]  # (slot, src)

    def __post_init__(self) -> None:
        if len(self.hooks) > MAX_HOOKS:
            raise InstrumentationError(f"{len(self.hooks)} hooks exceed the {MAX_HOOKS} slots")
        slots = [slot for slot, _ in self.hooks]
        srcs = [src for _, src in self.hooks]
        if len(set(slots)) != len(slots):
            raise InstrumentationError("duplicate slot in plan")
        if len(set(srcs)) != len(srcs):
            raise InstrumentationError("duplicate source in plan")
        for slot, src in self.hooks:
            if not 0 <= slot < MAX_HOOKS:
                raise InstrumentationError(f"slot {slot} out of range")
            if not is_hookable(src):
                raise UnhookableAddress(f"0x{src:04x} is not hookable")

    @classmethod
    def of(cls, sources: list[int]) -> "HookPlan":
        return cls(tuple((slot, src) for slot, src in enumerate(sources)))

    def addresses(self) -> list[int]:
        out = []
        for _, src in self.hooks:
            out.append(src)
            out.append(src + 1)
        return out


@dataclass
class CoverageReport:
    counts: dict[int, int] = field(default_factory=dict)
    last_ip: dict[int, int] = field(default_factory=dict)


@dataclass
class PatchProgram:
    runtime: list[tuple[int, Triad]]
    dynamic: list[tuple[int, Triad]]          # exit triads, rewritten per plan
    hook_values: list[tuple[int, int]]        # (slot, packed register value)
    weights: dict[int, int]


def _u(op: Op, dst: int = 0, src: int = 30, imm: int = 0) -> MicroOpWord:
    return MicroOpWord.make(op, dst, src, imm)


def _t(*ops: MicroOpWord, seq: SequenceWord = SequenceWord()) -> Triad:
    return Triad.make(list(ops), seq)


def _runtime_triads() -> list[tuple[int, Triad]]:
    triads: list[tuple[int, Triad]] = []
    for i in range(MAX_HOOKS):
        he = HANDLER_EVEN + 8 * i
        ho = HANDLER_ODD + 8 * i
        triads.append((ENTRY_BLOCKS + 4 * i, _t(
            _u(Op.UJMP, imm=he),
            _u(Op.UJMP, imm=ho),
        )))
        for base, idx, exit_addr in ((he, 2 * i, EXIT_EVEN + 4 * i),
                                     (ho, 2 * i + 1, EXIT_ODD + 4 * i)):
            triads.append((base, _t(
                _u(Op.STSTGBUF, dst=30, src=10, imm=SAVE_TMP10),
                _u(Op.STSTGBUF, dst=30, src=14, imm=SAVE_TMP14),
                _u(Op.ZEROEXT_DSZ64, dst=10, imm=idx),
            )))
            triads.append((base + 4, _t(
                _u(Op.ZEROEXT_DSZ64, dst=14, imm=exit_addr),
                _u(Op.UJMP, imm=SHARED_HANDLER),
            )))

    sh = SHARED_HANDLER
    store_base = sh + 20  # triad performing the counter store
    triads += [
        (sh, _t(
            _u(Op.STSTGBUF, dst=30, src=0, imm=SAVE_TMP0),
            _u(Op.STSTGBUF, dst=30, src=1, imm=SAVE_TMP1),
            _u(Op.STSTGBUF, dst=30, src=2, imm=SAVE_TMP2),
        )),
        (sh + 4, _t(
            _u(Op.STSTGBUF, dst=30, src=REG_ZF, imm=SAVE_ZF),
            _u(Op.STSTGBUF, dst=30, src=REG_CF, imm=SAVE_CF),
            _u(Op.ZEROEXT_DSZ64, dst=0, src=10),
        )),
        (sh + 8, _t(
            _u(Op.ADD_DSZ64, dst=0, src=10),                     # tmp0 = 2*idx
            _u(Op.ADD_DSZ64, dst=0, imm=_COUNTER_PHYS),
            _u(Op.LDPPHYS_DSZ16, dst=1, src=0),
        )),
        (sh + 12, _t(
            _u(Op.ADD_DSZ64, dst=1, imm=1),
            _u(Op.ZEROEXT_DSZ64, dst=2, src=1),
            _u(Op.SUB_DSZ64_F, dst=2, imm=COUNTER_SATURATION + 1),  # CF=1 iff not saturated
        )),
        (sh + 16, _t(
            _u(Op.ZEROEXT_DSZ64, dst=2, imm=1),
            _u(Op.SUB_DSZ64, dst=2, src=REG_CF),                 # 0 in the common case
            _u(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, src=2, imm=SAT_CLAMP),
        )),
        (store_base, _t(
            _u(Op.STPPHYS_DSZ16, dst=0, src=1),
            _u(Op.ZEROEXT_DSZ64, dst=0, src=10),
            _u(Op.ADD_DSZ64, dst=0, src=10),                     # 2*idx
        )),
        (sh + 24, _t(
            _u(Op.ADD_DSZ64, dst=0, src=0),                      # 4*idx
            _u(Op.ADD_DSZ64, dst=0, src=0),                      # 8*idx
            _u(Op.ADD_DSZ64, dst=0, imm=_LAST_IP_PHYS),
        )),
        (sh + 28, _t(
            _u(Op.STPPHYS, dst=0, src=REG_IP_CUR),
            _u(Op.LDSTGBUF, dst=1, imm=SAVE_TMP1),
            _u(Op.LDSTGBUF, dst=REG_ZF, imm=SAVE_ZF),
        )),
        (sh + 32, _t(
            _u(Op.LDSTGBUF, dst=REG_CF, imm=SAVE_CF),
            _u(Op.LDSTGBUF, dst=2, imm=SAVE_TMP2),
            _u(Op.LDSTGBUF, dst=0, imm=SAVE_TMP0),
        )),
        (sh + 36, _t(
            _u(Op.LDSTGBUF, dst=10, imm=SAVE_TMP10),
            _u(Op.UJMPREG, src=14),
        )),
        (SAT_CLAMP, _t(
            _u(Op.ZEROEXT_DSZ64, dst=1, imm=COUNTER_SATURATION),
            _u(Op.UJMP, imm=store_base),
        )),
    ]
    return triads


_RUNTIME_CACHE: list[tuple[int, Triad]] | None = None


def runtime_triads() -> list[tuple[int, Triad]]:
    global _RUNTIME_CACHE
    if _RUNTIME_CACHE is None:
        _RUNTIME_CACHE = _runtime_triads()
    return _RUNTIME_CACHE


def _original_op(image: UcodeImage, addr: int) -> tuple[MicroOpWord, SequenceWord]:
    triad = image.triad_at(triad_base(addr))
    if triad is None:
        raise UnhookableAddress(f"no microcode stored at 0x{addr:04x}")
    return triad.ops[slot_of(addr)], triad.seq


def _exit_triads(src: int, image: UcodeImage) -> tuple[Triad, Triad]:
    """Exit blocks for a hooked pair (src, src+1)."""
    restore14 = _u(Op.LDSTGBUF, dst=14, imm=SAVE_TMP14)
    orig_even, seq_even = _original_op(image, src)
    if orig_even.opcode == Op.SAVEUIP:
        raise UnrelocatableOriginalUop(f"0x{src:04x} reads its own location")

    if slot_of(src) == 2:
        # Continuation after slot 2 is the original sequence word; default
        # the fall-through to the next triad since patch RAM is elsewhere.
        seq = seq_even
        if not seq.uend and seq.goto is None:
            seq = SequenceWord(uend=False, sync=seq.sync, goto=triad_base(src) + 4)
        even = _t(restore14, orig_even, seq=seq)
        odd = _t(seq=SequenceWord(uend=True))  # slot-3 partner is never fetched
        return even, odd

    even = _t(restore14, orig_even, _u(Op.UJMP, imm=src + 1))
    orig_odd, seq_odd = _original_op(image, src + 1)
    if orig_odd.opcode == Op.SAVEUIP:
        raise UnrelocatableOriginalUop(f"0x{src + 1:04x} reads its own location")
    if slot_of(src + 1) == 2:
        seq = seq_odd
        if not seq.uend and seq.goto is None:
            seq = SequenceWord(uend=False, sync=seq.sync, goto=triad_base(src) + 4)
        odd = _t(restore14, orig_odd, seq=seq)
    else:
        odd = _t(restore14, orig_odd, _u(Op.UJMP, imm=src + 2))
    return even, odd


def synthesize_hook_patch(plan: HookPlan, image: UcodeImage) -> PatchProgram:
    """Build the patch program for a plan against a concrete image."""
    dynamic: list[tuple[int, Triad]] = []
    hook_values: list[tuple[int, int]] = []
    weights: dict[int, int] = {}
    for base, _ in runtime_triads():
        for off in range(3):
            weights[base + off] = 0
    for slot, src in plan.hooks:
        even, odd = _exit_triads(src, image)
        xe, xo = EXIT_EVEN + 4 * slot, EXIT_ODD + 4 * slot
        dynamic.append((xe, even))
        dynamic.append((xo, odd))
        packed = (1 << 63) | (src << 32) | (ENTRY_BLOCKS + 4 * slot)
        hook_values.append((slot, packed))
        for addr in (xe, xo):
            weights[addr] = 0
            weights[addr + 2] = 0
            weights[addr + 1] = 1  # the inlined original costs one budget unit
    return PatchProgram(runtime=runtime_triads(), dynamic=dynamic,
                        hook_values=hook_values, weights=weights)


def install_runtime(engine: Engine) -> int:
    """Write the plan-independent patch machinery; idempotent."""
    writes = 0
    for base, triad in runtime_triads():
        port = CTRL_PATCH_BASE + (base - PATCH_BASE) // 4
        for word in triad.words():
            engine.write_control_port(port, word)
            writes += 1
    return writes


def install_plan(engine: Engine, patch: PatchProgram) -> int:
    """Install a plan's dynamic words as one batch; returns the count.

    The resident runtime is written on first use and not counted: per
    hook the reconfiguration writes two exit triads and one hook
    register, i.e. nine control words, 144 for a full 16-hook plan.
    """
    if engine.image.triad_at(SHARED_HANDLER) is None:
        install_runtime(engine)
    writes = 0
    for base, triad in patch.dynamic:
        port = CTRL_PATCH_BASE + (base - PATCH_BASE) // 4
        for word in triad.words():
            engine.write_control_port(port, word)
            writes += 1
    for slot, packed in patch.hook_values:
        engine.write_control_port(CTRL_HOOK_BASE + slot, packed)
        writes += 1
    engine.budget_weights = dict(patch.weights)
    return writes


def read_coverage(engine: Engine, plan: HookPlan) -> CoverageReport:
    """Collect and clear the counters for a completed round."""
    report = CoverageReport()
    cov = engine.mem.cov
    for slot, src in plan.hooks:
        for parity in (0, 1):
            idx = 2 * slot + parity
            addr = src + parity
            coff = COUNTER_OFFSET + 2 * idx
            ioff = LAST_IP_OFFSET + 8 * idx
            report.counts[addr] = int.from_bytes(cov[coff:coff + 2], "little")
            report.last_ip[addr] = int.from_bytes(cov[ioff:ioff + 8], "little")
            cov[coff:coff + 2] = b"\x00\x00"
            cov[ioff:ioff + 8] = bytes(8)
    return report
