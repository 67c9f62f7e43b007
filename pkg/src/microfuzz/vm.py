"""Hypervisor-analog: isolated, deterministic guest execution.

A testcase is raw bytes loaded into the execute-only window of a fixed
three-region address space (code 0x0000-0x3FFF execute-only, scratch
0x4000-0x7FFF read-write, tables 0x8000-0x8FFF read-only).  Every run
starts from the canonical architectural state, with the read-write
window zeroed, and ends with exactly one exit reason.  The hardware
random supply is intercepted and served from a seed-keyed stream so
reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from .engine import (
    CODE_END,
    RO_END,
    RO_START,
    RW_END,
    RW_START,
    Engine,
    FaultModel,
    LockupClass,
    MacroContext,
    MS_ENTRY_COUNTER,
    RunOutcome,
    UcodeTrace,
    fnv1a64,
)
from .engine import ArchState  # noqa: F401  (guest-visible state lives with the engine)
from .rom import shared_rom
from .ucode.model import UcodeImage

MAX_CODE_SIZE = CODE_END


class ExitKind:
    HALT = "Halt"
    TIMEOUT = "Timeout"
    UNDEFINED_OPCODE = "UndefinedOpcode"
    MEMORY_VIOLATION = "MemoryViolation"
    IO_ACCESS = "IoAccess"
    NONDETERMINISM = "NondeterminismIntercept"
    ENGINE_LOCKUP = "EngineLockup"


# MemoryViolation details
MEMV_WRITE_TO_EXECUTE_ONLY = 0
MEMV_OUT_OF_RANGE = 1
# EngineLockup details
LOCKUP_STABLE = 0
LOCKUP_UNSTABLE = 1

_VIOLATION_DETAILS = {
    "write-to-execute-only": MEMV_WRITE_TO_EXECUTE_ONLY,
    "out-of-range": MEMV_OUT_OF_RANGE,
}


@dataclass(frozen=True)
class ExitReason:
    kind: str
    detail: int = 0

    def __str__(self) -> str:
        if self.kind == ExitKind.MEMORY_VIOLATION:
            name = "write-to-execute-only" if self.detail == 0 else "out-of-range"
            return f"MemoryViolation({name})"
        if self.kind == ExitKind.IO_ACCESS:
            return f"IoAccess(port={self.detail:#x})"
        if self.kind == ExitKind.ENGINE_LOCKUP:
            name = LockupClass.STABLE_TIMEOUT if self.detail == 0 else LockupClass.UNSTABLE
            return f"EngineLockup({name})"
        return self.kind


@dataclass
class VmConfig:
    code: bytes
    max_macro_insns: int = 10_000
    max_uops: int = 1_000_000
    rng_supply: int = 0

    def __post_init__(self) -> None:
        if len(self.code) > MAX_CODE_SIZE:
            raise ValueError(f"testcase exceeds the code window ({len(self.code)} bytes)")


@dataclass
class RunResult:
    arch: "ArchState"
    exit: ExitReason
    retired: int
    rw_digest: int
    cmp_digest: int
    executed_bytes: int
    executed_offsets: set[int] = field(default_factory=set)
    arch_trace: list[tuple[int, "ArchState"]] | None = None
    ucode_trace: UcodeTrace | None = None

    def outcome_tuple(self) -> tuple:
        return (self.arch.as_tuple(), (self.exit.kind, self.exit.detail), self.rw_digest)


def _build_tables() -> bytes:
    # Descriptor-table-analog content for the read-only window: 64
    # eight-byte entries derived from a fixed pattern.
    out = bytearray()
    for i in range(64):
        out += ((0x00CF9A000000FFFF ^ (i * 0x0101010101)) & ((1 << 64) - 1)).to_bytes(8, "little")
    out += bytes(RO_END - RO_START - len(out))
    return bytes(out)


_RO_TABLES = _build_tables()


class GuestVm:
    """One virtual CPU around one microcode engine; never shared."""

    def __init__(
        self,
        config: VmConfig,
        rom: UcodeImage | None = None,
        fault: FaultModel | None = None,
    ) -> None:
        image = (rom if rom is not None else shared_rom()).copy()
        self.config = config
        self.engine = Engine(image, fault=fault, rng_seed=config.rng_supply)
        self.engine.collect_trace = False
        self._code = bytes(config.code)
        self._was_reset = False

    # -- lifecycle ----------------------------------------------------------

    def reset(self) -> None:
        """Purge transient state: canonical registers, zeroed scratch."""
        self.engine.reset()
        mem = self.engine.mem
        mem.guest[:CODE_END] = bytes(CODE_END)
        mem.guest[:len(self._code)] = self._code
        mem.zero_rw()
        mem.guest[RO_START:RO_END] = _RO_TABLES
        self.engine.rng_seed = self.config.rng_supply
        self._was_reset = True

    def ro_digest(self) -> int:
        return fnv1a64(self.engine.mem.guest[RO_START:RO_END])

    def rw_digest(self) -> int:
        return fnv1a64(self.engine.mem.guest[RW_START:RW_END])

    # -- execution ----------------------------------------------------------

    def _dispatch_ctx(self, ip: int) -> tuple[isa.GisaInstruction, MacroContext]:
        insn, length = isa.decode_instruction(self._code, ip)
        ctx = MacroContext(
            a=insn.a, b=insn.b, imm=insn.imm,
            next_ip=(ip + length) & 0xFFFF, cur_ip=ip,
        )
        return insn, ctx

    def _spec_dispatch(self, next_ip: int):
        """Speculative continuation across the macro boundary (pure)."""
        if not 0 <= next_ip < CODE_END:
            return None
        insn, ctx = self._dispatch_ctx(next_ip)
        return insn.entry, ctx

    def run(
        self,
        collect_arch_trace: bool = False,
        collect_ucode_trace: bool = False,
    ) -> RunResult:
        assert self._was_reset, "run() requires a fresh or reset VM"
        self._was_reset = False
        engine = self.engine
        engine.collect_trace = collect_ucode_trace
        config = self.config

        retired = 0
        used = 0
        executed: set[int] = set()
        call_slots: list[int] = []
        trace: list[tuple[int, ArchState]] | None = [] if collect_arch_trace else None
        exit_reason: ExitReason | None = None

        while True:
            if retired >= config.max_macro_insns:
                exit_reason = ExitReason(ExitKind.TIMEOUT)
                break
            ip = engine.arch.ip
            if not 0 <= ip < CODE_END:
                exit_reason = ExitReason(ExitKind.MEMORY_VIOLATION, MEMV_OUT_OF_RANGE)
                break
            insn, ctx = self._dispatch_ctx(ip)
            engine.state.perf[MS_ENTRY_COUNTER] = engine.state.perf.get(MS_ENTRY_COUNTER, 0) + 1
            outcome, used = engine.run_from_entry(
                insn.entry, config.max_uops, macro_ctx=ctx,
                dispatch_cb=self._spec_dispatch, used=used,
            )
            retired += 1
            executed.update(range(ip, ip + insn.length))
            if outcome.kind == "lockup":
                detail = LOCKUP_STABLE if outcome.lockup_class == LockupClass.STABLE_TIMEOUT \
                    else LOCKUP_UNSTABLE
                exit_reason = ExitReason(ExitKind.ENGINE_LOCKUP, detail)
                if trace is not None:
                    trace.append((retired - 1, engine.arch.copy()))
                break
            if outcome.kind == "budget":
                exit_reason = ExitReason(ExitKind.TIMEOUT)
                if trace is not None:
                    trace.append((retired - 1, engine.arch.copy()))
                break
            engine.arch.ip = engine.macro.next_ip
            if trace is not None:
                trace.append((retired - 1, engine.arch.copy()))
            request = engine.state.exit_request
            if request is not None:
                kind, detail = request
                if kind == "halt":
                    exit_reason = ExitReason(ExitKind.HALT)
                elif kind == "ud":
                    exit_reason = ExitReason(ExitKind.UNDEFINED_OPCODE)
                elif kind == "io":
                    exit_reason = ExitReason(ExitKind.IO_ACCESS, detail)
                elif kind.startswith("violation:"):
                    exit_reason = ExitReason(
                        ExitKind.MEMORY_VIOLATION,
                        _VIOLATION_DETAILS[kind.split(":", 1)[1]],
                    )
                else:  # pragma: no cover - closed set
                    exit_reason = ExitReason(ExitKind.NONDETERMINISM)
                break
            if insn.index == isa.OP_CALL:
                # Return-address slots hold layout-dependent values; the
                # comparison digest masks them (see cmp_digest below).
                call_slots.append(engine.arch.r[7])

        rw = bytes(engine.mem.guest[RW_START:RW_END])
        rw_digest = fnv1a64(rw)
        if call_slots:
            masked = bytearray(rw)
            for addr in call_slots:
                off = addr - RW_START
                if 0 <= off <= len(masked) - 8:
                    masked[off:off + 8] = bytes(8)
            cmp_digest = fnv1a64(masked)
        else:
            cmp_digest = rw_digest

        return RunResult(
            arch=engine.arch.copy(),
            exit=exit_reason,
            retired=retired,
            rw_digest=rw_digest,
            cmp_digest=cmp_digest,
            executed_bytes=len(executed),
            executed_offsets=executed,
            arch_trace=trace,
            ucode_trace=engine.trace if collect_ucode_trace else None,
        )


def run_testcase(
    config: VmConfig,
    rom: UcodeImage | None = None,
    fault: FaultModel | None = None,
    collect_arch_trace: bool = False,
    collect_ucode_trace: bool = False,
    trial_id: int = 0,
) -> RunResult:
    """Reset-and-run convenience wrapper around :class:`GuestVm`."""
    vm = GuestVm(config, rom=rom, fault=fault)
    vm.engine.set_trial(trial_id)
    vm.reset()
    return vm.run(collect_arch_trace=collect_arch_trace, collect_ucode_trace=collect_ucode_trace)


def trace_run(
    config: VmConfig,
    rom: UcodeImage | None = None,
    fault: FaultModel | None = None,
    trial_id: int = 0,
) -> list[tuple[int, ArchState]]:
    """Post-instruction architectural snapshots, for divergence replay."""
    result = run_testcase(config, rom=rom, fault=fault, collect_arch_trace=True,
                          trial_id=trial_id)
    assert result.arch_trace is not None
    return result.arch_trace
