"""Microcode engine: triad execution, hook redirection, speculation.

The engine interprets 48-bit micro-ops out of a :class:`UcodeImage`,
honoring hook-table redirection on every fetch, sequence-word control at
triad boundaries, and a speculative-window model for the statically
predicted ``UJMPCC_DIRECT_NOTTAKEN_CONDNZ`` branch: when the condition
makes the branch taken, the fall-through path keeps executing for a
bounded window and every effect is journaled, then rolled back — except
effects of micro-ops matched by a ``persists_through_rollback`` fault
rule, which is the misbehavior this simulator exists to inject and
detect.

All mutable state a micro-op can touch lives behind journaled setters:
scratch registers, guest architectural registers and flags, the staging
buffer, the control-register bus, the segment-field cache, physical
memory (guest plus the instrumentation counter region), performance
counters and the pending VM-exit request.  Rollback restores the
pre-branch snapshot in two passes: undo everything in reverse, then
re-apply the entries whose micro-op matched a persistence rule.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .ucode.model import (
    ADDRESS_SPACE,
    CRADDR_MACRO_REL,
    FLAG_BASE,
    PATCH_BASE,
    REG_ARG_A,
    REG_ARG_B,
    REG_CF,
    REG_IP_CUR,
    REG_IP_NEXT,
    REG_M_IMM,
    REG_R0,
    REG_ZERO,
    REG_ZF,
    InvalidAddress,
    Op,
    Sync,
    Triad,
    UcodeError,
    UcodeImage,
    is_hookable,
    is_patch_ram,
    slot_of,
    triad_base,
)

MASK64 = (1 << 64) - 1

# Control-register bus ports (the map is fixed for this engine).
PORT_HOOK_ACTIVE = 0x692  # bit 0 set = hook table disabled
PORT_EXIT_HALT = 0x7E0
PORT_EXIT_UD = 0x7E1
PORT_EXIT_IO = 0x7E2
PORT_RNG = 0x7F0  # reads pop the deterministic random supply
PORT_GDT_BASE = 0x7F4  # read-only mirror of the segment-cache GDT base

# Engine control ports (reachable through write_control_port only).
CTRL_PATCH_BASE = 0xE00  # +t: four sequential writes fill patch triad t
CTRL_HOOK_BASE = 0xF00  # +i: hook register i
HOOK_REGISTERS = 16

# Physical layout: guest space is 0x9000 bytes; the instrumentation
# counter region is a separate agent-owned window, not guest-addressable.
GUEST_MEM_SIZE = 0x9000
COV_BASE = 0x10000
COV_SIZE = 0x4000

CODE_END = 0x4000
RW_START = 0x4000
RW_END = 0x8000
RO_START = 0x8000
RO_END = 0x9000

DEFAULT_GDT_BASE = 0x8000  # descriptor tables live in the read-only region


class EngineError(UcodeError):
    pass


class UnknownPort(EngineError):
    pass


class PortRejected(EngineError):
    pass


class _Fault(Exception):
    """Internal: guest-checked memory access violated region permissions."""

    def __init__(self, kind: str) -> None:
        self.kind = kind


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------

@dataclass
class ArchState:
    """Guest-visible CPU state; r7 is the stack pointer by convention."""

    r: list[int] = field(default_factory=lambda: [0] * 8)
    zf: int = 0
    cf: int = 0
    ip: int = 0

    @classmethod
    def initial(cls) -> "ArchState":
        state = cls()
        state.r[7] = 0x7FF0
        return state

    def copy(self) -> "ArchState":
        return ArchState(r=list(self.r), zf=self.zf, cf=self.cf, ip=self.ip)

    def as_tuple(self) -> tuple:
        return (tuple(self.r), self.zf, self.cf, self.ip)


@dataclass
class MacroContext:
    """Decoded macro-instruction operands visible through alias registers."""

    a: int | None = None
    b: int | None = None
    imm: int = 0
    next_ip: int = 0
    cur_ip: int = 0


@dataclass
class EngineState:
    tmp: list[int] = field(default_factory=lambda: [0] * 16)
    staging: dict[int, int] = field(default_factory=dict)
    crbus: dict[int, int] = field(default_factory=dict)
    seg_fields: dict[tuple[int, int], int] = field(
        default_factory=lambda: {(0, 0): DEFAULT_GDT_BASE}
    )
    perf: dict[str, int] = field(default_factory=dict)
    hook_table_active: bool = True
    exit_request: tuple[str, int] | None = None
    rng_counter: int = 0

    @property
    def gdt_base(self) -> int:
        return self.seg_fields.get((0, 0), DEFAULT_GDT_BASE)


@dataclass(frozen=True)
class HookEntry:
    enabled: bool
    src: int
    dst: int


class HookTable:
    """Sixteen redirection registers mapping even ROM addresses to patch RAM.

    A hook on even ``src`` implicitly pairs ``src + 1`` with ``dst + 1``.
    """

    def __init__(self) -> None:
        self.entries: list[HookEntry | None] = [None] * HOOK_REGISTERS
        self._map: dict[int, int] = {}

    def set_entry(self, slot: int, entry: HookEntry | None) -> None:
        if not 0 <= slot < HOOK_REGISTERS:
            raise PortRejected(f"hook register {slot} out of range")
        if entry is not None and entry.enabled:
            if not is_hookable(entry.src):
                raise PortRejected(f"hook source 0x{entry.src:04x} not hookable")
            if not is_patch_ram(entry.dst):
                raise PortRejected(f"hook destination 0x{entry.dst:04x} not in patch RAM")
        self.entries[slot] = entry
        self._rebuild()

    def clear(self) -> None:
        self.entries = [None] * HOOK_REGISTERS
        self._map = {}

    def _rebuild(self) -> None:
        self._map = {}
        for entry in self.entries:
            if entry is not None and entry.enabled:
                self._map[entry.src] = entry.dst
                self._map[entry.src + 1] = entry.dst + 1

    def lookup(self, addr: int) -> int:
        return self._map.get(addr, addr)


# ---------------------------------------------------------------------------
# Fault model
# ---------------------------------------------------------------------------

class LockupClass:
    NONE = "None"
    STABLE_TIMEOUT = "StableTimeout"
    UNSTABLE = "Unstable"


@dataclass(frozen=True)
class FaultRule:
    """Matches micro-ops by opcode, source register and/or effective CRBUS
    address; fires only on speculative execution."""

    opcode: int | None = None
    crbus: int | None = None
    src: int | None = None
    persists_through_rollback: bool = False
    lockup: str = LockupClass.NONE
    probability: float = 0.5

    def matches(self, opcode: int, src: int, crbus_addr: int | None) -> bool:
        if self.opcode is not None and opcode != self.opcode:
            return False
        if self.src is not None and src != self.src:
            return False
        if self.crbus is not None and crbus_addr != self.crbus:
            return False
        return True


@dataclass
class FaultModel:
    rules: list[FaultRule] = field(default_factory=list)
    spec_window_uops: int = 8
    spec_stops_at_ms_dispatch: bool = False
    perf_counts_speculative: bool = False

    def __post_init__(self) -> None:
        if self.spec_window_uops < 1:
            raise EngineError("speculative window must cover at least one micro-op")
        for rule in self.rules:
            if not 0.0 <= rule.probability <= 1.0:
                raise EngineError(f"probability {rule.probability} outside [0, 1]")

    @classmethod
    def correct(cls, **kwargs) -> "FaultModel":
        """A fault model with no injected misbehavior."""
        return cls(rules=[], **kwargs)


@dataclass
class UcodeTrace:
    executed: list[tuple[int, bool]] = field(default_factory=list)
    rolled_back: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class RunOutcome:
    kind: str  # "uend" | "lockup" | "budget"
    lockup_class: str = LockupClass.NONE

    @property
    def is_uend(self) -> bool:
        return self.kind == "uend"


OUTCOME_UEND = RunOutcome("uend")
OUTCOME_BUDGET = RunOutcome("budget")


# ---------------------------------------------------------------------------
# Physical memory
# ---------------------------------------------------------------------------

class PhysMemory:
    """Byte-addressed physical space: guest RAM plus the counter window.

    Guest-checked (16-bit) accesses enforce the region permissions of the
    virtual CPU: code is execute-only, the middle window is read-write,
    the table window read-only.  System accesses (full physical) bypass
    permissions; unmapped system reads return zero and unmapped writes
    are discarded, so arbitrary injected micro-ops cannot crash the host.
    """

    def __init__(self) -> None:
        self.guest = bytearray(GUEST_MEM_SIZE)
        self.cov = bytearray(COV_SIZE)

    def _route(self, addr: int, size: int) -> tuple[bytearray, int] | None:
        if 0 <= addr and addr + size <= GUEST_MEM_SIZE:
            return self.guest, addr
        if COV_BASE <= addr and addr + size <= COV_BASE + COV_SIZE:
            return self.cov, addr - COV_BASE
        return None

    def read_system(self, addr: int, size: int) -> int:
        loc = self._route(addr, size)
        if loc is None:
            return 0
        buf, off = loc
        return int.from_bytes(buf[off:off + size], "little")

    def write_system(self, addr: int, size: int, value: int) -> int | None:
        """Write and return the previous value, or None if unmapped."""
        loc = self._route(addr, size)
        if loc is None:
            return None
        buf, off = loc
        old = int.from_bytes(buf[off:off + size], "little")
        buf[off:off + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        return old

    def guest_check(self, addr: int, size: int, write: bool) -> str | None:
        end = addr + size
        if write:
            if RW_START <= addr and end <= RW_END:
                return None
            if end <= CODE_END:
                return "write-to-execute-only"
            return "out-of-range"
        if (RW_START <= addr and end <= RW_END) or (RO_START <= addr and end <= RO_END):
            return None
        return "out-of-range"

    def zero_rw(self) -> None:
        self.guest[RW_START:RW_END] = bytes(RW_END - RW_START)

    def clear_cov(self) -> None:
        self.cov = bytearray(COV_SIZE)


# ---------------------------------------------------------------------------
# FNV-1a digests (sparse: byte runs of zero are folded with modular powers)
# ---------------------------------------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes | bytearray) -> int:
    """FNV-1a over a buffer, skipping zero runs via h *= prime**run."""
    h = FNV_OFFSET
    view = bytes(data)
    pos = 0
    n = len(view)
    while pos < n:
        nxt = view.find(b"\x00", pos)
        if nxt == -1:
            nxt = n
        for b in view[pos:nxt]:
            h = ((h ^ b) * FNV_PRIME) & MASK64
        if nxt < n:
            run_end = nxt
            while run_end < n and view[run_end] == 0:
                run_end += 1
            h = (h * pow(FNV_PRIME, run_end - nxt, 1 << 64)) & MASK64
            pos = run_end
        else:
            pos = nxt
    return h


def _stream_value(seed: int, counter: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{counter}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# The engine
# ---------------------------------------------------------------------------

_ALU_SET = {int(Op.ADD_DSZ64), int(Op.SUB_DSZ64), int(Op.XOR_DSZ64), int(Op.ZEROEXT_DSZ64),
            int(Op.ADD_DSZ64_F), int(Op.SUB_DSZ64_F), int(Op.XOR_DSZ64_F), int(Op.ZEROEXT_DSZ64_F)}

MS_ENTRY_COUNTER = "MS_DECODE.MS_ENTRY"


@dataclass
class _Window:
    resume: int
    remaining: int
    journal_mark: int
    trace_mark: int


class Engine:
    """One virtual micro-sequencer; never shared across concurrent runs."""

    def __init__(
        self,
        image: UcodeImage,
        fault: FaultModel | None = None,
        rng_seed: int = 0,
        trial_id: int = 0,
    ) -> None:
        self.image = image
        self.fault = fault if fault is not None else FaultModel.correct()
        self.hooks = HookTable()
        self.state = EngineState()
        self.arch = ArchState.initial()
        self.mem = PhysMemory()
        self.macro = MacroContext()
        self.rng_seed = rng_seed
        self.trial_id = trial_id
        self.budget_weights: dict[int, int] = {}
        self.trace = UcodeTrace()
        self.collect_trace = True
        self._decode_cache: dict[int, tuple[int, int, int, int] | None] = {}
        self._journal: list[tuple] = []
        self._window: _Window | None = None
        self._persist_current = False
        self._pending_patch: dict[int, list[int]] = {}
        self._unstable_counter = 0

    # -- configuration ------------------------------------------------------

    def reset(self) -> None:
        """Restore engine state to power-on defaults; patch RAM survives."""
        self.state = EngineState()
        self.arch = ArchState.initial()
        self.macro = MacroContext()
        self.hooks.clear()
        self.trace = UcodeTrace()
        self._journal = []
        self._window = None
        self._pending_patch = {}
        self._unstable_counter = 0

    def set_trial(self, trial_id: int) -> None:
        self.trial_id = trial_id
        self._unstable_counter = 0

    def _invalidate(self, base: int) -> None:
        for addr in (base, base + 1, base + 2):
            self._decode_cache.pop(addr, None)

    # -- control ports -------------------------------------------------------

    def write_control_port(self, addr: int, value: int) -> None:
        """Reconfigure the engine; the instrumentation/agent side only."""
        if CTRL_HOOK_BASE <= addr < CTRL_HOOK_BASE + HOOK_REGISTERS:
            slot = addr - CTRL_HOOK_BASE
            enabled = bool(value >> 63)
            src = (value >> 32) & 0x7FFF
            dst = value & 0x7FFF
            entry = HookEntry(enabled=enabled, src=src, dst=dst) if value else None
            self.hooks.set_entry(slot, entry)
            return
        if CTRL_PATCH_BASE <= addr < CTRL_PATCH_BASE + 256:
            tnum = addr - CTRL_PATCH_BASE
            words = self._pending_patch.setdefault(tnum, [])
            words.append(value & ((1 << 48) - 1))
            if len(words) == 4:
                base = PATCH_BASE + 4 * tnum
                self.image.store(base, Triad.from_words(tuple(words)))
                self._invalidate(base)
                del self._pending_patch[tnum]
            return
        if 0 <= addr < 0x1000:
            self._crbus_store(addr, value & MASK64, journal=False)
            return
        raise UnknownPort(f"control port 0x{addr:03x}")

    # -- journaled state access ----------------------------------------------

    def _log(self, entry: tuple) -> None:
        if self._window is not None:
            self._journal.append(entry + (self._persist_current,))

    def read_reg(self, idx: int) -> int:
        if idx < 16:
            return self.state.tmp[idx]
        if idx < 24:
            return self.arch.r[idx - 16]
        if idx == REG_ARG_A:
            return self.arch.r[self.macro.a] if self.macro.a is not None else 0
        if idx == REG_ARG_B:
            return self.arch.r[self.macro.b] if self.macro.b is not None else 0
        if idx == REG_M_IMM:
            return self.macro.imm
        if idx == REG_IP_NEXT:
            return self.macro.next_ip
        if idx == REG_ZF:
            return self.arch.zf
        if idx == REG_CF:
            return self.arch.cf
        if idx == REG_IP_CUR:
            return self.macro.cur_ip
        return 0  # zero register and reserved indices

    def write_reg(self, idx: int, value: int) -> None:
        value &= MASK64
        if idx < 16:
            self._log(("tmp", idx, self.state.tmp[idx], value))
            self.state.tmp[idx] = value
            return
        if idx < 24:
            self._log(("r", idx - 16, self.arch.r[idx - 16], value))
            self.arch.r[idx - 16] = value
            return
        if idx in (REG_ARG_A, REG_ARG_B):
            resolved = self.macro.a if idx == REG_ARG_A else self.macro.b
            if resolved is None:
                return
            self._log(("r", resolved, self.arch.r[resolved], value))
            self.arch.r[resolved] = value
            return
        if idx == REG_IP_NEXT:
            self._log(("next_ip", None, self.macro.next_ip, value & 0xFFFF))
            self.macro.next_ip = value & 0xFFFF
            return
        if idx == REG_ZF:
            self._log(("zf", None, self.arch.zf, value & 1))
            self.arch.zf = value & 1
            return
        if idx == REG_CF:
            self._log(("cf", None, self.arch.cf, value & 1))
            self.arch.cf = value & 1
            return
        # m_imm, ip_cur, zero and reserved indices discard writes

    def _set_flags(self, result: int, carry: int) -> None:
        self._log(("zf", None, self.arch.zf, int(result == 0)))
        self.arch.zf = int(result == 0)
        self._log(("cf", None, self.arch.cf, carry & 1))
        self.arch.cf = carry & 1

    def _crbus_store(self, addr: int, value: int, journal: bool = True) -> None:
        old = self.state.crbus.get(addr, 0)
        if journal:
            self._log(("crbus", addr, old, value))
        self.state.crbus[addr] = value
        if addr == PORT_HOOK_ACTIVE:
            new_active = not (value & 1)
            if journal:
                self._log(("hook_active", None, self.state.hook_table_active, new_active))
            self.state.hook_table_active = new_active

    def _crbus_load(self, addr: int) -> int:
        if addr == PORT_RNG:
            value = _stream_value(self.rng_seed, self.state.rng_counter)
            self._log(("rng", None, self.state.rng_counter, self.state.rng_counter + 1))
            self.state.rng_counter += 1
            return value
        if addr == PORT_GDT_BASE:
            return self.state.gdt_base
        return self.state.crbus.get(addr, 0)

    def _staging_store(self, addr: int, value: int) -> None:
        addr &= 0xFFFF
        self._log(("staging", addr, self.state.staging.get(addr, 0), value))
        self.state.staging[addr] = value

    def _seg_store(self, sel: int, fld: int, value: int) -> None:
        key = (sel, fld)
        self._log(("seg", key, self.state.seg_fields.get(key, 0), value))
        self.state.seg_fields[key] = value

    def _mem_write(self, addr: int, size: int, value: int) -> None:
        old = self.mem.write_system(addr, size, value)
        if old is not None:
            self._log(("mem", (addr, size), old, value & ((1 << (8 * size)) - 1)))

    def _perf_bump(self, counter: str) -> None:
        if self._window is not None and not self.fault.perf_counts_speculative:
            return
        # When counting speculatively, increments survive rollback by design.
        self.state.perf[counter] = self.state.perf.get(counter, 0) + 1

    def _exit_request(self, kind: str, detail: int) -> None:
        self._log(("exit", None, self.state.exit_request, (kind, detail)))
        self.state.exit_request = (kind, detail)

    # -- rollback -------------------------------------------------------------

    def _apply(self, entry: tuple, new: bool) -> None:
        kind, key, old_v, new_v, _persist = entry
        value = new_v if new else old_v
        if kind == "tmp":
            self.state.tmp[key] = value
        elif kind == "r":
            self.arch.r[key] = value
        elif kind == "zf":
            self.arch.zf = value
        elif kind == "cf":
            self.arch.cf = value
        elif kind == "next_ip":
            self.macro.next_ip = value
        elif kind == "staging":
            self.state.staging[key] = value
        elif kind == "crbus":
            self.state.crbus[key] = value
        elif kind == "hook_active":
            self.state.hook_table_active = value
        elif kind == "seg":
            self.state.seg_fields[key] = value
        elif kind == "mem":
            addr, size = key
            self.mem.write_system(addr, size, value)
        elif kind == "exit":
            self.state.exit_request = value
        elif kind == "rng":
            self.state.rng_counter = value
        elif kind == "macro":
            (self.macro.a, self.macro.b, self.macro.imm,
             self.macro.next_ip, self.macro.cur_ip) = value
        else:  # pragma: no cover - journal kinds are closed
            raise EngineError(f"unknown journal kind {kind!r}")

    def _rollback_window(self) -> int:
        """Undo the active window; persisted effects are re-applied. Returns
        the micro-address to resume at."""
        window = self._window
        assert window is not None
        tail = self._journal[window.journal_mark:]
        for entry in reversed(tail):
            self._apply(entry, new=False)
        for entry in tail:
            if entry[-1]:
                self._apply(entry, new=True)
        del self._journal[window.journal_mark:]
        if self.collect_trace:
            for addr, spec in self.trace.executed[window.trace_mark:]:
                if spec:
                    self.trace.rolled_back.append(addr)
        self._window = None
        self._persist_current = False
        return window.resume

    # -- fault evaluation ------------------------------------------------------

    def _match_rules(self, opcode: int, src: int, crbus_addr: int | None) -> tuple[bool, str]:
        persists = False
        lockup = LockupClass.NONE
        for rule in self.fault.rules:
            if rule.matches(opcode, src, crbus_addr):
                persists = persists or rule.persists_through_rollback
                if lockup == LockupClass.NONE and rule.lockup != LockupClass.NONE:
                    if rule.lockup == LockupClass.STABLE_TIMEOUT:
                        lockup = LockupClass.STABLE_TIMEOUT
                    else:
                        draw = _stream_value(
                            self.rng_seed ^ 0x5EED, self.trial_id * 1_000_003 + self._unstable_counter
                        )
                        self._unstable_counter += 1
                        if draw / float(1 << 64) < rule.probability:
                            lockup = LockupClass.UNSTABLE
        return persists, lockup

    # -- main interpreter -------------------------------------------------------

    def _fetch(self, addr: int) -> tuple[int, int, int, int] | None:
        cached = self._decode_cache.get(addr, False)
        if cached is not False:
            return cached
        if not (0 <= addr < ADDRESS_SPACE) or addr % 4 == 3:
            self._decode_cache[addr] = None
            return None
        triad = self.image.triad_at(triad_base(addr))
        if triad is None:
            decoded = None
        else:
            word = triad.ops[slot_of(addr)]
            decoded = (word.opcode, word.dst, word.src, word.imm)
        self._decode_cache[addr] = decoded
        return decoded

    def run_from_entry(
        self,
        entry: int,
        budget: int,
        macro_ctx: MacroContext | None = None,
        dispatch_cb=None,
        used: int = 0,
    ) -> tuple[RunOutcome, int]:
        """Execute from ``entry`` until instruction end, lockup or budget.

        Returns the outcome and the weighted micro-op count consumed.
        ``dispatch_cb(next_ip)`` supplies the entry address and operand
        context of the following macro instruction so that mispredicted
        windows can keep speculating across instruction boundaries.
        """
        if not (0 <= entry < ADDRESS_SPACE) or entry % 4 == 3:
            raise InvalidAddress(f"entry 0x{entry:04x}")
        # A lockup can leave a window open; fresh dispatches never inherit it.
        self._window = None
        self._journal.clear()
        self._persist_current = False
        if macro_ctx is not None:
            self.macro = macro_ctx
        pc = entry
        hard_cap = used + max(64 * budget, 4096)
        raw_count = 0

        while True:
            if used > budget or raw_count > hard_cap:
                if self._window is not None:
                    self._rollback_window()
                return OUTCOME_BUDGET, used

            eff = self.hooks.lookup(pc) if self.state.hook_table_active else pc
            decoded = self._fetch(eff)
            if decoded is None:
                if self._window is not None:
                    pc = self._rollback_window()
                    continue
                raise InvalidAddress(f"fetch at 0x{eff:04x} (from 0x{pc:04x})")

            speculating = self._window is not None
            if self.collect_trace:
                self.trace.executed.append((eff, speculating))
            raw_count += 1
            if not speculating:
                # Speculative work is bounded by the window length and rolled
                # back; only retired micro-ops draw down the budget, so
                # instrumented and plain runs exhaust it at the same point.
                used += self.budget_weights.get(eff, 1)

            opcode, dst, src, imm = decoded
            speculative = speculating

            # Fault rules observe speculative execution only.
            crbus_addr = None
            if opcode in _CRBUS_OPS:
                crbus_addr = self._effective_craddr(imm)
            if speculative and self.fault.rules:
                persists, lockup = self._match_rules(opcode, src, crbus_addr)
                self._persist_current = persists
                if lockup != LockupClass.NONE:
                    return RunOutcome("lockup", lockup), used
            else:
                self._persist_current = False

            try:
                jump = self._exec(opcode, dst, src, imm, crbus_addr, pc=eff)
            except _Fault as fault:
                if self._window is not None:
                    pc = self._rollback_window()
                    continue
                self._exit_request("violation:" + fault.kind, 0)
                return OUTCOME_UEND, used

            if self._window is not None and not speculative:
                # The branch just mispredicted; fall through into the window.
                pass
            if self._window is not None and speculative:
                self._window.remaining -= 1
                if self._window.remaining <= 0:
                    pc = self._rollback_window()
                    continue

            if jump is not None:
                pc = jump
                continue

            slot = slot_of(eff)
            if slot < 2:
                pc = eff + 1
                continue

            # Slot 2: the triad's sequence word takes over.
            triad = self.image.triad_at(triad_base(eff))
            assert triad is not None
            seq = triad.seq
            if self._window is not None and seq.sync is not Sync.NONE:
                pc = self._rollback_window()
                continue
            if seq.uend:
                if self._window is None:
                    return OUTCOME_UEND, used
                if self.fault.spec_stops_at_ms_dispatch or dispatch_cb is None:
                    pc = self._rollback_window()
                    continue
                nxt = dispatch_cb(self.macro.next_ip)
                if nxt is None:
                    pc = self._rollback_window()
                    continue
                entry2, ctx2 = nxt
                old = (self.macro.a, self.macro.b, self.macro.imm,
                       self.macro.next_ip, self.macro.cur_ip)
                self._log(("macro", None, old,
                           (ctx2.a, ctx2.b, ctx2.imm, ctx2.next_ip, ctx2.cur_ip)))
                self.macro.a, self.macro.b = ctx2.a, ctx2.b
                self.macro.imm, self.macro.next_ip = ctx2.imm, ctx2.next_ip
                self.macro.cur_ip = ctx2.cur_ip
                self._perf_bump(MS_ENTRY_COUNTER)
                pc = entry2
                continue
            if seq.goto is not None:
                pc = seq.goto
                continue
            pc = triad_base(eff) + 4

    # -- micro-op semantics ------------------------------------------------------

    def _effective_craddr(self, imm: int) -> int:
        addr = imm & 0xFFF
        if imm & CRADDR_MACRO_REL:
            addr = (addr + self.macro.imm) & 0xFFF
        return addr

    def _operand(self, src: int, imm: int) -> int:
        return (self.read_reg(src) + imm) & MASK64

    def _exec(
        self, opcode: int, dst: int, src: int, imm: int, crbus_addr: int | None, pc: int
    ) -> int | None:
        """Execute one micro-op; returns a jump target or None."""
        op = opcode
        if op == Op.NOP or op == Op.NOPB:
            return None
        if op in _ALU_SET:
            base = FLAG_BASE.get(op, op)
            operand = self._operand(src, imm)
            if base == Op.ZEROEXT_DSZ64:
                result, carry = operand, 0
            else:
                acc = self.read_reg(dst)
                if base == Op.ADD_DSZ64:
                    total = acc + operand
                    result, carry = total & MASK64, int(total > MASK64)
                elif base == Op.SUB_DSZ64:
                    result, carry = (acc - operand) & MASK64, int(acc < operand)
                else:  # XOR
                    result, carry = acc ^ operand, 0
            self.write_reg(dst, result)
            if op in FLAG_BASE:
                self._set_flags(result, carry)
            return None
        if op == Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ:
            cond = self.read_reg(src)
            target = imm & (ADDRESS_SPACE - 1)
            if cond == 0:
                return None  # predicted path, no speculation
            if self._window is not None:
                return target  # nested branches resolve directly
            self._window = _Window(
                resume=target,
                remaining=self.fault.spec_window_uops,
                journal_mark=len(self._journal),
                trace_mark=len(self.trace.executed),
            )
            return None
        if op == Op.UJMP:
            return imm & (ADDRESS_SPACE - 1)
        if op == Op.UJMPREG:
            return self.read_reg(src) & (ADDRESS_SPACE - 1)
        if op == Op.SAVEUIP:
            nxt = pc + 1 if slot_of(pc) < 2 else triad_base(pc) + 4
            self.write_reg(dst, nxt)
            return None
        if op == Op.LDPPHYS:
            self.write_reg(dst, self.mem.read_system(self._operand(src, imm), 8))
            return None
        if op == Op.LDPPHYS_DSZ16:
            self.write_reg(dst, self.mem.read_system(self._operand(src, imm), 2))
            return None
        if op == Op.LDPPHYS_ASZ16:
            addr = self._operand(src, imm) & 0xFFFF
            kind = self.mem.guest_check(addr, 8, write=False)
            if kind is not None:
                raise _Fault(kind)
            self.write_reg(dst, self.mem.read_system(addr, 8))
            return None
        if op == Op.STPPHYS:
            self._mem_write(self._operand(dst, imm), 8, self.read_reg(src))
            return None
        if op == Op.STPPHYS_DSZ16:
            self._mem_write(self._operand(dst, imm), 2, self.read_reg(src))
            return None
        if op == Op.STPPHYS_ASZ16:
            addr = self._operand(dst, imm) & 0xFFFF
            kind = self.mem.guest_check(addr, 8, write=True)
            if kind is not None:
                raise _Fault(kind)
            self._mem_write(addr, 8, self.read_reg(src))
            return None
        if op == Op.LDSTGBUF:
            addr = self._operand(src, imm) & 0xFFFF
            self.write_reg(dst, self.state.staging.get(addr, 0))
            return None
        if op == Op.STSTGBUF:
            addr = (self.read_reg(dst) + imm) & 0xFFFF
            self._staging_store(addr, self.read_reg(src))
            return None
        if op == Op.MOVETOCREG_DSZ64:
            value = self.read_reg(src)
            assert crbus_addr is not None
            if crbus_addr == PORT_EXIT_HALT:
                self._exit_request("halt", 0)
            elif crbus_addr == PORT_EXIT_UD:
                self._exit_request("ud", 0)
            elif crbus_addr == PORT_EXIT_IO:
                self._exit_request("io", value & 0xFF)
            self._crbus_store(crbus_addr, value)
            if dst != 0:
                self.write_reg(dst, value)
            return None
        if op == Op.MOVEFROMCREG_DSZ64:
            assert crbus_addr is not None
            self.write_reg(dst, self._crbus_load(crbus_addr))
            return None
        if op in (Op.MOVETOCREG_BTS_DSZ64, Op.MOVETOCREG_BTR_DSZ64, Op.MOVETOCREG_AND_DSZ64):
            assert crbus_addr is not None
            bit = (imm >> 12) & 0x3F
            old = self.state.crbus.get(crbus_addr, 0)
            if op == Op.MOVETOCREG_BTS_DSZ64:
                new = old | (1 << bit)
            elif op == Op.MOVETOCREG_BTR_DSZ64:
                new = old & ~(1 << bit) & MASK64
            else:
                new = old & ((self.read_reg(src) + bit) & MASK64)
            self._crbus_store(crbus_addr, new)
            if dst != 0:
                self.write_reg(dst, old)
            return None
        if op == Op.WRSEGFLD:
            self._seg_store((imm >> 6) & 0x3F, imm & 0x3F, self.read_reg(src))
            return None
        if op == Op.UNK_256:
            self._perf_bump(MS_ENTRY_COUNTER)
            return None
        # Undefined opcode: inert unless a fault rule says otherwise.
        return None


_CRBUS_OPS = {
    int(Op.MOVETOCREG_DSZ64), int(Op.MOVEFROMCREG_DSZ64),
    int(Op.MOVETOCREG_BTS_DSZ64), int(Op.MOVETOCREG_BTR_DSZ64),
    int(Op.MOVETOCREG_AND_DSZ64),
}


# ---------------------------------------------------------------------------
# Snapshots and diffs (used by the speculative-fuzzing detector and tests)
# ---------------------------------------------------------------------------

def snapshot(engine: Engine) -> dict:
    """A deep, comparable snapshot of everything a micro-op can touch."""
    return {
        "tmp": tuple(engine.state.tmp),
        "r": tuple(engine.arch.r),
        "ip": engine.arch.ip,
        "zf": engine.arch.zf,
        "cf": engine.arch.cf,
        "staging": dict(engine.state.staging),
        "crbus": dict(engine.state.crbus),
        "seg": dict(engine.state.seg_fields),
        "perf": dict(engine.state.perf),
        "hook_active": engine.state.hook_table_active,
        "exit": engine.state.exit_request,
        "rng": engine.state.rng_counter,
        "guest_mem": bytes(engine.mem.guest),
        "cov_mem": bytes(engine.mem.cov),
    }


def diff_snapshots(before: dict, after: dict) -> list[tuple[str, object, object, object]]:
    """List (component, key, old, new) for every differing element."""
    out: list[tuple[str, object, object, object]] = []
    for name in ("tmp", "r"):
        for i, (a, b) in enumerate(zip(before[name], after[name])):
            if a != b:
                out.append((name, i, a, b))
    for name in ("ip", "zf", "cf", "hook_active", "exit", "rng"):
        if before[name] != after[name]:
            out.append((name, None, before[name], after[name]))
    for name in ("staging", "crbus", "seg", "perf"):
        keys = set(before[name]) | set(after[name])
        for key in sorted(keys, key=repr):
            a, b = before[name].get(key, 0), after[name].get(key, 0)
            if a != b:
                out.append((name, key, a, b))
    for name in ("guest_mem", "cov_mem"):
        a, b = before[name], after[name]
        if a != b:
            for i, (x, y) in enumerate(zip(a, b)):
                if x != y:
                    out.append((name, i, x, y))
    return out


def restore_snapshot(engine: Engine, snap: dict) -> None:
    """Put the engine back into a previously captured snapshot."""
    engine.state.tmp = list(snap["tmp"])
    engine.arch.r = list(snap["r"])
    engine.arch.ip = snap["ip"]
    engine.arch.zf = snap["zf"]
    engine.arch.cf = snap["cf"]
    engine.state.staging = dict(snap["staging"])
    engine.state.crbus = dict(snap["crbus"])
    engine.state.seg_fields = dict(snap["seg"])
    engine.state.perf = dict(snap["perf"])
    engine.state.hook_table_active = snap["hook_active"]
    engine.state.exit_request = snap["exit"]
    engine.state.rng_counter = snap["rng"]
    engine.mem.guest[:] = snap["guest_mem"]
    engine.mem.cov[:] = snap["cov_mem"]
