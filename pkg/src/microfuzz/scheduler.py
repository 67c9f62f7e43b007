"""Instrumentation-round planning over the microcode control-flow graph.

Sixteen hooks observe thirty-two addresses per round, so measuring the
whole control store for one input would take 992 rounds.  Instead the
initial phase hooks only the 512 instruction entry points (32 rounds),
static analysis extracts basic blocks, measured coverage propagates to
every member of a covered block and through unconditional edges, and
only the conditionally reachable successors of covered blocks are
scheduled for follow-up rounds.

Planning is in source-address terms: hooking the even address ``S``
covers ``S`` and ``S + 1``, so odd block heads are measured through
their even predecessor's pair slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .instrument import MAX_HOOKS, CoverageReport, HookPlan
from .ucode.model import (
    ROM_LIMIT,
    Op,
    UcodeImage,
    count_hookable,
    is_rom,
    slot_of,
    triad_base,
)

TERM_UEND = "Uend"
TERM_GOTO = "StaticGoto"
TERM_COND = "CondBranch"
TERM_REGJUMP = "RegJump"


@dataclass(frozen=True)
class BasicBlock:
    head: int
    members: tuple[int, ...]
    terminator: str
    targets: tuple[int, ...] = ()  # goto: (target,); cond: (taken, fallthrough)

    def __contains__(self, addr: int) -> bool:
        return addr in self.members


@dataclass
class RoundPlan:
    rounds: list[HookPlan] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rounds)


@dataclass
class GlobalCoverage:
    counts: dict[int, int] = field(default_factory=dict)
    provenance: dict[int, str] = field(default_factory=dict)  # measured | propagated

    def addresses(self) -> set[int]:
        return set(self.counts)


# ---------------------------------------------------------------------------
# CFG extraction
# ---------------------------------------------------------------------------

def _address_step(image: UcodeImage, addr: int) -> tuple[str, tuple[int, ...]]:
    """Classify one address: ("seq", (next,)) or a terminator kind."""
    word = image.op_at(addr)
    if word is None:
        return TERM_UEND, ()  # missing microcode: execution cannot proceed
    op = word.opcode
    if op == Op.UJMP:
        return TERM_GOTO, (word.imm & 0x7FFF,)
    if op == Op.UJMPREG:
        return TERM_REGJUMP, ()
    if slot_of(addr) < 2:
        nxt = (addr + 1,)
    else:
        triad = image.triad_at(triad_base(addr))
        assert triad is not None
        seq = triad.seq
        if seq.uend:
            nxt = ()
        elif seq.goto is not None:
            nxt = (seq.goto,)
        else:
            nxt = (triad_base(addr) + 4,)
    if op == Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ:
        taken = word.imm & 0x7FFF
        if nxt:
            return TERM_COND, (taken, nxt[0])
        return TERM_COND, (taken,)
    if not nxt:
        return TERM_UEND, ()
    if slot_of(addr) == 2:
        triad = image.triad_at(triad_base(addr))
        if triad is not None and triad.seq.goto is not None:
            return TERM_GOTO, nxt
    return "seq", nxt


def default_entries(image: UcodeImage) -> list[int]:
    """The aligned instruction entry points present in the image."""
    return [base for base in sorted(image.rom) if base < 0x1000 and base % 8 == 0]


def extract_basic_blocks(image: UcodeImage, entries: list[int] | None = None) -> list[BasicBlock]:
    """Partition the ROM addresses reachable from ``entries`` into blocks."""
    if entries is None:
        entries = default_entries(image)

    # Pass 1: reachability and leader discovery.
    reachable: set[int] = set()
    leaders: set[int] = set(entries)
    work = list(entries)
    while work:
        addr = work.pop()
        if addr in reachable or not is_rom(addr):
            continue
        reachable.add(addr)
        kind, targets = _address_step(image, addr)
        if kind == "seq":
            work.extend(targets)
        else:
            leaders.update(t for t in targets if is_rom(t))
            work.extend(targets)
            if kind == TERM_COND and len(targets) == 2:
                pass  # fallthrough already in targets
    leaders &= reachable

    # Pass 2: grow blocks from leaders.
    blocks: list[BasicBlock] = []
    for head in sorted(leaders):
        members = [head]
        addr = head
        while True:
            kind, targets = _address_step(image, addr)
            if kind != "seq":
                blocks.append(BasicBlock(head, tuple(members), kind, targets))
                break
            nxt = targets[0]
            if nxt in leaders or not is_rom(nxt):
                blocks.append(BasicBlock(head, tuple(members), TERM_GOTO, (nxt,)))
                break
            members.append(nxt)
            addr = nxt
    return blocks


def successors(block: BasicBlock, entry_heads: list[int]) -> set[int]:
    """Phi: conditionally reachable successor heads of a block."""
    if block.terminator == TERM_UEND:
        return set()
    if block.terminator == TERM_GOTO:
        return set(block.targets)
    if block.terminator == TERM_COND:
        return set(block.targets)
    if block.terminator == TERM_REGJUMP:
        return set(entry_heads)  # conservative: any entry point
    raise ValueError(block.terminator)  # pragma: no cover


# ---------------------------------------------------------------------------
# Round planning
# ---------------------------------------------------------------------------

def _pack_sources(addresses: list[int]) -> list[HookPlan]:
    """First-fit packing of addresses into <=16-source rounds (pair-aware)."""
    sources: list[int] = []
    seen: set[int] = set()
    for addr in addresses:
        src = addr if addr % 2 == 0 else addr - 1
        if src not in seen:
            seen.add(src)
            sources.append(src)
    return [
        HookPlan.of(sources[i:i + MAX_HOOKS])
        for i in range(0, len(sources), MAX_HOOKS)
    ]


def plan_initial_rounds(entries: list[int]) -> RoundPlan:
    """One sweep over the instruction entry points, 16 hooks at a time."""
    return RoundPlan(rounds=_pack_sources(list(entries)))


def plan_baseline(image: UcodeImage | None = None) -> RoundPlan:
    """Exhaustive per-address instrumentation of every hookable source.

    Without an image this plans the full control-store address space:
    0x7C00 addresses, 32 covered per round, 992 rounds.
    """
    if image is None:
        sources = list(range(0, ROM_LIMIT, 2))
        assert len(sources) == count_hookable()
    else:
        sources = []
        for base in sorted(image.rom):
            sources.extend((base, base + 2))
    return RoundPlan(rounds=[
        HookPlan.of(sources[i:i + MAX_HOOKS])
        for i in range(0, len(sources), MAX_HOOKS)
    ])


# ---------------------------------------------------------------------------
# Coverage propagation episodes
# ---------------------------------------------------------------------------

class CoverageEpisode:
    """Scheduling state for one testcase: measured counts, propagation
    through the CFG, and Phi-driven follow-up planning."""

    def __init__(self, blocks: list[BasicBlock], entries: list[int]) -> None:
        self.blocks = {b.head: b for b in blocks}
        self.by_member: dict[int, BasicBlock] = {}
        for block in blocks:
            for member in block.members:
                self.by_member[member] = block
        self.entries = list(entries)
        self.coverage = GlobalCoverage()
        self.block_counts: dict[int, int] = {}  # head -> exact execution count
        self.addr_measured: dict[int, int] = {}  # address -> raw counter value
        self.measured: set[int] = set()
        self.planned: set[int] = set()
        # predecessor edge kinds, for exact propagation across goto chains
        self.pred_kinds: dict[int, set[str]] = {}
        self.goto_preds: dict[int, list[int]] = {}
        for block in blocks:
            for succ in block.targets:
                kind = block.terminator
                self.pred_kinds.setdefault(succ, set()).add(kind)
                if kind == TERM_GOTO:
                    self.goto_preds.setdefault(succ, []).append(block.head)
            if block.terminator == TERM_REGJUMP:
                for head in self.entries:
                    self.pred_kinds.setdefault(head, set()).add(TERM_REGJUMP)

    # -- measurement ingestion -------------------------------------------------

    def _refresh_block(self, block: BasicBlock) -> None:
        """Recompute a block's execution count and member coverage.

        The block count comes from its earliest measured member (the one
        closest to the head, which runs once per block entry even when a
        run was truncated mid-block by the budget).  Directly measured
        addresses always keep their own exact counter value; unmeasured
        members inherit the block count.
        """
        measured_members = [m for m in block.members if m in self.addr_measured]
        if measured_members:
            count = self.addr_measured[min(measured_members)]
        else:
            count = self.block_counts.get(block.head)
            if count is None:
                return
        self.block_counts[block.head] = count
        if count <= 0:
            return
        for member in block.members:
            if member in self.addr_measured:
                if self.addr_measured[member] > 0:
                    self.coverage.counts[member] = self.addr_measured[member]
                    self.coverage.provenance[member] = "measured"
            else:
                self.coverage.counts[member] = count
                self.coverage.provenance.setdefault(member, "propagated")

    def _propagate_gotos(self) -> None:
        """Exact counts across unconditional chains: a head whose every
        predecessor edge is a static goto executes as often as the sum of
        its covered predecessors."""
        changed = True
        while changed:
            changed = False
            for head, block in self.blocks.items():
                if head in self.block_counts or head in self.measured:
                    continue
                kinds = self.pred_kinds.get(head, set())
                if head in self.entries or kinds != {TERM_GOTO}:
                    continue
                preds = self.goto_preds.get(head, [])
                if any(p not in self.block_counts for p in preds):
                    continue
                self.block_counts[head] = sum(self.block_counts[p] for p in preds)
                self._refresh_block(self.blocks[head])
                changed = True

    def ingest(self, report: CoverageReport) -> tuple[set[int], list[HookPlan]]:
        """Fold one round's measurements in; returns (newly covered
        addresses, follow-up plans)."""
        before = self.coverage.addresses()
        touched: set[int] = set()
        for addr, count in report.counts.items():
            self.measured.add(addr)
            self.addr_measured[addr] = count
            block = self.by_member.get(addr)
            if block is None:
                if count > 0:
                    self.coverage.counts[addr] = count
                    self.coverage.provenance.setdefault(addr, "measured")
                continue
            touched.add(block.head)
        for head in touched:
            self._refresh_block(self.blocks[head])
        self._propagate_gotos()

        # Phi of every covered block: schedule successor heads whose counts
        # are not already known exactly.
        queue: list[int] = []
        for head, count in sorted(self.block_counts.items()):
            if count <= 0:
                continue
            block = self.blocks[head]
            for succ in sorted(successors(block, self.entries)):
                if succ in self.planned or succ in self.measured or succ in self.block_counts:
                    continue
                self.planned.add(succ)
                queue.append(succ)
        plans = _pack_sources(queue)
        delta = self.coverage.addresses() - before
        return delta, plans


def propagate_and_schedule(
    report: CoverageReport, episode: CoverageEpisode
) -> tuple[set[int], list[HookPlan]]:
    """Functional facade over :meth:`CoverageEpisode.ingest`."""
    return episode.ingest(report)
