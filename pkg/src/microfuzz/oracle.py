"""Differential comparison of a testcase against its serialized twin.

A pair (P, Q) that ran to completion is compared on general-purpose
registers, flags, the final instruction pointer pulled back through the
relocation map, and a digest of the read-write window with the
layout-dependent return-address slots masked.  Divergence triggers a
lock-step instruction-by-instruction replay of both programs to find the
first differing post-instruction state.

Pairs are skipped — never reported — when either side timed out (the
budget is layout-sensitive) or when Q's control flow left the mapped
space (a dynamically computed target landed off the twin layout, which
the static rewriter cannot anticipate).
"""

from __future__ import annotations

from dataclasses import dataclass

from .serializer import CODE_CAPACITY, SerializedProgram, map_post_ip
from .vm import ExitKind, RunResult

# Finding kinds
ARCH_DIVERGENCE = "ArchDivergence"
SPEC_PERSISTENCE = "SpecPersistence"
LOCKUP = "Lockup"
PROTOCOL_FAULT = "ProtocolFault"


class TraceAlignmentLost(Exception):
    """Q's control flow left the relocation map."""


@dataclass(frozen=True)
class ComparisonState:
    regs: tuple[int, ...]
    zf: int
    cf: int
    ip: tuple[str, int] | None  # ("mapped"|"raw", value); None = unmappable
    exit: tuple[str, int]
    rw_digest: int

    def matches(self, other: "ComparisonState") -> bool:
        return self == other


def _final_ip(ip: int, program: SerializedProgram | None) -> tuple[str, int] | None:
    if program is None:
        return ("raw", ip) if ip >= CODE_CAPACITY else ("mapped", ip)
    if ip >= CODE_CAPACITY:
        return ("raw", ip)
    mapped = map_post_ip(program, ip)
    if mapped is None:
        return None
    return ("mapped", mapped)


def comparison_state(result: RunResult, program: SerializedProgram | None) -> ComparisonState:
    """Derive the comparison set; ``program`` is the twin's map (None for P)."""
    return ComparisonState(
        regs=tuple(result.arch.r),
        zf=result.arch.zf,
        cf=result.arch.cf,
        ip=_final_ip(result.arch.ip, program),
        exit=(result.exit.kind, result.exit.detail),
        rw_digest=result.cmp_digest,
    )


@dataclass(frozen=True)
class PairVerdict:
    status: str  # "equal" | "divergent" | "skipped" | "lockup"
    reason: str = ""


def evaluate_pair(p: RunResult, q: RunResult, program: SerializedProgram) -> PairVerdict:
    """Early bug evaluation of one (P, Q) execution pair."""
    if p.exit.kind == ExitKind.TIMEOUT or q.exit.kind == ExitKind.TIMEOUT:
        return PairVerdict("skipped", "timeout budget is layout-sensitive")
    if p.exit.kind == ExitKind.ENGINE_LOCKUP or q.exit.kind == ExitKind.ENGINE_LOCKUP:
        side = "P" if p.exit.kind == ExitKind.ENGINE_LOCKUP else "Q"
        return PairVerdict("lockup", f"{side} locked up: {p.exit if side == 'P' else q.exit}")
    ps = comparison_state(p, None)
    qs = comparison_state(q, program)
    if qs.ip is None:
        return PairVerdict("skipped", "twin control flow left mapped space")
    if ps == qs:
        return PairVerdict("equal")
    return PairVerdict("divergent", _describe_divergence(ps, qs))


def _describe_divergence(ps: ComparisonState, qs: ComparisonState) -> str:
    parts = []
    for i, (a, b) in enumerate(zip(ps.regs, qs.regs)):
        if a != b:
            parts.append(f"r{i}: {a:#x} != {b:#x}")
    if ps.zf != qs.zf:
        parts.append(f"zf: {ps.zf} != {qs.zf}")
    if ps.cf != qs.cf:
        parts.append(f"cf: {ps.cf} != {qs.cf}")
    if ps.ip != qs.ip:
        parts.append(f"ip: {ps.ip} != {qs.ip}")
    if ps.exit != qs.exit:
        parts.append(f"exit: {ps.exit} != {qs.exit}")
    if ps.rw_digest != qs.rw_digest:
        parts.append("read-write digest differs")
    return "; ".join(parts)


def _snapshot_key(arch) -> tuple:
    return (tuple(arch.r), arch.zf, arch.cf)


def trace_divergence(
    p_trace: list[tuple[int, object]],
    q_trace: list[tuple[int, object]],
    p_code: bytes,
    program: SerializedProgram,
) -> int:
    """First instruction index whose post-states differ, via lock-step walk.

    Q's trace includes fences and hop islands; only snapshots at mapped
    twins participate.  Raises :class:`TraceAlignmentLost` if the twin
    sequence stops matching P's instruction sequence.
    """
    from . import isa

    # P side: (orig offset, post state) per retired instruction.
    p_steps: list[tuple[int, tuple]] = []
    ip = 0
    for idx, arch in p_trace:
        p_steps.append((ip, _snapshot_key(arch)))
        ip = arch.ip

    # Q side: fold unmapped retirements (fences, joins, hops) into the
    # following mapped twin; keep the state *after* each twin.
    q_steps: list[tuple[int, tuple]] = []
    ip = 0
    for idx, arch in q_trace:
        hit = program._inverse.get(ip)
        if hit is not None:
            q_steps.append((hit[1], _snapshot_key(arch)))
        ip = arch.ip

    for i, (p_off, p_state) in enumerate(p_steps):
        if i >= len(q_steps):
            raise TraceAlignmentLost(f"twin trace ends after {len(q_steps)} instructions")
        q_off, q_state = q_steps[i]
        if q_off != p_off:
            raise TraceAlignmentLost(
                f"instruction {i}: twin executed {q_off:#x}, original {p_off:#x}")
        if p_state != q_state:
            return i
    if len(q_steps) > len(p_steps):
        return len(p_steps)
    raise TraceAlignmentLost("traces are identical; nothing to localize")
