"""Speculative-window fuzzing of individual micro-ops.

A reusable patch-RAM template forces a misprediction of the statically
predicted-not-taken branch and places candidate micro-ops inside the
resulting speculative window, fenced off at both ends.  Comparing the
engine state after the run against a baseline run with an empty window
isolates exactly the effects the candidate persisted through rollback;
repeated trials classify lockup behavior as reliable or probabilistic.

The bundled catalog file lists control-register writes whose speculative
execution wedges the pipeline (one per line, ``<hex word>;<class>;
<disassembly>``); loading it yields both the candidate list and the
fault rules that reproduce each row's behavior in the engine.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

from .engine import (
    Engine,
    FaultModel,
    FaultRule,
    LockupClass,
    diff_snapshots,
    restore_snapshot,
    snapshot,
)
from .instrument import InstrumentationError
from .ucode.asm import assemble, format_uop
from .ucode.model import (
    MicroOpWord,
    Op,
    SequenceWord,
    Sync,
    Triad,
    UcodeImage,
)

TEMPLATE_BASE = 0x7E00
_LANDING = 0x7E14
WINDOW_SLOTS = 4

DEFAULT_TRIALS = 16

_CRBUS_WRITE_OPS = {
    int(Op.MOVETOCREG_DSZ64), int(Op.MOVETOCREG_BTS_DSZ64),
    int(Op.MOVETOCREG_BTR_DSZ64), int(Op.MOVETOCREG_AND_DSZ64),
}


class PayloadTooLarge(InstrumentationError):
    pass


@dataclass
class SpecResult:
    injected: tuple[int, ...]
    pre_digest: str
    post_digest: str
    persisted: list[tuple[str, object, object, object]]
    lockup: str
    lockup_rate: float
    trials: int

    @property
    def locked(self) -> bool:
        return self.lockup != LockupClass.NONE


def _u(op: Op, dst: int = 0, src: int = 30, imm: int = 0) -> MicroOpWord:
    return MicroOpWord.make(op, dst, src, imm)


NOP = _u(Op.NOP)


def build_template(payload: list[MicroOpWord]) -> list[tuple[int, Triad]]:
    """The forced-misprediction window with ``payload`` inlined.

    Layout: a prologue computes a nonzero condition (a flat-memory load
    subtracted from its own address), the predicted-not-taken branch
    targets the fenced landing pad, and the fall-through window holds
    the payload, a guest-register write that must never commit, and a
    full synchronization fence that bounds the window.
    """
    if len(payload) > WINDOW_SLOTS:
        raise PayloadTooLarge(f"window holds {WINDOW_SLOTS} micro-ops, got {len(payload)}")
    win = list(payload) + [NOP] * (WINDOW_SLOTS - len(payload))
    base = TEMPLATE_BASE
    return [
        (base, Triad.make([
            _u(Op.ZEROEXT_DSZ64, dst=2, imm=0xABAB),
            _u(Op.ZEROEXT_DSZ64, dst=0, imm=0x1000),
            _u(Op.LDPPHYS, dst=1, src=0),
        ])),
        (base + 4, Triad.make([
            _u(Op.SUB_DSZ64, dst=0, src=1),
            _u(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, src=0, imm=_LANDING),
            win[0],
        ])),
        (base + 8, Triad.make([win[1], win[2], win[3]])),
        (base + 12, Triad.make([
            _u(Op.ZEROEXT_DSZ64, dst=16, imm=0xDEAD),  # r0-analog, rolled back
            _u(Op.NOPB),
            NOP,
        ], SequenceWord(sync=Sync.SYNCFULL))),
        (_LANDING, Triad.make([
            _u(Op.UNK_256),
        ], SequenceWord(uend=True, sync=Sync.LFNCEWAIT))),
    ]


def _install(engine: Engine, triads: list[tuple[int, Triad]]) -> None:
    for addr, triad in triads:
        engine.image.store(addr, triad)
        engine._invalidate(addr)


def _digest(snap: dict) -> str:
    blob = repr(sorted((k, repr(v)) for k, v in snap.items())).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def run_spec_trial(
    engine: Engine,
    candidate: MicroOpWord | list[MicroOpWord],
    fault: FaultModel | None = None,
    trials: int = DEFAULT_TRIALS,
    trial_base: int = 0,
) -> SpecResult:
    """Inject ``candidate`` into the speculative window ``trials`` times.

    The engine is restored to its entry state between trials and left
    there afterwards; reliable lockups fire in every trial, unreliable
    ones in some, and persisted effects are whatever differs from a
    baseline run whose window holds only NOPs.
    """
    payload = [candidate] if isinstance(candidate, MicroOpWord) else list(candidate)
    if fault is not None:
        engine.fault = fault
    pre = snapshot(engine)

    _install(engine, build_template([]))
    outcome, _ = engine.run_from_entry(TEMPLATE_BASE, 10_000)
    assert outcome.is_uend, "baseline template must run to completion"
    post_baseline = snapshot(engine)

    _install(engine, build_template(payload))
    locked = 0
    post_payload: dict | None = None
    for trial in range(trials):
        restore_snapshot(engine, pre)
        engine.set_trial(trial_base + trial)
        outcome, _ = engine.run_from_entry(TEMPLATE_BASE, 10_000)
        if outcome.kind == "lockup":
            locked += 1
        elif post_payload is None:
            post_payload = snapshot(engine)
    restore_snapshot(engine, pre)

    if locked == trials:
        lockup = LockupClass.STABLE_TIMEOUT
    elif locked > 0:
        lockup = LockupClass.UNSTABLE
    else:
        lockup = LockupClass.NONE
    persisted = []
    post_digest = ""
    if post_payload is not None:
        persisted = [
            effect for effect in diff_snapshots(post_baseline, post_payload)
            # the template's own footprint cancels out; anything left is
            # payload-caused persistence
        ]
        post_digest = _digest(post_payload)
    return SpecResult(
        injected=tuple(w.raw for w in payload),
        pre_digest=_digest(post_baseline),
        post_digest=post_digest,
        persisted=persisted,
        lockup=lockup,
        lockup_rate=locked / trials if trials else 0.0,
        trials=trials,
    )


def sweep_catalog(
    engine: Engine,
    candidates: list[MicroOpWord],
    fault: FaultModel | None = None,
    trials: int = DEFAULT_TRIALS,
) -> list[SpecResult]:
    """One trial batch per candidate, deterministic under the engine seed."""
    results = []
    for index, candidate in enumerate(candidates):
        results.append(run_spec_trial(
            engine, candidate, fault=fault, trials=trials,
            trial_base=index * 1000))
    return results


def render_results(results: list[SpecResult]) -> str:
    lines = ["instruction;type;disassembly"]
    for result in results:
        word = MicroOpWord(result.injected[0]) if result.injected else NOP
        lines.append(f"0x{word.raw:012x};{result.lockup};{format_uop(word)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Bundled lockup catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogRow:
    word: MicroOpWord
    lockup: str
    disasm: str


# Control-register writes with persistent speculative side effects,
# expressed in this engine's encoding.  Each row carries the observed
# lockup class: reliable (StableTimeout) or probabilistic (Unstable).
CATALOG_SOURCE: list[tuple[str, str]] = [
    ("StableTimeout", "tmp7 := LDSTGBUF_DSZ64_ASZ16_SC1(tmp3)"),
    ("Unstable", "tmp1 := LDSTGBUF_DSZ64_ASZ16_SC1(tmp10) !m2"),
    ("StableTimeout", "tmp2 := MOVETOCREG_AND_DSZ64(tmp2, 0x00000003, 0x7c6) !m0"),
    ("Unstable", "MOVETOCREG_BTR_DSZ64(tmp0, 0x0000000e, 0x701) !m0"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmp11, 0x0000000e, 0x701) !m0"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmp13, 0x0000000e, 0x701) !m0"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmp0, 0x0000000e, 0x01c) !m0"),
    ("Unstable", "MOVETOCREG_BTR_DSZ64(tmp0, 0x00000009, 0x48c)"),
    ("Unstable", "MOVETOCREG_BTR_DSZ64(tmp1, 0x00000004, 0x6c3)"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmpv0, 0x0000000c, 0x6c3)"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmp10, 0x00000010, 0x7fe)"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmp5, 0x0000000a, 0x7fe) !m0"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmp0, 0x00000012, 0x2cd) !m0,m1"),
    ("StableTimeout", "MOVETOCREG_BTR_DSZ64(tmp2, 0x00000012, 0x2cd) !m0,m1"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64(tmp2, 0x00000019, 0x701)"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64(tmp15, 0x0000000e, 0x701) !m0"),
    ("Unstable", "MOVETOCREG_BTS_DSZ64(tmp0, 0x00000015, 0x104)"),
    ("Unstable", "MOVETOCREG_BTS_DSZ64(tmp0, 0x105)"),
    ("StableTimeout", "tmp4 := MOVETOCREG_BTS_DSZ64(tmp4, 0x0000003f, 0x51c) !m0"),
    ("Unstable", "tmp1 := MOVETOCREG_BTS_DSZ64(tmp1, 0x0000001c, 0x63b)"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64(tmp3, 0x069)"),
    ("Unstable", "MOVETOCREG_BTS_DSZ64(tmp0, 0x0000000b, 0x575) !m0"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64(tmp3, 0x00000004, 0x6c3)"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64( , 0x7e1)"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64(tmp13, 0x00000010, 0x7fe)"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64(tmp7, 0x00000008, 0x38f) !m1"),
    ("StableTimeout", "MOVETOCREG_BTS_DSZ64( , 0x00000010, 0x3c1) !m1"),
    ("Unstable", "MOVETOCREG_BTS_DSZ64(tmp1, 0x00000005, 0x2c2) !m1"),
    ("Unstable", "MOVETOCREG_BTS_DSZ64(tmp0, 0x00000013, 0x2cd) !m0,m1"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp2, 0x701)"),
    ("Unstable", "tmp0 := MOVETOCREG_DSZ64(tmp0, 0x701)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp15, 0x004)"),
    ("StableTimeout", "MOVETOCREG_DSZ64( , 0x00000000, 0x01a)"),
    ("Unstable", "MOVETOCREG_DSZ64(tmpv0, 0x01c)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp8, 0x01d)"),
    ("StableTimeout", "MOVETOCREG_DSZ64( , 0x00000000, 0x529)"),
    ("Unstable", "MOVETOCREG_DSZ64(tmp5, 0x529)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp7, 0x529)"),
    ("Unstable", "MOVETOCREG_DSZ64(tmp8, 0x529)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp11, 0x529)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp0, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp1, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp4, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp5, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp6, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp8, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp9, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp10, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp11, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp14, 0x067)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp0, 0x070)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp2, 0x070)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp0, 0x577)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp0, 0x78e)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp1, 0x78e)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp2, 0x78e)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp4, 0x78e)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp9, 0x78e)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp10, 0x78e)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp11, 0x78e)"),
    ("StableTimeout", "MOVETOCREG_DSZ64(tmp3, 0x79e)"),
]


def _assemble_single(text: str) -> MicroOpWord:
    image = assemble(text)
    triad = image.triad_at(0)
    assert triad is not None
    return triad.ops[0]


def generate_catalog() -> list[CatalogRow]:
    rows = []
    for lockup, text in CATALOG_SOURCE:
        word = _assemble_single(text)
        rows.append(CatalogRow(word=word, lockup=lockup, disasm=format_uop(word)))
    return rows


def catalog_to_text(rows: list[CatalogRow]) -> str:
    return "".join(f"0x{row.word.raw:012x};{row.lockup};{row.disasm}\n" for row in rows)


def parse_catalog(text: str) -> list[CatalogRow]:
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(";", 2)
        if len(parts) != 3:
            raise ValueError(f"catalog line {line_no}: expected 3 fields")
        word = MicroOpWord(int(parts[0], 16))
        if parts[1] not in (LockupClass.STABLE_TIMEOUT, LockupClass.UNSTABLE):
            raise ValueError(f"catalog line {line_no}: unknown class {parts[1]!r}")
        rows.append(CatalogRow(word=word, lockup=parts[1], disasm=parts[2]))
    return rows


def load_bundled_catalog() -> list[CatalogRow]:
    text = resources.files("microfuzz.data").joinpath("lockup_catalog.txt").read_text()
    return parse_catalog(text)


def _effective_craddr(word: MicroOpWord) -> int | None:
    if word.opcode in _CRBUS_WRITE_OPS:
        return word.imm & 0xFFF
    return None


def rules_from_catalog(rows: list[CatalogRow], probability: float = 0.5) -> list[FaultRule]:
    """Fault rules reproducing each row's lockup class in the engine."""
    rules = []
    seen = set()
    for row in rows:
        key = (row.word.opcode, row.word.src, _effective_craddr(row.word))
        if key in seen:
            continue
        seen.add(key)
        rules.append(FaultRule(
            opcode=row.word.opcode,
            src=row.word.src,
            crbus=_effective_craddr(row.word),
            lockup=row.lockup,
            probability=probability,
        ))
    return rules


def catalog_fault_model(rows: list[CatalogRow] | None = None, **kwargs) -> FaultModel:
    if rows is None:
        rows = load_bundled_catalog()
    return FaultModel(rules=rules_from_catalog(rows), **kwargs)
