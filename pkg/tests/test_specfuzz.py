import pytest

from microfuzz.engine import (
    Engine,
    FaultModel,
    FaultRule,
    LockupClass,
    PORT_HOOK_ACTIVE,
    snapshot,
)
from microfuzz.rom import shared_rom
from microfuzz.specfuzz import (
    CATALOG_SOURCE,
    PayloadTooLarge,
    build_template,
    catalog_fault_model,
    catalog_to_text,
    generate_catalog,
    load_bundled_catalog,
    parse_catalog,
    rules_from_catalog,
    run_spec_trial,
    sweep_catalog,
)
from microfuzz.ucode.model import MicroOpWord, Op, Sync


def fresh_engine(fault=None) -> Engine:
    return Engine(shared_rom().copy(), fault=fault, rng_seed=99)


def test_template_shape():
    triads = build_template([])
    assert len(triads) == 5
    branch = triads[1][1].ops[1]
    assert branch.opcode == Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ
    landing_base, landing = triads[-1]
    assert branch.imm == landing_base
    assert landing.ops[0].opcode == Op.UNK_256
    assert landing.seq.uend and landing.seq.sync is Sync.LFNCEWAIT
    window_fence = triads[3][1]
    assert window_fence.seq.sync is Sync.SYNCFULL


def test_template_rejects_large_payload():
    with pytest.raises(PayloadTooLarge):
        build_template([MicroOpWord.make(Op.NOP)] * 5)


def test_empty_payload_runs_to_uend():
    engine = fresh_engine()
    result = run_spec_trial(engine, [], trials=4)
    assert result.lockup == LockupClass.NONE
    assert result.persisted == []


def test_nop_candidate_no_effects():
    engine = fresh_engine()
    result = run_spec_trial(engine, MicroOpWord.make(Op.NOP), trials=8)
    assert result.lockup == LockupClass.NONE
    assert result.persisted == []
    assert result.lockup_rate == 0.0


def test_window_register_write_rolls_back():
    # the template's own r0 := 0xdead lives in the window; after any trial
    # the engine must sit exactly at its pre-trial state
    engine = fresh_engine()
    before = snapshot(engine)
    run_spec_trial(engine, MicroOpWord.make(Op.NOP), trials=4)
    assert snapshot(engine) == before


def test_hook_table_persistence_detected():
    fault = FaultModel(rules=[
        FaultRule(opcode=int(Op.MOVETOCREG_DSZ64), crbus=PORT_HOOK_ACTIVE,
                  persists_through_rollback=True),
    ])
    engine = fresh_engine(fault)
    engine.arch.r[0] = 1  # the written value: deactivate the hook table
    candidate = MicroOpWord.make(Op.MOVETOCREG_DSZ64, 0, 16, PORT_HOOK_ACTIVE)
    result = run_spec_trial(engine, candidate, trials=8)
    assert result.lockup == LockupClass.NONE
    components = {(c, k) for c, k, _, _ in result.persisted}
    assert ("hook_active", None) in components
    assert ("crbus", PORT_HOOK_ACTIVE) in components


def test_segment_write_persistence_detected():
    fault = FaultModel(rules=[
        FaultRule(opcode=int(Op.WRSEGFLD), persists_through_rollback=True),
    ])
    engine = fresh_engine(fault)
    engine.state.tmp[7] = 0x4242
    candidate = MicroOpWord.make(Op.WRSEGFLD, 0, 7, 0)  # (GDT, BASE)
    result = run_spec_trial(engine, candidate, trials=8)
    effects = {(c, k): (old, new) for c, k, old, new in result.persisted}
    assert effects[("seg", (0, 0))] == (0x8000, 0x4242)


def test_stable_lockup_classification():
    fault = FaultModel(rules=[
        FaultRule(opcode=int(Op.MOVETOCREG_DSZ64), crbus=0x701,
                  lockup=LockupClass.STABLE_TIMEOUT),
    ])
    engine = fresh_engine(fault)
    candidate = MicroOpWord.make(Op.MOVETOCREG_DSZ64, 0, 2, 0x701)
    result = run_spec_trial(engine, candidate, trials=16)
    assert result.lockup == LockupClass.STABLE_TIMEOUT
    assert result.lockup_rate == 1.0


def test_unstable_lockup_classification():
    fault = FaultModel(rules=[
        FaultRule(opcode=int(Op.MOVETOCREG_DSZ64), crbus=0x701,
                  lockup=LockupClass.UNSTABLE, probability=0.5),
    ])
    engine = fresh_engine(fault)
    candidate = MicroOpWord.make(Op.MOVETOCREG_DSZ64, 0, 2, 0x701)
    result = run_spec_trial(engine, candidate, trials=16)
    assert result.lockup == LockupClass.UNSTABLE
    assert 0.0 < result.lockup_rate < 1.0


def test_perf_counter_channel():
    # with speculative performance counting on, an injected sequencer-count
    # micro-op changes exactly one counter and nothing else
    fault = FaultModel(perf_counts_speculative=True)
    engine = fresh_engine(fault)
    result = run_spec_trial(engine, MicroOpWord.make(Op.UNK_256), trials=4)
    assert result.lockup == LockupClass.NONE
    assert len(result.persisted) == 1
    component, key, old, new = result.persisted[0]
    assert (component, key) == ("perf", "MS_DECODE.MS_ENTRY")
    assert new == old + 1


def test_detector_soundness_all_defined_uops():
    # correct mode: no defined micro-op leaves persistent effects or locks
    engine = fresh_engine(FaultModel.correct())
    candidates = []
    for op in Op:
        if op in (Op.UJMP, Op.UJMPREG, Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ):
            imm = 0x7E14  # harmless in-template target
            candidates.append(MicroOpWord.make(op, 0, 30, imm))
        elif op == Op.SAVEUIP:
            candidates.append(MicroOpWord.make(op, 3, 30, 0))
        else:
            candidates.append(MicroOpWord.make(op, 3, 4, 0x100))
    results = sweep_catalog(engine, candidates, trials=4)
    for cand, result in zip(candidates, results):
        assert result.lockup == LockupClass.NONE, hex(cand.raw)
        assert result.persisted == [], (hex(cand.raw), result.persisted)


def test_sweep_determinism():
    rows = load_bundled_catalog()[:6]
    fault = catalog_fault_model(rows)

    def run():
        engine = fresh_engine(fault)
        return [(r.lockup, r.lockup_rate)
                for r in sweep_catalog(engine, [row.word for row in rows], trials=8)]

    assert run() == run()


def test_bundled_catalog_matches_source():
    assert catalog_to_text(generate_catalog()) == catalog_to_text(load_bundled_catalog())
    assert len(load_bundled_catalog()) == len(CATALOG_SOURCE)


def test_catalog_rules_cover_every_row():
    rows = load_bundled_catalog()
    rules = rules_from_catalog(rows)
    for row in rows:
        crbus = row.word.imm & 0xFFF if row.word.opcode in (
            0x004, 0x096, 0x0A6, 0x082) else None
        matching = [r for r in rules
                    if r.matches(row.word.opcode, row.word.src, crbus)]
        assert matching, row.disasm
        assert matching[0].lockup == row.lockup, row.disasm


def test_parse_catalog_rejects_bad_lines():
    with pytest.raises(ValueError):
        parse_catalog("0x0;bogus\n")
    with pytest.raises(ValueError):
        parse_catalog("0x0;Sometimes;NOP\n")
