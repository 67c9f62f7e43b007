import random

from microfuzz.engine import Engine, MacroContext
from microfuzz.instrument import HookPlan, install_plan, read_coverage, synthesize_hook_patch
from microfuzz.rom import shared_rom
from microfuzz.scheduler import (
    CoverageEpisode,
    TERM_COND,
    TERM_GOTO,
    TERM_REGJUMP,
    TERM_UEND,
    default_entries,
    extract_basic_blocks,
    plan_baseline,
    plan_initial_rounds,
    successors,
)
from microfuzz.ucode.asm import assemble
from microfuzz.ucode.model import Op, MicroOpWord, SequenceWord, Triad, UcodeImage


# ---------------------------------------------------------------------------
# Basic-block extraction
# ---------------------------------------------------------------------------

def test_straight_line_two_triads_one_block():
    src = """
    .org 0x0100
    NOP
    NOP
    NOP
    NOP
    NOP
    NOP SEQW UEND0
    """
    image = assemble(src)
    blocks = extract_basic_blocks(image, entries=[0x100])
    assert len(blocks) == 1
    block = blocks[0]
    assert block.head == 0x100
    assert block.members == (0x100, 0x101, 0x102, 0x104, 0x105, 0x106)
    assert block.terminator == TERM_UEND


def test_conditional_branch_splits_blocks():
    src = """
    .org 0x0100
    NOP
    UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, <taken>)
    NOP SEQW UEND0
    taken:
    NOP SEQW UEND0
    """
    image = assemble(src)
    blocks = extract_basic_blocks(image, entries=[0x100])
    by_head = {b.head: b for b in blocks}
    branch_block = by_head[0x100]
    assert branch_block.terminator == TERM_COND
    phi = successors(branch_block, [0x100])
    assert len(phi) == 2
    assert phi == {0x104, 0x102}  # taken label and the fall-through


def test_partition_every_reachable_address_once():
    image = shared_rom()
    entries = default_entries(image)
    blocks = extract_basic_blocks(image, entries)
    seen: dict[int, int] = {}
    for block in blocks:
        for member in block.members:
            assert member not in seen, f"{member:#x} in two blocks"
            seen[member] = block.head
    # exhaustive reachability walk (oracle): follow all static edges
    from microfuzz.scheduler import _address_step

    reachable = set()
    work = list(entries)
    while work:
        addr = work.pop()
        if addr in reachable or addr >= 0x7C00:
            continue
        reachable.add(addr)
        kind, targets = _address_step(image, addr)
        work.extend(t for t in targets if t < 0x7C00)
    assert reachable == set(seen)


def test_uend_block_has_empty_phi():
    image = assemble(".org 0x0100\nNOP SEQW UEND0")
    blocks = extract_basic_blocks(image, entries=[0x100])
    assert successors(blocks[0], [0x100]) == set()


def test_regjump_phi_is_all_entries():
    src = """
    .org 0x0100
    UJMPREG(tmp3)
    NOP
    NOP SEQW UEND0
    .org 0x0200
    NOP SEQW UEND0
    """
    image = assemble(src)
    blocks = extract_basic_blocks(image, entries=[0x100, 0x200])
    jump_block = next(b for b in blocks if b.head == 0x100)
    assert jump_block.terminator == TERM_REGJUMP
    assert successors(jump_block, [0x100, 0x200]) == {0x100, 0x200}


def test_regjump_conservatism_against_dynamic_trace():
    # dynamic register-jump targets must be contained in Phi
    src = """
    .org 0x0100
    UJMPREG(tmp3)
    NOP
    NOP SEQW UEND0
    .org 0x0200
    NOP SEQW UEND0
    """
    image = assemble(src)
    entries = [0x100, 0x200]
    blocks = extract_basic_blocks(image, entries)
    phi = successors(next(b for b in blocks if b.head == 0x100), entries)
    engine = Engine(image)
    engine.state.tmp[3] = 0x200
    engine.run_from_entry(0x100, 100)
    dynamic_targets = {0x200}
    assert dynamic_targets <= phi


# ---------------------------------------------------------------------------
# Round arithmetic
# ---------------------------------------------------------------------------

def test_initial_rounds_for_512_entries():
    entries = [8 * i for i in range(512)]
    plan = plan_initial_rounds(entries)
    assert len(plan) == 32
    assert all(len(p.hooks) == 16 for p in plan.rounds)


def test_initial_rounds_small_counts():
    assert len(plan_initial_rounds([8 * i for i in range(17)])) == 2
    assert len(plan_initial_rounds([0x100])) == 1


def test_baseline_full_space_is_992_rounds():
    plan = plan_baseline()
    assert len(plan) == 992
    assert len(plan_baseline()) // len(plan_initial_rounds([8 * i for i in range(512)])) == 31


def test_baseline_64_addresses_two_rounds():
    # 16 triads = 32 hookable sources = 64 covered addresses -> 2 rounds
    image = UcodeImage()
    triad = Triad.make([MicroOpWord.make(Op.NOP)], SequenceWord(uend=True))
    for i in range(16):
        image.store(0x100 + 4 * i, triad)
    assert len(plan_baseline(image)) == 2


# ---------------------------------------------------------------------------
# Propagation + scheduling against the exhaustive single-hook oracle
# ---------------------------------------------------------------------------

def _fixture_image(rng: random.Random, n_blocks: int, acyclic: bool = False):
    """Random small CFG: blocks at 16-aligned bases with mixed terminators.

    With ``acyclic`` every edge targets a higher base, so executions
    terminate and per-address counts are exact; otherwise cycles may run
    into the micro-op budget, truncating the final block mid-way.
    """
    bases = [0x100 + 0x10 * i for i in range(n_blocks)]
    image = UcodeImage()
    terminators = []
    for i, base in enumerate(bases):
        forward = [b for b in bases if b > base]
        others = [b for b in bases if b != base] or [base]
        pool = forward if acyclic else others
        kind = rng.choice(["uend", "goto", "cond", "cond", "regjump"])
        if not pool or (acyclic and kind == "regjump"):
            kind = "uend"
        target = rng.choice(pool) if pool else base
        fall_next = rng.choice(pool) if pool else base
        cond_reg = 8 + rng.randrange(4)  # tmp8..tmp11 hold per-testcase bits
        if kind == "uend":
            image.store(base, Triad.make(
                [MicroOpWord.make(Op.NOP)], SequenceWord(uend=True)))
        elif kind == "goto":
            image.store(base, Triad.make(
                [MicroOpWord.make(Op.NOP)], SequenceWord(goto=target)))
        elif kind == "cond":
            image.store(base, Triad.make(
                [MicroOpWord.make(Op.UJMPCC_DIRECT_NOTTAKEN_CONDNZ, 0, cond_reg, target),
                 MicroOpWord.make(Op.NOP)],
                SequenceWord(goto=fall_next)))
        else:  # regjump through tmp12, always set to an entry head
            image.store(base, Triad.make(
                [MicroOpWord.make(Op.UJMPREG, 0, 12)], SequenceWord(uend=True)))
        terminators.append(kind)
    return image, bases, terminators


def _run_fixture(engine: Engine, entries_seq, presets, budget=3000):
    for reg, value in presets.items():
        engine.state.tmp[reg] = value
    for entry in entries_seq:
        engine.run_from_entry(entry, budget, macro_ctx=MacroContext())


def _scheduler_vs_oracle(rng: random.Random, acyclic: bool):
    image, bases, _ = _fixture_image(rng, rng.randrange(4, 10), acyclic=acyclic)
    entries = sorted(rng.sample(bases, rng.randrange(1, 3)))
    presets = {reg: rng.randrange(2) for reg in range(8, 12)}
    presets[12] = entries[0]
    entries_seq = [rng.choice(entries) for _ in range(rng.randrange(1, 4))]

    # Oracle: exhaustive trace of the uninstrumented run.
    oracle_engine = Engine(image.copy())
    oracle_engine.collect_trace = True
    _run_fixture(oracle_engine, entries_seq, presets)
    oracle: dict[int, int] = {}
    for addr, spec in oracle_engine.trace.executed:
        if not spec:
            oracle[addr] = oracle.get(addr, 0) + 1

    # Scheduler loop: initial entry sweep plus Phi-driven follow-ups.
    blocks = extract_basic_blocks(image, entries)
    episode = CoverageEpisode(blocks, entries)
    queue = list(plan_initial_rounds(entries).rounds)
    rounds = 0
    measure_engine = Engine(image.copy())
    while queue:
        plan = queue.pop(0)
        rounds += 1
        assert rounds < 200, "scheduler did not converge"
        measure_engine.reset()
        patch = synthesize_hook_patch(plan, measure_engine.image)
        install_plan(measure_engine, patch)
        _run_fixture(measure_engine, entries_seq, presets)
        report = read_coverage(measure_engine, plan)
        _, more = episode.ingest(report)
        queue.extend(more)

    context = f"bases={list(map(hex, bases))} entries={list(map(hex, entries))}"
    assert episode.coverage.addresses() == set(oracle), context
    return episode, oracle


def test_propagation_matches_bruteforce_on_terminating_fixtures():
    # Acyclic fixtures terminate, so both the address set and every count
    # must match the exhaustive trace oracle exactly.
    rng = random.Random(0xCF6)
    for _ in range(25):
        episode, oracle = _scheduler_vs_oracle(rng, acyclic=True)
        for addr, count in episode.coverage.counts.items():
            assert count == oracle[addr], (
                f"addr {addr:#x}: scheduler {count}, oracle {oracle[addr]}"
            )


def test_coverage_set_matches_bruteforce_on_cyclic_fixtures():
    # Cyclic fixtures hit the micro-op budget and are truncated mid-block;
    # the covered-address set still matches the oracle exactly.
    rng = random.Random(0xCF7)
    for _ in range(20):
        _scheduler_vs_oracle(rng, acyclic=False)


def test_zero_coverage_block_schedules_nothing():
    src = """
    .org 0x0100
    NOP
    NOP
    NOP SEQW UEND0
    .org 0x0200
    UJMPCC_DIRECT_NOTTAKEN_CONDNZ(tmp0, 0x0100)
    NOP
    NOP SEQW UEND0
    """
    image = assemble(src)
    blocks = extract_basic_blocks(image, entries=[0x100, 0x200])
    episode = CoverageEpisode(blocks, [0x100, 0x200])
    from microfuzz.instrument import CoverageReport

    report = CoverageReport(counts={0x200: 0, 0x201: 0, 0x100: 1, 0x101: 1})
    _, plans = episode.ingest(report)
    # 0x200 was never executed: its successors must not be scheduled
    planned = {src for plan in plans for _, src in plan.hooks}
    assert 0x200 not in {t for p in plans for t in p.addresses()}
    assert all(0x202 != s for s in planned)


def test_member_counts_propagate_from_head():
    src = """
    .org 0x0100
    NOP
    NOP
    NOP
    NOP
    NOP
    NOP SEQW UEND0
    """
    image = assemble(src)
    blocks = extract_basic_blocks(image, entries=[0x100])
    episode = CoverageEpisode(blocks, [0x100])
    from microfuzz.instrument import CoverageReport

    episode.ingest(CoverageReport(counts={0x100: 3, 0x101: 3}))
    for member in blocks[0].members:
        assert episode.coverage.counts[member] == 3
    assert episode.coverage.provenance[0x100] == "measured"
    assert episode.coverage.provenance[0x104] == "propagated"


def test_monotonic_coverage_growth():
    image = shared_rom()
    entries = default_entries(image)
    blocks = extract_basic_blocks(image, entries)
    episode = CoverageEpisode(blocks, entries)
    from microfuzz.instrument import CoverageReport

    seen: set[int] = set()
    episode.ingest(CoverageReport(counts={0x088: 2, 0x089: 2}))
    seen_after_first = set(episode.coverage.addresses())
    assert seen <= seen_after_first
    episode.ingest(CoverageReport(counts={0x090: 1, 0x091: 1}))
    assert seen_after_first <= episode.coverage.addresses()
