import random
from fractions import Fraction

import pytest

from microfuzz import isa
from microfuzz.corpus import (
    MODE_GENETIC,
    MODE_HAVOC,
    Mutator,
    MutatorConfig,
    Seed,
    count_bucket,
    fitness,
    gen_random_corpus,
    gen_valid_corpus,
    select_top_k,
)
from microfuzz.isa import decode_instruction


def test_random_corpus_shape_and_determinism():
    a = gen_random_corpus(5, 32, seed=9)
    b = gen_random_corpus(5, 32, seed=9)
    c = gen_random_corpus(5, 32, seed=10)
    assert len(a) == 5 and all(len(s.data) == 32 for s in a)
    assert [s.data for s in a] == [s.data for s in b]
    assert [s.data for s in a] != [s.data for s in c]
    assert gen_random_corpus(0, 32, seed=1) == []


def test_random_corpus_byte_distribution():
    # chi-squared sanity over a million bytes: 256 bins, expect ~3906 each.
    blob = b"".join(s.data for s in gen_random_corpus(4000, 250, seed=3))
    counts = [0] * 256
    for b in blob:
        counts[b] += 1
    expected = len(blob) / 256
    chi2 = sum((c - expected) ** 2 / expected for c in counts)
    # 255 degrees of freedom: mean 255, std ~22.6; allow a wide band.
    assert 150 < chi2 < 400


def test_valid_corpus_decodes_cleanly():
    for seed in gen_valid_corpus(50, 48, seed=5):
        off = 0
        while off < len(seed.data):
            insn, length = decode_instruction(seed.data, off, limit=len(seed.data) + 8)
            assert not insn.is_ud, f"UD at {off} in {seed.data.hex()}"
            off += length
        assert off == len(seed.data)


def test_valid_corpus_single_byte():
    seeds = gen_valid_corpus(1, 1, seed=4)
    assert len(seeds) == 1
    assert len(seeds[0].data) <= 1


def test_valid_corpus_pool_covers_all_opcodes():
    seen = set()
    for seed in gen_valid_corpus(400, 64, seed=8):
        off = 0
        while off < len(seed.data):
            insn, length = decode_instruction(seed.data, off, limit=len(seed.data) + 8)
            seen.add(insn.index)
            off += length
    assert seen >= set(isa.FORMATS)


def test_fitness_formula():
    assert fitness(10, 1, 2, 64) == 42
    assert fitness(0, 5, 5, 64) == 64
    assert fitness(3, 0, 7, 64) == 3
    with pytest.raises(ValueError):
        fitness(0, 0, 0, 64)


def test_fitness_monotone_in_new_addresses():
    values = [fitness(n, 3, 7, 64) for n in range(20)]
    assert values == sorted(values)


def test_select_top_k_ordering_and_ties():
    seeds = [
        Seed(data=b"aaa", seed_id=0, fitness=Fraction(5)),
        Seed(data=b"bb", seed_id=1, fitness=Fraction(5)),
        Seed(data=b"cc", seed_id=2, fitness=Fraction(5)),
        Seed(data=b"d", seed_id=3, fitness=Fraction(9)),
    ]
    top = select_top_k(seeds, 3)
    assert [s.seed_id for s in top] == [3, 1, 2]  # fitness, then length, then id
    assert select_top_k(seeds, 10) == select_top_k(seeds, 4)


def test_select_top_k_permutation_invariant():
    rng = random.Random(2)
    seeds = [
        Seed(data=bytes(rng.randrange(256) for _ in range(rng.randrange(1, 8))),
             seed_id=i, fitness=Fraction(rng.randrange(4)))
        for i in range(20)
    ]
    expected = [s.seed_id for s in select_top_k(seeds, 7)]
    for _ in range(10):
        shuffled = list(seeds)
        rng.shuffle(shuffled)
        assert [s.seed_id for s in select_top_k(shuffled, 7)] == expected


def test_genetic_mutation_bounds():
    config = MutatorConfig(mode=MODE_GENETIC, rng_seed=1)
    mutator = Mutator(config)
    seed = Seed(data=bytes(range(64)), seed_id=0)
    for i in range(200):
        child = mutator.mutate(seed, pool=[], next_id=i + 1)
        changed = sum(1 for a, b in zip(seed.data, child.data) if a != b)
        assert len(child.data) == len(seed.data)
        assert changed <= 8


def test_genetic_crossover_prefix_suffix():
    config = MutatorConfig(mode=MODE_GENETIC, rng_seed=0)
    parent = Seed(data=b"\xaa" * 32, seed_id=0)
    other = Seed(data=b"\xbb" * 32, seed_id=1)
    saw_crossover = False
    mutator = Mutator(config)
    for i in range(100):
        child = mutator.mutate(parent, pool=[other], next_id=i)
        data = child.data
        if b"\xbb" in data and b"\xaa" in data:
            split = data.index(b"\xbb")
            assert data[:split] == b"\xaa" * split
            assert data[split:] == b"\xbb" * (len(data) - split)
            saw_crossover = True
    assert saw_crossover


def test_havoc_respects_size_bound():
    config = MutatorConfig(mode=MODE_HAVOC, rng_seed=3, max_size=64)
    mutator = Mutator(config)
    seed = Seed(data=bytes(60), seed_id=0)
    pool = [Seed(data=bytes(range(50)), seed_id=1)]
    for i in range(300):
        child = mutator.mutate(seed, pool=pool, next_id=i)
        assert 1 <= len(child.data) <= 64


def test_mutation_deterministic_replay():
    seed = Seed(data=bytes(range(40)), seed_id=0)
    pool = [Seed(data=b"\x11" * 20, seed_id=1)]

    def lineage(mode):
        mutator = Mutator(MutatorConfig(mode=mode, rng_seed=42))
        return [mutator.mutate(seed, pool=pool, next_id=i).data for i in range(50)]

    for mode in (MODE_HAVOC, MODE_GENETIC):
        assert lineage(mode) == lineage(mode)


def test_count_buckets():
    assert count_bucket(0) == 0
    assert count_bucket(1) == 1
    assert count_bucket(2) == 2
    assert count_bucket(3) == 2
    assert count_bucket(4) == 3
    assert count_bucket(1000) == 8


def test_config_validation():
    with pytest.raises(ValueError):
        MutatorConfig(k=0)
    with pytest.raises(ValueError):
        MutatorConfig(alpha=-1)
    with pytest.raises(ValueError):
        MutatorConfig(mode="annealing")
