"""Seed corpus generation, mutation engines and selection.

Two corpus flavors: uniformly random bytes, and concatenations of valid
guest instructions with random operands.  Two mutation engines: a
stacked-random one (bit flips, byte sets, inserts, deletes, splices)
and a genetic one restricted to 1-to-8 byte overwrites plus crossover
with the current elite.  Fitness is the number of newly covered
microcode addresses plus a weighted ratio of executed to total bytes;
generations keep the top-k by fitness with deterministic tie-breaking.
All randomness flows from the configured seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction

from . import isa

DEFAULT_MAX_SIZE = 256

MODE_HAVOC = "Havoc"
MODE_GENETIC = "Genetic"


@dataclass
class Seed:
    data: bytes
    seed_id: int
    parent: int | None = None
    fitness: Fraction = Fraction(0)
    coverage_fingerprint: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self) -> None:
        if len(self.data) > DEFAULT_MAX_SIZE:
            raise ValueError(f"seed of {len(self.data)} bytes exceeds the corpus bound")


@dataclass
class MutatorConfig:
    mode: str = MODE_HAVOC
    k: int = 16
    alpha: int = 64
    max_stack: int = 128
    rng_seed: int = 0
    max_size: int = DEFAULT_MAX_SIZE

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("top-k must keep at least one seed")
        if self.alpha < 0:
            raise ValueError("fitness weight must be non-negative")
        if self.mode not in (MODE_HAVOC, MODE_GENETIC):
            raise ValueError(f"unknown mutation mode {self.mode!r}")


def gen_random_corpus(n: int, size: int, seed: int) -> list[Seed]:
    """``n`` seeds of exactly ``size`` uniformly random bytes."""
    rng = random.Random(f"random-corpus:{seed}")
    return [Seed(data=rng.randbytes(size), seed_id=i) for i in range(n)]


#: instruction pool sampled by the valid-corpus generator; every defined
#: opcode appears so large corpora exercise the full decoder surface.
_GADGET_POOL = sorted(isa.FORMATS)


def _random_instruction(rng: random.Random) -> bytes:
    index = rng.choice(_GADGET_POOL)
    return isa.encode(
        index,
        a=rng.randrange(8),
        b=rng.randrange(8),
        imm=rng.getrandbits(32),
    )


def gen_valid_corpus(n: int, size: int, seed: int) -> list[Seed]:
    """Seeds built from valid instruction encodings up to ``size`` bytes."""
    rng = random.Random(f"valid-corpus:{seed}")
    out = []
    for i in range(n):
        blob = bytearray()
        while True:
            insn = _random_instruction(rng)
            if len(blob) + len(insn) > size:
                break
            blob += insn
            if len(blob) == size:
                break
        out.append(Seed(data=bytes(blob), seed_id=i))
    return out


def fitness(new_addresses: int, executed_bytes: int, total_bytes: int,
            alpha: int) -> Fraction:
    """new unique addresses + alpha * executed/total (exact rational)."""
    if total_bytes < 1:
        raise ValueError("total_bytes must be at least 1")
    return Fraction(new_addresses) + alpha * Fraction(executed_bytes, total_bytes)


def count_bucket(count: int) -> int:
    """AFL-style count bucketing for coverage fingerprints."""
    return count.bit_length() if count < 128 else 8


def select_top_k(generation: list[Seed], k: int) -> list[Seed]:
    """Highest fitness first; ties broken by shorter data then lower id."""
    ranked = sorted(generation, key=lambda s: (-s.fitness, len(s.data), s.seed_id))
    return ranked[:k]


class Mutator:
    """Deterministic mutation engine; all draws come from the config seed."""

    def __init__(self, config: MutatorConfig) -> None:
        self.config = config
        self.rng = random.Random(f"mutator:{config.rng_seed}")

    # -- primitives -----------------------------------------------------------

    def _clamp(self, data: bytearray) -> bytes:
        limit = self.config.max_size
        return bytes(data[:limit]) if len(data) > limit else bytes(data)

    def _havoc_once(self, data: bytearray, pool: list[Seed]) -> bytearray:
        rng = self.rng
        choice = rng.randrange(5)
        if choice == 0 and data:  # bit flip
            pos = rng.randrange(len(data))
            data[pos] ^= 1 << rng.randrange(8)
        elif choice == 1 and data:  # byte set
            data[rng.randrange(len(data))] = rng.randrange(256)
        elif choice == 2 and len(data) < self.config.max_size:  # insert
            data.insert(rng.randrange(len(data) + 1), rng.randrange(256))
        elif choice == 3 and len(data) > 1:  # delete
            del data[rng.randrange(len(data))]
        elif choice == 4 and pool:  # splice
            other = rng.choice(pool).data
            if other:
                take = rng.randrange(1, min(len(other), 16) + 1)
                start = rng.randrange(len(other) - take + 1)
                pos = rng.randrange(len(data) + 1)
                data[pos:pos] = other[start:start + take]
        return data

    def _havoc(self, seed: Seed, pool: list[Seed]) -> bytes:
        data = bytearray(seed.data)
        for _ in range(self.rng.randrange(1, self.config.max_stack + 1)):
            data = self._havoc_once(data, pool)
        return self._clamp(data or bytearray(b"\x00"))

    def _genetic(self, seed: Seed, pool: list[Seed]) -> bytes:
        rng = self.rng
        if pool and rng.random() < 0.5:
            other = rng.choice(pool).data or b"\x00"
            split = rng.randrange(1, max(len(seed.data), 2))
            return self._clamp(bytearray(seed.data[:split] + other[split:]))
        data = bytearray(seed.data)
        span = rng.randrange(1, 9)  # 1-to-8 byte overwrite
        start = rng.randrange(max(len(data) - span + 1, 1))
        for i in range(start, min(start + span, len(data))):
            data[i] = rng.randrange(256)
        return self._clamp(data)

    def mutate(self, seed: Seed, pool: list[Seed] | None = None,
               next_id: int = 0) -> Seed:
        pool = pool or []
        if self.config.mode == MODE_HAVOC:
            data = self._havoc(seed, pool)
        else:
            data = self._genetic(seed, pool)
        return Seed(data=data, seed_id=next_id, parent=seed.seed_id)


def mutate(seed: Seed, config: MutatorConfig, pool: list[Seed] | None = None,
           next_id: int = 0) -> Seed:
    """One-shot mutation with a fresh engine (deterministic in the config)."""
    return Mutator(config).mutate(seed, pool=pool, next_id=next_id)
