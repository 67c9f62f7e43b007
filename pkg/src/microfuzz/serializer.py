"""Fence-serialized twin construction with relocation.

``serialize(p)`` builds a program ``Q`` that is semantically equivalent
to ``p`` on a speculation-correct CPU but executes a serialization fence
between every two instructions, so speculation can never cross an
instruction boundary.  The transformation:

* decodes ``p`` linearly from offset 0 into fragment 0 and emits every
  instruction followed by a fence (each fragment also opens with one, so
  every emitted instruction has a fence directly in front of it);
* recomputes relative branch operands so each rewritten branch lands on
  the fence in front of its target's twin, keeping the retired-fence
  density identical on taken and fall-through paths;
* unrolls a fresh fragment from any branch target that is not an
  instruction boundary of the referencing fragment (superset-style
  decoding from that interior offset), joining fragments with a HLT so
  control never falls across a fragment boundary;
* recomputes IP-relative load displacements so the absolute address they
  read is unchanged;
* relaxes 8-bit displacements that no longer reach after expansion by
  threading the flight through hop islands — a skipped-over ``JMP``
  pair that preserves both semantics and fence density.

Offsets are tracked in a relocation map from (fragment id, original
offset) to the serialized twin's offset, which the differential
comparison uses to translate instruction pointers back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import isa

CODE_CAPACITY = isa.CODE_REGION_SIZE
MAX_INPUT = CODE_CAPACITY // 4
MAX_FRAGMENTS = 256

_FENCE_BYTE = isa.OP_FENCE
_RELAX_LIMIT = 4096  # hop-island insertions before giving up


class SerializeError(Exception):
    pass


class CapacityExceeded(SerializeError):
    pass


class UnmappableTarget(SerializeError):
    pass


class UnmappedOffset(SerializeError):
    pass


@dataclass
class RelocationMap:
    """(fragment id, original offset) -> serialized offset, plus lengths."""

    entries: dict[tuple[int, int], int] = field(default_factory=dict)
    lengths: dict[int, int] = field(default_factory=dict)  # ser offset -> twin length

    def add(self, frag: int, orig: int, ser: int, length: int) -> None:
        self.entries[(frag, orig)] = ser
        self.lengths[ser] = length


@dataclass
class SerializedProgram:
    code: bytes
    map: RelocationMap
    fragments: list[tuple[int, int]]  # (start offset in serialized code, origin offset)

    def __post_init__(self) -> None:
        self._inverse = {ser: key for key, ser in self.map.entries.items()}

    def original_at(self, ser: int) -> tuple[int, int]:
        hit = self._inverse.get(ser)
        if hit is None:
            raise UnmappedOffset(f"serialized offset {ser:#x} maps to no instruction")
        return hit

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += struct.pack("<H", len(self.code))
        out += self.code
        out += struct.pack("<H", len(self.map.entries))
        for (frag, orig), ser in sorted(self.map.entries.items()):
            out += struct.pack("<BHH", frag, orig, ser)
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SerializedProgram":
        (code_len,) = struct.unpack_from("<H", blob, 0)
        code = blob[2:2 + code_len]
        (count,) = struct.unpack_from("<H", blob, 2 + code_len)
        reloc = RelocationMap()
        pos = 4 + code_len
        for _ in range(count):
            frag, orig, ser = struct.unpack_from("<BHH", blob, pos)
            pos += 5
            _, length = isa.decode_instruction(code, ser)
            reloc.add(frag, orig, ser, length)
        return cls(code=bytes(code), map=reloc, fragments=[])


def map_ip(program: SerializedProgram, ser_ip: int) -> int:
    """Original offset of the twin starting exactly at ``ser_ip``."""
    _, orig = program.original_at(ser_ip)
    return orig


def map_post_ip(program: SerializedProgram, ser_ip: int) -> int | None:
    """Translate an instruction-boundary IP of Q back to original space.

    Accepts twin starts and twin ends (where the IP rests after the last
    retired instruction); fence interiors, joins and hop islands return
    None.
    """
    hit = program._inverse.get(ser_ip)
    if hit is not None:
        return hit[1]
    for ser, length in program.map.lengths.items():
        if ser + length == ser_ip:
            return program._inverse[ser][1] + length
    return None


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Item:
    kind: str                  # "fence" | "twin" | "join" | "skip" | "hop"
    data: bytearray
    frag: int = -1
    orig: int = -1
    insn: isa.GisaInstruction | None = None
    target_item: int | None = None  # branches: index of the landing twin/hop
    pos: int = 0


class _Builder:
    def __init__(self, code: bytes, traced: set[int] | None) -> None:
        self.code = code
        self.items: list[_Item] = []
        self.fragments: list[tuple[int, int]] = []  # (leading fence item index, origin)
        self.frag_boundaries: list[dict[int, int]] = []  # orig offset -> twin item index
        self.pending: list[tuple[int, int]] = []  # (branch item index, original target)
        self.traced = traced or set()

    def _byte(self, i: int) -> int:
        return self.code[i] if i < len(self.code) else 0

    def unroll(self, origin: int) -> int:
        """Emit the decode stream from ``origin``; returns the fragment id."""
        frag = len(self.fragments)
        if frag >= MAX_FRAGMENTS:
            raise CapacityExceeded("too many fragments")
        if self.items:
            self.items.append(_Item("join", bytearray([isa.OP_HLT])))
        self.fragments.append((len(self.items), origin))
        self.items.append(_Item("fence", bytearray([_FENCE_BYTE])))
        boundaries: dict[int, int] = {}
        self.frag_boundaries.append(boundaries)

        off = origin
        while True:
            insn, length = isa.decode_instruction(self.code, off)
            raw = bytearray(self._byte(off + i) for i in range(length))
            item = _Item("twin", raw, frag=frag, orig=off, insn=insn)
            boundaries[off] = len(self.items)
            self.items.append(item)
            self.items.append(_Item("fence", bytearray([_FENCE_BYTE])))
            if insn.index in isa.CONTROL_FLOW:
                target = isa.branch_target(insn, off)
                assert target is not None
                if not 0 <= target < CODE_CAPACITY:
                    raise UnmappableTarget(
                        f"branch at {off:#x} targets {target:#06x} outside the code region")
                self.pending.append((boundaries[off], target))
            if insn.index == isa.OP_HLT or insn.is_ud:
                return frag
            off += length

    def resolve_targets(self) -> None:
        """Link branches to twin items, spawning fragments for misaligned
        or out-of-fragment targets."""
        spawned = {origin: i for i, (_, origin) in enumerate(self.fragments)}
        cursor = 0
        while cursor < len(self.pending):
            branch_idx, target = self.pending[cursor]
            cursor += 1
            branch = self.items[branch_idx]
            if branch.target_item is not None:
                continue
            in_frag = self.frag_boundaries[branch.frag].get(target)
            if in_frag is not None:
                branch.target_item = in_frag
                continue
            if target not in spawned:
                spawned[target] = self.unroll(target)
            branch.target_item = self._first_twin(spawned[target])

    def _first_twin(self, frag: int) -> int:
        start, _ = self.fragments[frag]
        for idx in range(start, len(self.items)):
            if self.items[idx].kind == "twin":
                return idx
        raise AssertionError("fragment without twins")  # pragma: no cover

    def spawn_traced(self) -> None:
        spawned = {origin for _, origin in self.fragments}
        frag0 = self.frag_boundaries[0] if self.frag_boundaries else {}
        for ip in sorted(self.traced):
            if 0 <= ip < CODE_CAPACITY and ip not in frag0 and ip not in spawned:
                self.unroll(ip)
                spawned.add(ip)

    # -- relaxation ----------------------------------------------------------

    def _positions(self) -> None:
        pos = 0
        for item in self.items:
            item.pos = pos
            pos += len(item.data)

    def _branch_delta(self, idx: int) -> int:
        item = self.items[idx]
        assert item.target_item is not None
        fence = self.items[item.target_item - 1]
        assert fence.kind == "fence"
        return fence.pos - (item.pos + len(item.data))

    def relax(self) -> None:
        inserted = 0
        while True:
            self._positions()
            overflow = None
            for idx, item in enumerate(self.items):
                if item.target_item is None:
                    continue
                if not -128 <= self._branch_delta(idx) <= 127:
                    overflow = idx
                    break
            if overflow is None:
                return
            inserted += 1
            if inserted > _RELAX_LIMIT:
                raise CapacityExceeded("relaxation did not converge")
            self._insert_hop(overflow)

    def _insertion_ok(self, idx: int) -> bool:
        if idx == len(self.items):
            return True
        if idx == 0:
            return False
        return (self.items[idx].kind in ("twin", "skip")
                and self.items[idx - 1].kind == "fence")

    def _insert_hop(self, branch_idx: int) -> None:
        """Thread one overflowing flight through a hop island in reach.

        Island: ``[JMP +3][FENCE][JMP r][FENCE]`` — fall-through skips
        onto the trailing fence; the long flight lands on the inner
        fence and continues from the hop.
        """
        branch = self.items[branch_idx]
        source_end = branch.pos + len(branch.data)
        delta = self._branch_delta(branch_idx)
        reach = source_end + 120 if delta > 0 else source_end - 120
        lo, hi = sorted((source_end, reach))
        best, best_gap = None, None
        for idx in range(len(self.items) + 1):
            if not self._insertion_ok(idx):
                continue
            pos = (self.items[idx].pos if idx < len(self.items)
                   else self.items[-1].pos + len(self.items[-1].data))
            if lo <= pos <= hi:
                gap = abs(pos - reach)
                if best is None or gap < best_gap:
                    best, best_gap = idx, gap
        if best is None:
            raise CapacityExceeded("no hop insertion point in reach")

        old_target = branch.target_item
        island = [
            _Item("skip", bytearray(isa.encode(isa.OP_JMP, imm=3))),
            _Item("fence", bytearray([_FENCE_BYTE])),
            _Item("hop", bytearray(isa.encode(isa.OP_JMP, imm=0)), target_item=old_target),
            _Item("fence", bytearray([_FENCE_BYTE])),
        ]
        self.items[best:best] = island
        hop_index = best + 2
        island_ids = {id(entry) for entry in island}
        for item in self.items:
            if id(item) in island_ids:
                continue
            if item.target_item is not None and item.target_item >= best:
                item.target_item += 4
        if island[2].target_item is not None and island[2].target_item >= best:
            island[2].target_item += 4
        self.fragments = [(idx + 4 if idx >= best else idx, origin)
                          for idx, origin in self.fragments]
        branch.target_item = hop_index

    # -- final encoding --------------------------------------------------------

    def link(self) -> SerializedProgram:
        self._positions()
        total = (self.items[-1].pos + len(self.items[-1].data)) if self.items else 0
        if total > CODE_CAPACITY:
            raise CapacityExceeded(f"serialized program needs {total} bytes")

        relocation = RelocationMap()
        for item in self.items:
            if item.kind == "twin":
                relocation.add(item.frag, item.orig, item.pos, len(item.data))

        for idx, item in enumerate(self.items):
            if item.target_item is not None:
                delta = self._branch_delta(idx)
                assert -128 <= delta <= 127, "relaxation left an overflow"
                item.data[1] = delta & 0xFF
            if item.kind == "twin" and item.insn is not None \
                    and item.insn.index == isa.OP_LOADRIP:
                absolute = (item.orig + item.insn.length + item.insn.imm) & 0xFFFF
                new_rel = (absolute - (item.pos + item.insn.length)) & 0xFFFF
                item.data[2:4] = struct.pack("<H", new_rel)

        code = bytearray()
        for item in self.items:
            code += item.data
        fragments = [(self.items[idx].pos, origin) for idx, origin in self.fragments]
        return SerializedProgram(code=bytes(code), map=relocation, fragments=fragments)


def unroll_misaligned(code: bytes, origin: int) -> list[tuple[int, isa.GisaInstruction]]:
    """Linear decode from ``origin`` until HLT or UD (inclusive)."""
    out = []
    off = origin
    while True:
        insn, length = isa.decode_instruction(code, off)
        out.append((off, insn))
        if insn.index == isa.OP_HLT or insn.is_ud:
            return out
        off += length


def serialize(code: bytes, traced_ips: set[int] | None = None) -> SerializedProgram:
    """Build the fence-serialized twin of ``code``."""
    if len(code) > MAX_INPUT:
        raise CapacityExceeded(
            f"testcase of {len(code)} bytes exceeds the {MAX_INPUT}-byte serialization bound")
    builder = _Builder(code, traced_ips)
    builder.unroll(0)
    builder.resolve_targets()
    builder.spawn_traced()
    builder.resolve_targets()
    builder.relax()
    return builder.link()
