"""Coverage comparison matrices across campaign databases.

Three views over per-configuration sets of covered microcode addresses:
the overlap matrix (diagonal = per-configuration unique totals,
off-diagonal = shared addresses), the uniqueness matrix (row minus
column), and the exclusive count (addresses no other configuration
found).  Configurations are ordered alphabetically by name so output is
stable.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class ReportMatrices:
    names: list[str]
    overlap: list[list[int]]
    uniqueness: list[list[int]]
    exclusive: list[int]


def compute_matrices(coverage_sets: dict[str, set[int]]) -> ReportMatrices:
    names = sorted(coverage_sets)
    sets = [coverage_sets[name] for name in names]
    n = len(names)
    overlap = [[len(sets[i] & sets[j]) for j in range(n)] for i in range(n)]
    uniqueness = [[len(sets[i] - sets[j]) for j in range(n)] for i in range(n)]
    exclusive = []
    for i in range(n):
        others: set[int] = set()
        for j in range(n):
            if j != i:
                others |= sets[j]
        exclusive.append(len(sets[i] - others))
    return ReportMatrices(names=names, overlap=overlap,
                          uniqueness=uniqueness, exclusive=exclusive)


def _table(title: str, names: list[str], rows: list[list[int]]) -> str:
    width = max([len(n) for n in names] + [8])
    header = " " * (width + 2) + "  ".join(f"{n:>{width}}" for n in names)
    lines = [title, header]
    for name, row in zip(names, rows):
        cells = "  ".join(f"{value:>{width}}" for value in row)
        lines.append(f"{name:>{width}}  {cells}")
    return "\n".join(lines)


def render_text(matrices: ReportMatrices) -> str:
    blocks = [
        _table("coverage overlap (diagonal = unique addresses)",
               matrices.names, matrices.overlap),
        _table("coverage uniqueness (row not in column)",
               matrices.names, matrices.uniqueness),
        "exclusive coverage (addresses no other configuration found)",
    ]
    width = max([len(n) for n in matrices.names] + [8])
    for name, count in zip(matrices.names, matrices.exclusive):
        blocks.append(f"{name:>{width}}  {count}")
    return "\n\n".join(blocks[:2]) + "\n\n" + "\n".join(blocks[2:]) + "\n"


def render_csv(matrices: ReportMatrices) -> str:
    lines = []
    names = matrices.names
    lines.append("matrix,row," + ",".join(names))
    for matrix_name, rows in (("overlap", matrices.overlap),
                              ("uniqueness", matrices.uniqueness)):
        for name, row in zip(names, rows):
            lines.append(f"{matrix_name},{name}," + ",".join(str(v) for v in row))
    for name, count in zip(names, matrices.exclusive):
        lines.append(f"exclusive,{name},{count}")
    return "\n".join(lines) + "\n"
