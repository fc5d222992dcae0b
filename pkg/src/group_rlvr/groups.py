"""Finite groups stored as Cayley tables.

States are identified with group elements and a transition ``g`` acts on a
state ``y`` by left multiplication, so ``act(g, y) = g * y``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MAX_ORDER = 5040
MAX_PERMUTATION_DEGREE = 8


class GroupError(ValueError):
    """Raised for invalid group construction or malformed element paths."""


@dataclass(frozen=True, eq=False)
class GroupTable:
    """Immutable Cayley table.

    ``table[a, b]`` is the index of ``a * b``. Element 0 need not be the
    identity in general, although every built-in constructor places it there.
    """

    name: str
    table: np.ndarray
    generators: str = ""
    elements: tuple | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        t = np.ascontiguousarray(self.table, dtype=np.int64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise GroupError("composition table must be square")
        if not 1 <= t.shape[0] <= MAX_ORDER:
            raise GroupError(f"group order must lie in [1, {MAX_ORDER}]")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def order(self) -> int:
        return self.table.shape[0]

    @cached_property
    def identity(self) -> int:
        rows = np.flatnonzero((self.table == np.arange(self.order)).all(axis=1))
        if rows.size != 1:
            raise GroupError("table has no unique left identity")
        return int(rows[0])

    @cached_property
    def inverse(self) -> np.ndarray:
        inv = np.argmax(self.table == self.identity, axis=1)
        inv.setflags(write=False)
        return inv

    @cached_property
    def is_abelian(self) -> bool:
        return bool((self.table == self.table.T).all())

    def __len__(self) -> int:
        return self.order

    def __repr__(self) -> str:
        return f"GroupTable({self.name!r}, order={self.order})"


def _check_elem(group: GroupTable, *elems: int) -> None:
    for e in elems:
        if not 0 <= e < group.order:
            raise GroupError(f"element index {e} outside [0, {group.order})")


def build_cyclic(n: int) -> GroupTable:
    """Integers modulo ``n`` under addition."""
    if n < 2:
        raise GroupError(f"cyclic group needs n >= 2, got {n}")
    if n > MAX_ORDER:
        raise GroupError(f"order {n} exceeds cap {MAX_ORDER}")
    idx = np.arange(n)
    return GroupTable(f"Z{n}", (idx[:, None] + idx[None, :]) % n, generators="1")


def build_dihedral(n: int) -> GroupTable:
    """Symmetries of the regular ``n``-gon, order ``2n``.

    Index ``k + n * e`` stands for ``r^k s^e`` with rotation ``r`` and
    reflection ``s``, so ``s r s = r^-1``.
    """
    if n < 3:
        raise GroupError(f"dihedral group needs n >= 3, got {n}")
    if 2 * n > MAX_ORDER:
        raise GroupError(f"order {2 * n} exceeds cap {MAX_ORDER}")
    idx = np.arange(2 * n)
    k, e = idx % n, idx // n
    rot = (k[:, None] + np.where(e[:, None] == 1, -k[None, :], k[None, :])) % n
    return GroupTable(f"D{n}", rot + n * (e[:, None] ^ e[None, :]), generators="rotation, reflection")


def _is_even(perm: tuple[int, ...]) -> bool:
    seen = [False] * len(perm)
    transpositions = 0
    for start in range(len(perm)):
        if seen[start]:
            continue
        length = 0
        j = start
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        transpositions += length - 1
    return transpositions % 2 == 0


def permutation_elements(kind: str, n: int) -> list[tuple[int, ...]]:
    """Permutations of ``range(n)`` in lexicographic order, optionally only even ones."""
    perms = list(itertools.permutations(range(n)))
    if kind == "alternating":
        perms = [p for p in perms if _is_even(p)]
    elif kind != "symmetric":
        raise GroupError(f"unknown permutation group kind {kind!r}")
    return perms


def build_permutation_group(kind: str, n: int) -> GroupTable:
    """Symmetric or alternating group on ``n`` letters.

    Composition is ``(a * b)(i) = a(b(i))``: apply ``b`` first.
    """
    if not 2 <= n <= MAX_PERMUTATION_DEGREE:
        raise GroupError(f"permutation degree must lie in [2, {MAX_PERMUTATION_DEGREE}], got {n}")
    perms = permutation_elements(kind, n)
    arr = np.array(perms, dtype=np.int64)
    # encode each permutation as a base-n integer so products can be looked up in bulk
    weights = n ** np.arange(n - 1, -1, -1)
    if len(perms) > MAX_ORDER:
        raise GroupError(f"order {len(perms)} exceeds cap {MAX_ORDER}")
    lookup = np.full(n**n, -1, dtype=np.int64)
    lookup[arr @ weights] = np.arange(len(perms))
    # row a holds the codes of a[b[i]] for every b
    table = np.stack([lookup[a[arr] @ weights] for a in arr])
    prefix = "S" if kind == "symmetric" else "A"
    return GroupTable(f"{prefix}{n}", table, generators=f"{kind} permutations of {n} letters",
                      elements=tuple(perms))


def build_group(kind: str, n: int) -> GroupTable:
    """Dispatch on a group kind label: ``cyclic``, ``dihedral``, ``symmetric`` or ``alternating``."""
    if kind == "cyclic":
        return build_cyclic(n)
    if kind == "dihedral":
        return build_dihedral(n)
    return build_permutation_group(kind, n)


def group_from_name(name: str) -> GroupTable:
    """Parse labels such as ``Z96``, ``D48``, ``S3`` or ``A5``."""
    kinds = {"Z": "cyclic", "D": "dihedral", "S": "symmetric", "A": "alternating"}
    head, tail = name[:1].upper(), name[1:]
    if head not in kinds or not tail.isdigit():
        raise GroupError(f"cannot parse group name {name!r}")
    return build_group(kinds[head], int(tail))


def compose(group: GroupTable, a: int, b: int) -> int:
    _check_elem(group, a, b)
    return int(group.table[a, b])


def act(group: GroupTable, g: int, y: int) -> int:
    """Apply transition ``g`` to state ``y``."""
    return compose(group, g, y)


def compose_all(group: GroupTable, transitions) -> int:
    """Product ``g_L * ... * g_1`` of a transition sequence applied first-to-last."""
    out = group.identity
    for g in transitions:
        out = int(group.table[g, out])
    return out


def compose_path(group: GroupTable, transitions, y0: int) -> list[int]:
    """States ``y_1..y_L`` visited when ``transitions`` are applied to ``y0`` in order."""
    transitions = list(transitions)
    if not transitions:
        raise GroupError("empty transition path")
    _check_elem(group, y0, *transitions)
    states = []
    y = y0
    for g in transitions:
        y = int(group.table[g, y])
        states.append(y)
    return states


def is_latin_square(group: GroupTable) -> bool:
    expected = np.arange(group.order)
    t = group.table
    return bool((np.sort(t, axis=1) == expected).all() and (np.sort(t, axis=0) == expected[:, None]).all())


def conjugacy_classes(group: GroupTable) -> list[np.ndarray]:
    t, inv = group.table, group.inverse
    seen = np.zeros(group.order, dtype=bool)
    classes = []
    for a in range(group.order):
        if seen[a]:
            continue
        cls = np.unique(t[t[:, a], inv])  # g a g^-1 for all g
        seen[cls] = True
        classes.append(cls)
    return classes


def normal_closure(group: GroupTable, a: int) -> np.ndarray:
    """Boolean mask of the smallest normal subgroup containing ``a``."""
    t = group.table
    inside = np.zeros(group.order, dtype=bool)
    inside[group.identity] = True
    gens = np.unique(t[t[:, a], group.inverse])
    frontier = [group.identity]
    while frontier:
        fresh = np.unique(t[np.ix_(frontier, gens)])
        fresh = fresh[~inside[fresh]]
        inside[fresh] = True
        frontier = list(fresh)
    return inside


def is_simple(group: GroupTable, max_order: int = 60) -> bool:
    """A group is simple iff every non-identity element normally generates it."""
    d = group.order
    if d > max_order:
        raise GroupError(f"simplicity scan limited to order <= {max_order}")
    if d == 1:
        return False
    reps = [c[0] for c in conjugacy_classes(group) if group.identity not in c]
    return all(normal_closure(group, int(a)).all() for a in reps)
