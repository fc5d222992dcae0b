"""Reasoning-instance generation: transitions, position identifiers and ground-truth states.

Position identifiers are canonical basis indices in ``range(dpos)``. A hidden
alignment permutation maps the prompt position of transition ``l`` to the
answer position that must attend to it, ``answer[l-1] = align[prompt[l]]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .groups import GroupTable, compose_all, compose_path


class HorizonError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PositionSpace:
    dpos: int
    align: np.ndarray

    @property
    def max_horizon(self) -> int:
        return self.dpos - 1

    @property
    def align_inverse(self) -> np.ndarray:
        return np.argsort(self.align)


def new_position_space(dpos: int, seed: int | None = 0) -> PositionSpace:
    if dpos < 3:
        raise ValueError(f"need at least 3 position identifiers, got {dpos}")
    align = np.random.default_rng(seed).permutation(dpos)
    align.setflags(write=False)
    return PositionSpace(dpos, align)


@dataclass(frozen=True, eq=False)
class Tokenizer:
    """Bijection between state indices and output classes."""

    to_class: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "Tokenizer":
        return cls(np.arange(d))

    @classmethod
    def random(cls, d: int, seed: int | None = 0) -> "Tokenizer":
        return cls(np.random.default_rng(seed).permutation(d))

    @property
    def to_state(self) -> np.ndarray:
        return np.argsort(self.to_class)

    def is_bijective(self) -> bool:
        return bool((np.sort(self.to_class) == np.arange(self.to_class.size)).all())


@dataclass(frozen=True)
class Instance:
    horizon: int
    transitions: tuple[int, ...]
    prompt_positions: tuple[int, ...]
    answer_positions: tuple[int, ...]  # length horizon + 1
    y0: int
    states: tuple[int, ...]  # y_1 .. y_L

    @property
    def final_state(self) -> int:
        return self.states[-1]

    @classmethod
    def build(cls, group: GroupTable, space: PositionSpace, transitions, prompt_positions,
              y0: int, last_answer: int) -> "Instance":
        transitions = tuple(int(g) for g in transitions)
        prompts = tuple(int(x) for x in prompt_positions)
        answers = tuple(int(space.align[x]) for x in prompts) + (int(last_answer),)
        states = tuple(compose_path(group, transitions, int(y0)))
        return cls(len(transitions), transitions, prompts, answers, int(y0), states)

    def to_record(self) -> dict:
        return {
            "L": self.horizon,
            "g": list(self.transitions),
            "xp": list(self.prompt_positions),
            "xa": list(self.answer_positions),
            "y0": self.y0,
            "y": list(self.states),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Instance":
        return cls(int(rec["L"]), tuple(rec["g"]), tuple(rec["xp"]), tuple(rec["xa"]), int(rec["y0"]), tuple(rec["y"]))


def check_horizon(L: int, d: int, dpos: int) -> None:
    if not 2 <= L <= min(dpos - 1, d):
        raise HorizonError(f"horizon {L} outside [2, {min(dpos - 1, d)}]")


def sample_instance(group: GroupTable, space: PositionSpace, L: int, rng: np.random.Generator) -> Instance:
    check_horizon(L, group.order, space.dpos)
    transitions = rng.choice(group.order, L, replace=False)
    prompts = rng.choice(space.dpos, L, replace=False)
    used = set(int(space.align[x]) for x in prompts)
    free = [x for x in range(space.dpos) if x not in used]
    last = free[rng.integers(len(free))]
    y0 = int(rng.integers(group.order))
    return Instance.build(group, space, transitions, prompts, y0, last)


def validate_instance(inst: Instance, group: GroupTable, space: PositionSpace) -> list[str]:
    problems = []
    L = inst.horizon
    if not (len(inst.transitions) == len(inst.prompt_positions) == len(inst.states) == L
            and len(inst.answer_positions) == L + 1):
        return ["field lengths inconsistent with horizon"]
    if L > min(space.dpos - 1, group.order):
        problems.append("horizon exceeds cap")
    if len(set(inst.transitions)) != L:
        problems.append("transitions not distinct")
    if len(set(inst.prompt_positions)) != L:
        problems.append("prompt positions not distinct")
    if any(not 0 <= g < group.order for g in inst.transitions) or not 0 <= inst.y0 < group.order:
        return problems + ["element index out of range"]
    if any(not 0 <= x < space.dpos for x in inst.prompt_positions + inst.answer_positions):
        return problems + ["position index out of range"]
    for l, x in enumerate(inst.prompt_positions):
        if inst.answer_positions[l] != space.align[x]:
            problems.append(f"answer position {l} not aligned with prompt position {l + 1}")
    if inst.answer_positions[L] in inst.answer_positions[:L]:
        problems.append("final answer position reused")
    y = inst.y0
    for l, (g, s) in enumerate(zip(inst.transitions, inst.states)):
        y = int(group.table[g, y])
        if s != y:
            problems.append(f"state chain broken at step {l + 1}")
            break
    if inst.states and inst.states[-1] != group.table[compose_all(group, inst.transitions), inst.y0]:
        problems.append("final state differs from composite action")
    return problems


@dataclass
class InstanceBatch:
    """Padded arrays for a batch of instances with possibly different horizons."""

    lengths: np.ndarray  # (n,)
    transitions: np.ndarray  # (n, Lmax)
    prompts: np.ndarray  # (n, Lmax)
    answers: np.ndarray  # (n, Lmax + 1); answers[i, L_i] is the final answer position
    y0: np.ndarray  # (n,)
    final: np.ndarray  # (n,) ground-truth y_L

    @property
    def size(self) -> int:
        return self.lengths.size

    @property
    def max_len(self) -> int:
        return self.transitions.shape[1]

    def instance(self, i: int) -> Instance:
        L = int(self.lengths[i])
        ans = tuple(int(a) for a in self.answers[i, :L]) + (int(self.answers[i, L]),)
        return Instance(L, tuple(int(g) for g in self.transitions[i, :L]), tuple(int(x) for x in self.prompts[i, :L]),
                        ans, int(self.y0[i]), ())


def sample_batch(group: GroupTable, space: PositionSpace, lengths, rng: np.random.Generator) -> InstanceBatch:
    """Vectorized sampling; each row uses the leading ``L_i`` columns of random permutations."""
    lengths = np.asarray(lengths, dtype=np.int64)
    n = lengths.size
    Lmax = int(lengths.max())
    for L in np.unique(lengths):
        check_horizon(int(L), group.order, space.dpos)
    transitions = np.argsort(rng.random((n, group.order)), axis=1)[:, :Lmax]
    prompts = np.argsort(rng.random((n, space.dpos)), axis=1)[:, :Lmax]
    aligned = space.align[prompts]
    active = np.arange(Lmax)[None, :] < lengths[:, None]
    keys = rng.random((n, space.dpos))
    rows = np.repeat(np.arange(n), Lmax)
    keys[rows[active.ravel()], aligned[active]] = np.inf
    last = np.argmin(keys, axis=1)
    answers = np.concatenate([aligned, np.zeros((n, 1), dtype=np.int64)], axis=1)
    answers[np.arange(n), lengths] = last
    y0 = rng.integers(group.order, size=n)
    y = y0.copy()
    for k in range(Lmax):
        step = active[:, k]
        y[step] = group.table[transitions[step, k], y[step]]
    return InstanceBatch(lengths, transitions, prompts, answers, y0, y)


def batch_from_instances(instances) -> InstanceBatch:
    instances = list(instances)
    lengths = np.array([inst.horizon for inst in instances])
    n, Lmax = len(instances), int(lengths.max())
    transitions = np.zeros((n, Lmax), dtype=np.int64)
    prompts = np.zeros((n, Lmax), dtype=np.int64)
    answers = np.zeros((n, Lmax + 1), dtype=np.int64)
    for i, inst in enumerate(instances):
        L = inst.horizon
        transitions[i, :L] = inst.transitions
        prompts[i, :L] = inst.prompt_positions
        answers[i, :L] = inst.answer_positions[:L]
        answers[i, L] = inst.answer_positions[L]
    y0 = np.array([inst.y0 for inst in instances])
    final = np.array([inst.final_state for inst in instances])
    return InstanceBatch(lengths, transitions, prompts, answers, y0, final)


def write_corpus(path, instances, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def read_corpus(path) -> tuple[dict, list[Instance]]:
    with open(path) as fh:
        header = json.loads(fh.readline())["header"]
        return header, [Instance.from_record(json.loads(line)) for line in fh if line.strip()]
