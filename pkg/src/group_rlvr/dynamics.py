"""Reduced two-score learning dynamics driven by exact rewards and gradients.

Under the reduced parametrization every aligned score equals ``q`` and every
off-aligned score equals ``r``. Rewards and gradients are computed exactly by
convolution over a pool of instances fixed at the start of a run, so the
reward at horizon ``L`` is a deterministic function of ``(q, r)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .groups import GroupTable, build_cyclic
from .policy import reduced_step_law
from .spectral import (cyclic_basis, cyclic_batch_stats, fourier_basis, fourier_batch_stats, posterior_probs,
                       registry_for)
from .train import InstabilityError, horizon_set

VISIBLE = 0.01
MASTERED = 0.99
DIVERGENCE = 50.0
FD_STEP = 1e-5


class OutOfRegimeError(ValueError):
    pass


@dataclass
class InstancePool:
    """Fixed transition contexts per horizon used to evaluate exact rewards."""

    group: GroupTable
    contexts: dict[int, np.ndarray]
    _bases: dict = field(default_factory=dict, repr=False)

    @classmethod
    def sample(cls, group: GroupTable, lengths, n: int, rng: np.random.Generator) -> "InstancePool":
        d = group.order
        ctx = {int(L): np.argsort(rng.random((n, d)), axis=1)[:, :L] for L in lengths}
        return cls(group, ctx)

    @property
    def cyclic(self) -> bool:
        return self.group.name.startswith("Z")

    def basis(self, L: int):
        """Cached transforms for horizon ``L``; None when no representation data exist."""
        if L not in self._bases:
            if self.cyclic:
                self._bases[L] = cyclic_basis(self.contexts[L], self.group.order)
            else:
                try:
                    self._bases[L] = fourier_basis(self.contexts[L], registry_for(self.group), self.group)
                except FileNotFoundError:
                    self._bases[L] = None
        return self._bases[L]


def horizon_stats(q: float, r: float, L: int, pool: InstancePool, C_B: float) -> tuple[float, float]:
    """Exact mean reward at horizon ``L`` and its derivative along the common aligned score."""
    d = pool.group.order
    law, attn = reduced_step_law(q, r, L, d, C_B)
    basis = pool.basis(L)
    if pool.cyclic:
        success, gap = cyclic_batch_stats(law.p1, law.p2, law.p3, pool.contexts[L], d, basis)
    elif basis is not None:
        success, gap = fourier_batch_stats(law.p1, law.p2, law.p3, basis)
    else:
        success, gap = [], []
        for row in pool.contexts[L]:
            rep = posterior_probs(law, row, pool.group)
            success.append(rep.success)
            gap.append(math.fsum(rep.joint_target - law.p1 * rep.success
                                 + law.p2 * rep.success - rep.joint_context / (L - 1)))
        success, gap = np.array(success), np.array(gap)
    B = C_B * math.log(d)
    return float(success.mean()), float(B * attn * (1 - attn) * gap.mean())


def mixture_reward(q: float, r: float, lengths, pool: InstancePool, C_B: float) -> float:
    """Mean over horizons of the length-normalized reward ``J_L / L``."""
    return float(np.mean([horizon_stats(q, r, L, pool, C_B)[0] / L for L in lengths]))


def mixture_grad(q: float, r: float, lengths, d: int, dpos: int, C_B: float, mc_instances: int = 32,
                 rng: np.random.Generator | None = None, pool: InstancePool | None = None,
                 group: GroupTable | None = None) -> tuple[float, float]:
    """Per-entry gradients of the mixed length-normalized reward along ``q`` and ``r``.

    The aligned component uses the exact posterior-gap formula; the
    off-aligned component is a central difference of the exact reward.
    """
    if pool is None:
        group = group or build_cyclic(d)
        pool = InstancePool.sample(group, lengths, mc_instances, rng or np.random.default_rng())
    gq = float(np.mean([horizon_stats(q, r, L, pool, C_B)[1] / L for L in lengths])) / dpos
    up = mixture_reward(q, r + FD_STEP, lengths, pool, C_B)
    down = mixture_reward(q, r - FD_STEP, lengths, pool, C_B)
    gr = (up - down) / (2 * FD_STEP) / (dpos * (dpos - 1))
    return gq, gr


def first_crossing(values: np.ndarray, threshold: float) -> int | None:
    hit = np.flatnonzero(np.asarray(values) >= threshold)
    return int(hit[0]) if hit.size else None


@dataclass
class PhaseTimeline:
    lengths: list[int]
    t: np.ndarray
    q: np.ndarray
    r: np.ndarray
    rewards: dict[int, np.ndarray]
    t_vis: dict[int, int | None] = field(default_factory=dict)
    t_mas: dict[int, int | None] = field(default_factory=dict)
    plateaus: list[int | None] = field(default_factory=list)
    chance: float = 0.0

    def rises(self) -> list[int | None]:
        return [None if self.t_vis[L] is None or self.t_mas[L] is None else self.t_mas[L] - self.t_vis[L]
                for L in self.lengths]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "q", "r"] + [f"J_{L}" for L in self.lengths])
            for i in range(self.t.size):
                w.writerow([int(self.t[i]), repr(float(self.q[i])), repr(float(self.r[i]))]
                           + [repr(float(self.rewards[L][i])) for L in self.lengths])


def detect_transitions(rewards: dict[int, np.ndarray], visible: float = VISIBLE, mastered: float = MASTERED,
                       chance: float = 0.0, t: np.ndarray | None = None):
    """First crossings of the visible and mastery thresholds and inter-horizon plateaus.

    Visibility is judged on the reward in excess of ``chance``. Returns
    ``(t_vis, t_mas, plateaus)`` with ``plateaus[k] = t_vis[k+1] - t_mas[k]``
    or None when either endpoint was not observed.
    """
    lengths = sorted(rewards)
    t_vis, t_mas = {}, {}
    for L in lengths:
        curve = np.asarray(rewards[L], dtype=float)
        if curve.size == 0:
            raise ValueError(f"empty reward curve for horizon {L}")
        iv = first_crossing(curve - chance, visible)
        im = first_crossing(curve, mastered)
        t_vis[L] = None if iv is None else (int(t[iv]) if t is not None else iv)
        t_mas[L] = None if im is None else (int(t[im]) if t is not None else im)
    plateaus = []
    for a, b in zip(lengths, lengths[1:]):
        plateaus.append(None if t_mas[a] is None or t_vis[b] is None else t_vis[b] - t_mas[a])
    return t_vis, t_mas, plateaus


def integrate_reduced(q0: float, r0: float, lr: float, lengths, steps: int, d: int = 96, dpos: int = 64,
                      C_B: float = 3.0, mc_instances: int = 32, seed: int = 0, group: GroupTable | None = None,
                      stop_when_mastered: bool = False, patience: int = 0) -> PhaseTimeline:
    """Iterate ``(q, r) += lr * mixture_grad`` and record exact rewards at every iteration.

    With ``stop_when_mastered`` the run ends ``patience`` iterations after
    every horizon first reaches mastery.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    lengths = sorted(int(L) for L in lengths)
    group = group or build_cyclic(d)
    pool = InstancePool.sample(group, lengths, mc_instances, np.random.default_rng(seed))
    q, r = float(q0), float(r0)
    ts, qs, rs = [], [], []
    curves = {L: [] for L in lengths}
    done_at = None

    def timeline() -> PhaseTimeline:
        arr = {L: np.array(v) for L, v in curves.items()}
        tv, tm, pl = detect_transitions(arr, chance=1.0 / group.order)
        return PhaseTimeline(lengths, np.array(ts), np.array(qs), np.array(rs), arr, tv, tm, pl, 1.0 / group.order)

    for t in range(steps + 1):
        stats = [horizon_stats(q, r, L, pool, C_B) for L in lengths]
        ts.append(t)
        qs.append(q)
        rs.append(r)
        for L, (J, _) in zip(lengths, stats):
            curves[L].append(J)
        if stop_when_mastered:
            if done_at is None and all(J >= MASTERED for J, _ in stats):
                done_at = t
            if done_at is not None and t - done_at >= patience:
                break
        if t == steps:
            break
        gq = float(np.mean([g / L for L, (_, g) in zip(lengths, stats)])) / dpos
        up = mixture_reward(q, r + FD_STEP, lengths, pool, C_B)
        down = mixture_reward(q, r - FD_STEP, lengths, pool, C_B)
        gr = (up - down) / (2 * FD_STEP) / (dpos * (dpos - 1))
        q, r = q + lr * gq, r + lr * gr
        if not (abs(q) <= DIVERGENCE and math.isfinite(r)):
            raise InstabilityError(f"aligned score diverged to {q:.3g} at iteration {t + 1}", timeline())
    return timeline()


def critical_q(L: int, xi: float, d: int, C_B: float, mode: str = "reward"):
    """Aligned score at which horizon ``L`` is predicted to cross reward (or attention) ``1 - xi``.

    Reward mode returns ``(threshold, first_order)`` where the second entry
    replaces the correction term by its linearization.
    """
    if not 0 < xi < 1:
        raise ValueError("xi must lie in (0, 1)")
    if L < 2:
        raise ValueError("horizon must be at least 2")
    if mode == "attention":
        return math.log((1 - xi) * (L - 1) / xi)
    if C_B < 2:
        raise ValueError("need C_B >= 2")
    x = (math.log(L) - math.log(math.log(1 / (1 - xi)))) / math.log(d)
    if x >= C_B - 1 or x <= -1:
        raise OutOfRegimeError(f"correction argument {x:.3g} outside (-1, C_B - 1)")
    base = math.log((L - 1) / (C_B - 1))
    exact = base + math.log((1 + x) / (1 - x / (C_B - 1)))
    first_order = base + C_B / (C_B - 1) * x
    return exact, first_order


@dataclass
class RegimeReport:
    ratio: float
    lengths: list[int]
    plateaus: list[int | None]
    rises: list[int | None]
    transition_labels: list[str | None]
    label: str | None
    statistic: float | None
    open_plateaus: list[int | None] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"ratio={self.ratio:g} horizons={self.lengths}",
                 f"plateaus={self.plateaus}", f"rises={self.rises}",
                 f"open_plateaus={self.open_plateaus}",
                 f"transition_labels={self.transition_labels}",
                 f"label={self.label} statistic={self.statistic}"]
        return "\n".join(lines)


def classify_regime(lengths, t_vis: dict, t_mas: dict, plateaus: list, ratio: float = float("nan"),
                    threshold: float = 10.0, end: int | None = None) -> RegimeReport:
    """Label the run grokking when the longest plateau dwarfs the longest rise.

    Transitions get a label only when both endpoints were observed. With
    ``end`` given, a plateau still open at the end of the run (previous
    horizon mastered, next one not yet visible) enters the run-level
    statistic through its lower bound ``end - T_mas``.
    """
    lengths = list(lengths)
    rises = [None if t_vis[L] is None or t_mas[L] is None else t_mas[L] - t_vis[L] for L in lengths]
    labels = []
    for k, plat in enumerate(plateaus):
        rise = rises[k + 1]
        if plat is None or rise is None:
            labels.append(None)
        else:
            labels.append("grokking" if plat > threshold * max(rise, 1) else "relay")
    open_p = []
    for a, b in zip(lengths, lengths[1:]):
        censored = end is not None and t_mas[a] is not None and t_vis[b] is None
        open_p.append(end - t_mas[a] if censored else None)
    known_p = [p for p in plateaus + open_p if p is not None]
    known_r = [x for x in rises if x is not None]
    if not known_p or not known_r:
        return RegimeReport(ratio, lengths, plateaus, rises, labels, None, None, open_p)
    stat = max(known_p) / max(max(known_r), 1)
    return RegimeReport(ratio, lengths, plateaus, rises, labels,
                        "grokking" if stat > threshold else "relay", stat, open_p)


def scan_ratio(ratios, lr: float, steps: int, L1: int = 5, L_max: int = 45, d: int = 96, dpos: int = 64,
               C_B: float = 3.0, mc_instances: int = 32, seed: int = 0, threshold: float = 10.0,
               group: GroupTable | None = None, q0: float = 0.0, r0: float = 0.0):
    """One reduced run per difficulty ratio; returns ``(reports, timelines)``."""
    ratios = list(ratios)
    if not ratios:
        raise ValueError("empty ratio grid")
    reports, timelines = [], []
    for R in ratios:
        lengths = horizon_set(R, L1, L_max)
        tl = integrate_reduced(q0, r0, lr, lengths, steps, d, dpos, C_B, mc_instances, seed, group,
                               stop_when_mastered=True)
        timelines.append(tl)
        reports.append(classify_regime(tl.lengths, tl.t_vis, tl.t_mas, tl.plateaus, R, threshold,
                                       end=int(tl.t[-1])))
    return reports, timelines
