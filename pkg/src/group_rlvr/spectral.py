"""Exact convolution and Fourier oracles for trajectory success probabilities.

A policy whose per-step action law is ``mu_l`` succeeds on an instance iff
the product of its sampled actions equals ``G* = g_L * ... * g_1``, so the
success probability is the ``L``-fold convolution ``(mu_L * ... * mu_1)(G*)``.
Everything here works with dense length-``d`` vectors indexed by group element.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .groups import GroupTable, compose_all, group_from_name

MASS_TOL = 1e-12
REP_TOL = 1e-9


class SpectralError(ValueError):
    pass


class InconsistentLawError(SpectralError):
    pass


class CompletenessError(SpectralError):
    pass


class InvalidRepresentationError(SpectralError):
    pass


class UndefinedPosteriorError(SpectralError):
    pass


# ---------------------------------------------------------------------------
# measures and step laws


@dataclass(frozen=True, eq=False)
class GroupMeasure:
    """Probability vector over the elements of a group."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1:
            raise SpectralError("measure must be a vector")
        if (p < 0).any():
            raise InconsistentLawError("negative mass in measure")
        if abs(math.fsum(p) - 1.0) > MASS_TOL:
            raise InconsistentLawError(f"measure mass {math.fsum(p)!r} differs from 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def order(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, d: int) -> "GroupMeasure":
        return cls(np.full(d, 1.0 / d))

    @classmethod
    def dirac(cls, d: int, a: int) -> "GroupMeasure":
        p = np.zeros(d)
        p[a] = 1.0
        return cls(p)


@dataclass(frozen=True)
class StepLaw:
    """Three-valued per-step action law.

    ``p1`` is the mass on the correct transition, ``p2`` on each of the other
    ``horizon - 1`` in-context transitions and ``p3`` on each remaining
    element. ``context`` and ``target`` pin the law to a concrete step.
    """

    p1: float
    p2: float
    p3: float
    horizon: int
    order: int
    context: tuple[int, ...] = ()
    target: int | None = None

    def __post_init__(self) -> None:
        L, d = self.horizon, self.order
        if not 1 <= L <= d:
            raise InconsistentLawError(f"horizon {L} incompatible with group order {d}")
        if min(self.p1, self.p2, self.p3) < 0:
            raise InconsistentLawError("negative step probability")
        total = math.fsum([self.p1, (L - 1) * self.p2, (d - L) * self.p3])
        if abs(total - 1.0) > MASS_TOL:
            raise InconsistentLawError(f"step law mass {total!r} differs from 1")
        if self.context and len(self.context) != L:
            raise InconsistentLawError("context length differs from horizon")

    @property
    def delta_main(self) -> float:
        """Effective margin of the correct transition over a vocabulary element."""
        return self.p1 - self.p3

    @property
    def delta_context(self) -> float:
        """Effective margin of an in-context distractor over a vocabulary element."""
        return self.p2 - self.p3

    def at(self, context: Sequence[int], target: int) -> "StepLaw":
        return StepLaw(self.p1, self.p2, self.p3, self.horizon, self.order, tuple(int(c) for c in context), int(target))

    def vector(self, context: Sequence[int] | None = None, target: int | None = None) -> np.ndarray:
        context = self.context if context is None else context
        target = self.target if target is None else target
        if len(context) != self.horizon or target is None:
            raise InconsistentLawError("step law is not pinned to a context and target")
        v = np.full(self.order, self.p3)
        v[list(context)] = self.p2
        v[target] = self.p1
        return v


def one_step_measure(law: StepLaw) -> GroupMeasure:
    return GroupMeasure(law.vector())


# ---------------------------------------------------------------------------
# convolution


def _context_of(context) -> tuple[int, ...]:
    return tuple(int(g) for g in getattr(context, "transitions", context))


def convolve_arrays(f: np.ndarray, nu: np.ndarray, group: GroupTable) -> np.ndarray:
    """``(f * nu)(g) = sum_h f(g h^-1) nu(h)`` for arbitrary real or complex vectors."""
    weights = np.outer(f, nu).ravel()  # weight of the pair (a, h) lands on a*h
    idx = group.table.ravel()
    if np.iscomplexobj(weights):
        return (np.bincount(idx, weights.real, group.order)
                + 1j * np.bincount(idx, weights.imag, group.order))
    return np.bincount(idx, weights, group.order)


def convolve(m1: GroupMeasure, m2: GroupMeasure, group: GroupTable) -> GroupMeasure:
    if m1.order != m2.order or m1.order != group.order:
        raise SpectralError(f"order mismatch: {m1.order}, {m2.order}, {group.order}")
    out = convolve_arrays(m1.probs, m2.probs, group)
    return GroupMeasure(np.clip(out, 0.0, None))


def evaluate_product(left: np.ndarray, right: np.ndarray, group: GroupTable, g: int) -> float:
    """``(left * right)(g)`` without forming the full convolution."""
    inv = group.inverse
    # sum over h of left(g h^-1) right(h)
    return float(np.dot(left[group.table[g, inv]], right))


def step_vectors(laws, context, group: GroupTable) -> list[np.ndarray]:
    """Per-step action laws as dense vectors.

    ``laws`` is a single StepLaw applied at every step, or a sequence with
    one StepLaw, GroupMeasure or raw vector per step.
    """
    ctx = _context_of(context)
    L = len(ctx)
    if isinstance(laws, StepLaw):
        laws = [laws] * L
    if len(laws) != L:
        raise InconsistentLawError(f"{len(laws)} laws for horizon {L}")
    out = []
    for step, law in enumerate(laws):
        if isinstance(law, StepLaw):
            if law.order != group.order:
                raise SpectralError("step law order differs from group order")
            out.append(law.vector(ctx, ctx[step]))
        else:
            out.append(np.asarray(getattr(law, "probs", law), dtype=float))
    return out


def success_probability(laws, context, group: GroupTable) -> float:
    """Exact probability that the sampled action product equals ``G*``."""
    ctx = _context_of(context)
    vecs = step_vectors(laws, ctx, group)
    acc = vecs[0]
    for v in vecs[1:]:
        acc = convolve_arrays(v, acc, group)
    return float(acc[compose_all(group, ctx)])


def enumerate_success(laws, context, group: GroupTable) -> float:
    """Brute-force sum over all ``d**L`` action sequences (small oracle)."""
    ctx = _context_of(context)
    vecs = step_vectors(laws, ctx, group)
    target = compose_all(group, ctx)
    # joint[g] accumulates probability of every partial product, one step at a time
    joint = {group.identity: 1.0}
    for v in vecs:
        nxt: dict[int, float] = {}
        for prod, w in joint.items():
            for a in range(group.order):
                key = int(group.table[a, prod])
                nxt[key] = nxt.get(key, 0.0) + w * v[a]
        joint = nxt
    return joint.get(target, 0.0)


# ---------------------------------------------------------------------------
# representations


@dataclass(frozen=True, eq=False)
class Irrep:
    dimension: int
    matrices: np.ndarray  # (d, dim, dim) complex
    trivial: bool = False

    def character(self) -> np.ndarray:
        return np.trace(self.matrices, axis1=1, axis2=2)


@dataclass(frozen=True, eq=False)
class ReprRegistry:
    group_name: str
    order: int
    irreps: list[Irrep] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return sum(ir.dimension ** 2 for ir in self.irreps) == self.order

    def nontrivial(self) -> list[Irrep]:
        return [ir for ir in self.irreps if not ir.trivial]

    def require_complete(self) -> None:
        if not self.complete:
            raise CompletenessError(f"registry for {self.group_name} is incomplete")


def validate_irrep(mats: np.ndarray, group: GroupTable, tol: float = REP_TOL) -> None:
    d, k, _ = mats.shape
    if d != group.order:
        raise InvalidRepresentationError(f"{d} matrices for a group of order {group.order}")
    eye = np.eye(k)
    if not np.allclose(mats[group.identity], eye, atol=tol):
        raise InvalidRepresentationError("identity element is not mapped to the identity matrix")
    gram = np.einsum("gji,gjk->gik", mats.conj(), mats)
    if np.abs(gram - eye).max() > tol:
        raise InvalidRepresentationError("matrix is not unitary")
    for a in range(d):
        prod = np.einsum("ij,bjk->bik", mats[a], mats)
        if np.abs(prod - mats[group.table[a]]).max() > tol:
            raise InvalidRepresentationError(f"homomorphism fails at element {a}")


def cyclic_irreps(n: int) -> ReprRegistry:
    """The ``n`` characters ``g -> exp(2 pi i k g / n)`` of the cyclic group."""
    if n < 2:
        raise SpectralError("cyclic registry needs n >= 2")
    phases = np.exp(2j * np.pi * np.outer(np.arange(n), np.arange(n)) / n)
    irreps = [Irrep(1, phases[k].reshape(n, 1, 1), trivial=(k == 0)) for k in range(n)]
    return ReprRegistry(f"Z{n}", n, irreps)


def dihedral_irreps(n: int) -> ReprRegistry:
    """Irreducible representations of the dihedral group of order ``2n``.

    One-dimensional sign characters plus the two-dimensional rotation
    representations ``j = 1 .. ceil(n / 2) - 1``.
    """
    if n < 3:
        raise SpectralError("dihedral registry needs n >= 3")
    k = np.tile(np.arange(n), 2)
    e = np.repeat([0, 1], n)
    signs = [(1, 1), (1, -1)] + ([(-1, 1), (-1, -1)] if n % 2 == 0 else [])
    irreps = [Irrep(1, ((a ** k) * (b ** e)).astype(complex).reshape(2 * n, 1, 1), trivial=(a, b) == (1, 1))
              for a, b in signs]
    flip = np.array([[1.0, 0.0], [0.0, -1.0]])
    for j in range(1, (n + 1) // 2):
        t = 2 * np.pi * j * k / n
        rot = np.stack([np.stack([np.cos(t), -np.sin(t)], -1), np.stack([np.sin(t), np.cos(t)], -1)], -2)
        mats = np.where(e[:, None, None] == 1, rot @ flip, rot)
        irreps.append(Irrep(2, mats.astype(complex)))
    return ReprRegistry(f"D{n}", 2 * n, irreps)


def load_irreps(path, group: GroupTable | None = None) -> ReprRegistry:
    """Load and validate a representation file.

    When ``group`` is omitted it is rebuilt from the file's ``group_name``.
    """
    payload = json.loads(Path(path).read_text())
    group = group or group_from_name(payload["group_name"])
    if int(payload["order"]) != group.order:
        raise InvalidRepresentationError("declared order differs from the group table")
    if "elements" in payload and group.elements is not None:
        if [tuple(e) for e in payload["elements"]] != list(group.elements):
            raise InvalidRepresentationError("element ordering differs from the group table")
    irreps = []
    for entry in payload["irreps"]:
        k = int(entry["dimension"])
        raw = np.asarray(entry["matrices"], dtype=float)
        mats = (raw[..., 0] + 1j * raw[..., 1]).reshape(group.order, k, k)
        validate_irrep(mats, group)
        trivial = k == 1 and np.allclose(mats, 1.0, atol=REP_TOL)
        irreps.append(Irrep(k, mats, trivial))
    return ReprRegistry(payload["group_name"], group.order, irreps)


def bundled_irreps(name: str) -> ReprRegistry:
    with resources.as_file(resources.files("group_rlvr") / "data" / f"{name}.json") as path:
        if not path.exists():
            raise FileNotFoundError(f"no bundled representation data for {name}")
        return load_irreps(path)


def registry_for(group: GroupTable) -> ReprRegistry:
    """Analytic representations for cyclic and dihedral groups, bundled data otherwise."""
    if group.name.startswith("Z"):
        return cyclic_irreps(group.order)
    if group.name.startswith("D"):
        return dihedral_irreps(group.order // 2)
    return bundled_irreps(group.name)


def fourier_transform(f, irrep: Irrep) -> np.ndarray:
    """``sum_h f(h) lambda(h)`` as a ``dim x dim`` matrix."""
    vec = np.asarray(getattr(f, "probs", f))
    return np.einsum("g,gij->ij", vec, irrep.matrices)


def inverse_at(registry: ReprRegistry, transforms: Sequence[np.ndarray], g: int) -> float:
    """Reconstruct ``f(g)`` from its Fourier coefficients."""
    registry.require_complete()
    total = 0j
    for irrep, fhat in zip(registry.irreps, transforms):
        # lambda(g)^-1 is the conjugate transpose for unitary irreps
        total += irrep.dimension * np.trace(fhat @ irrep.matrices[g].conj().T)
    value = total / registry.order
    if abs(value.imag) > REP_TOL:
        raise SpectralError(f"reconstruction has imaginary part {value.imag:.3g}")
    return float(value.real)


def fourier_success_probability(laws, context, group: GroupTable, registry: ReprRegistry) -> float:
    """Success probability via products of Fourier coefficients."""
    ctx = _context_of(context)
    vecs = step_vectors(laws, ctx, group)
    transforms = []
    for irrep in registry.irreps:
        acc = np.eye(irrep.dimension, dtype=complex)
        for v in vecs:
            acc = fourier_transform(v, irrep) @ acc
        transforms.append(acc)
    return inverse_at(registry, transforms, compose_all(group, ctx))


def sample_operator(irrep: Irrep, context: Sequence[int], target: int) -> np.ndarray:
    """Sum of ``lambda(h)`` over the in-context distractors."""
    others = [h for h in context if h != target]
    if not others:
        return np.zeros((irrep.dimension, irrep.dimension), dtype=complex)
    return irrep.matrices[others].sum(axis=0)


def sample_operator_norm(registry: ReprRegistry, context, target: int | None = None) -> float:
    """Largest spectral norm of the distractor sum over nontrivial irreps.

    With ``target=None`` the maximum is also taken over every choice of target.
    """
    registry.require_complete()
    ctx = _context_of(context)
    targets = ctx if target is None else [target]
    best = 0.0
    for irrep in registry.nontrivial():
        for t in targets:
            w = sample_operator(irrep, ctx, t)
            best = max(best, float(np.linalg.norm(w, 2)) if w.size else 0.0)
    return best


def spectral_decay_factor(registry: ReprRegistry, identity: int = 0) -> float:
    """Largest normalized character magnitude off the identity."""
    registry.require_complete()
    best = 0.0
    for irrep in registry.nontrivial():
        chi = np.abs(irrep.character()) / irrep.dimension
        chi[identity] = 0.0
        best = max(best, float(chi.max()))
    return min(best, 1.0)


# ---------------------------------------------------------------------------
# posteriors and expansions


@dataclass
class PosteriorReport:
    success: float
    rho_target: np.ndarray
    rho_context: np.ndarray
    joint_target: np.ndarray
    joint_context: np.ndarray
    # leading terms of the expansions and the remainder envelopes
    lead_success: float = math.nan
    lead_target: float = math.nan
    lead_context: float = math.nan
    bound_success: float = math.nan
    bound_target: float = math.nan
    bound_context: float = math.nan
    sigma: float = math.nan
    gamma: float = math.nan


def remainder_bounds(law: StepLaw, sigma: float, gamma: float) -> tuple[float, float, float]:
    """Envelopes on the remainders of the success, target and distractor expansions."""
    L, d = law.horizon, law.order
    D, dl = law.delta_main, law.delta_context
    s = D + sigma * dl
    c = 1.0 - 1.0 / d
    r_e = c * (s ** L - D ** L - L * sigma * dl * D ** (L - 1) + (L - 1) * L * gamma * dl * D ** (L - 1))
    if L >= 2:
        r_a = law.p1 * c * (s ** (L - 1) - D ** (L - 1) - (L - 1) * sigma * dl * D ** (L - 2)
                            + (L - 1) ** 2 * gamma * dl * D ** (L - 2))
    else:
        r_a = 0.0
    r_b = law.p2 * c * (sigma * (s ** (L - 1) - D ** (L - 1)) + (L - 1) * gamma * D ** (L - 1))
    return r_e, r_a, r_b


def posterior_probs(laws, context, group: GroupTable, registry: ReprRegistry | None = None) -> PosteriorReport:
    """Per-step posteriors of picking the correct transition or a distractor given success.

    Uses prefix and suffix convolutions so that each step costs one extra
    convolution. Leading terms and remainder envelopes are filled in when a
    single three-valued law governs every step and a registry is available.
    """
    ctx = _context_of(context)
    L = len(ctx)
    vecs = step_vectors(laws, ctx, group)
    target = compose_all(group, ctx)
    d = group.order

    prefix = [np.zeros(d)]
    prefix[0][group.identity] = 1.0
    for v in vecs[:-1]:
        prefix.append(convolve_arrays(v, prefix[-1], group))
    suffix = [None] * L
    acc = np.zeros(d)
    acc[group.identity] = 1.0
    for step in range(L - 1, -1, -1):
        suffix[step] = acc
        acc = convolve_arrays(acc, vecs[step], group)
    success = float(acc[target])
    if success <= 0.0:
        raise UndefinedPosteriorError("success probability is zero")

    joint_a = np.empty(L)
    joint_b = np.empty(L)
    in_ctx = np.zeros(d, dtype=bool)
    in_ctx[list(ctx)] = True
    for step, v in enumerate(vecs):
        restricted = np.zeros(d)
        restricted[ctx[step]] = v[ctx[step]]
        joint_a[step] = evaluate_product(suffix[step], convolve_arrays(restricted, prefix[step], group), group, target)
        restricted = np.where(in_ctx, v, 0.0)
        restricted[ctx[step]] = 0.0
        joint_b[step] = evaluate_product(suffix[step], convolve_arrays(restricted, prefix[step], group), group, target)

    report = PosteriorReport(success, joint_a / success, joint_b / success, joint_a, joint_b)
    law = laws if isinstance(laws, StepLaw) else None
    if law is not None:
        if registry is None:
            try:
                registry = registry_for(group)
            except FileNotFoundError:
                registry = None
        c = 1.0 - 1.0 / d
        D = law.delta_main
        report.lead_success = 1.0 / d + c * D ** L
        report.lead_target = law.p1 / d + c * law.p1 * D ** (L - 1)
        report.lead_context = (L - 1) * law.p2 / d
        if registry is not None and registry.complete:
            report.sigma = sample_operator_norm(registry, ctx)
            report.gamma = spectral_decay_factor(registry, group.identity)
            report.bound_success, report.bound_target, report.bound_context = remainder_bounds(
                law, report.sigma, report.gamma)
    return report


def enumerate_posteriors(laws, context, group: GroupTable) -> tuple[float, np.ndarray, np.ndarray]:
    """Bayes-rule posteriors by explicit enumeration of action sequences."""
    import itertools

    ctx = _context_of(context)
    L = len(ctx)
    vecs = step_vectors(laws, ctx, group)
    target = compose_all(group, ctx)
    in_ctx = set(ctx)
    success = 0.0
    ja = np.zeros(L)
    jb = np.zeros(L)
    for seq in itertools.product(range(group.order), repeat=L):
        if compose_all(group, seq) != target:
            continue
        w = math.prod(vecs[k][a] for k, a in enumerate(seq))
        success += w
        for k, a in enumerate(seq):
            if a == ctx[k]:
                ja[k] += w
            elif a in in_ctx:
                jb[k] += w
    return success, ja / success, jb / success


def predicted_reward(delta_main: float, L: int, d: int, delta_context: float = 0.0,
                     sigma: float = 0.0) -> tuple[float, float]:
    """Leading-order reward and the half-width of its crude envelope."""
    c = 1.0 - 1.0 / d
    center = 1.0 / d + c * delta_main ** L
    if delta_context > 0:
        width = c * ((delta_main + sigma * delta_context) ** L - delta_main ** L)
    else:
        width = 0.0
    return center, width


def success_gradient_factor(attn: float, B: float) -> float:
    """Derivative of the target attention weight's effect on the log step law."""
    return B * attn * (1.0 - attn)


def exact_grad_q_instance(laws: StepLaw, attn: float, B: float, L: int, dpos: int, context,
                          group: GroupTable, report: PosteriorReport | None = None) -> float:
    """Per-entry gradient of the length-normalized reward of one instance along the aligned score.

    The success probability moves with the target attention through the
    posterior-minus-prior gaps of the correct transition and of the
    distractors; each aligned score entry is visited with probability
    ``1/dpos`` per step and the reward is divided by ``L``.
    """
    if report is None:
        report = posterior_probs(laws, context, group)
    p1, p2 = laws.p1, laws.p2
    gaps = (report.joint_target - p1 * report.success) + (p2 * report.success - report.joint_context / (L - 1))
    return success_gradient_factor(attn, B) * math.fsum(gaps) / (L * dpos)


def flat_region_bound(delta_main: float, delta_context: float, sigma: float, p1: float, p2: float,
                      L: int, d: int, dpos: int, B: float, attn: float | None = None) -> float:
    """Certified upper bound on the per-entry aligned gradient magnitude.

    Built from the crude envelopes ``|P(A,E) - p1/d| <= c p1 s^(L-1)``,
    ``|P(B,E) - (L-1)p2/d| <= c p2 sigma s^(L-1)`` and
    ``|P(E) - 1/d| <= c s^L`` with ``s = delta_main + sigma * delta_context``
    and ``c = 1 - 1/d``. Without ``attn`` the factor ``attn (1 - attn)`` is
    replaced by its maximum ``1/4``.
    """
    if L < 2:
        raise SpectralError("flat-region bound needs L >= 2")
    s = delta_main + sigma * delta_context
    c = 1.0 - 1.0 / d
    gate = 0.25 if attn is None else attn * (1.0 - attn)
    terms = (p1 * delta_main ** (L - 1) + p1 * s ** (L - 1)
             + p2 * s ** L + p2 * (sigma / (L - 1)) * s ** (L - 1))
    return (B / dpos) * gate * c * terms


def collision_probability(group: GroupTable, context, y0: int, yL: int, L: int | None = None) -> float:
    """Fraction of non-target in-context action sequences that still land on ``yL``.

    Counts sequences in ``context**L`` whose product maps ``y0`` to ``yL`` by a
    dynamic program over partial products, then removes the target sequence.
    """
    ctx = _context_of(context)
    L = len(ctx) if L is None else L
    total = len(ctx) ** L
    if total <= 1:
        return 0.0
    needed = int(group.table[yL, group.inverse[y0]])
    counts = np.zeros(group.order, dtype=object)
    counts[group.identity] = 1
    for _ in range(L):
        nxt = np.zeros(group.order, dtype=object)
        for h in ctx:
            np.add.at(nxt, group.table[h], counts)
        counts = nxt
    hits = int(counts[needed])
    if tuple(ctx) and compose_all(group, ctx) == needed:
        hits -= 1
    return hits / (total - 1)


# ---------------------------------------------------------------------------
# batched cyclic engine


def cyclic_basis(contexts: np.ndarray, d: int):
    """Transforms reused by :func:`cyclic_batch_stats` for a fixed set of cyclic contexts."""
    contexts = np.asarray(contexts, dtype=np.int64)
    k = np.arange(d)
    # e[i, l, k] = exp(-2 pi i g_l k / d), the transform of a point mass at g_l
    e = np.exp(-2j * np.pi * (contexts[:, :, None] * k[None, None, :] % d) / d)
    gstar = contexts.sum(axis=1) % d
    phase = np.exp(2j * np.pi * (np.outer(gstar, k) % d) / d) / d
    return e, e.sum(axis=1), phase


def cyclic_batch_stats(p1: float, p2: float, p3: float, contexts: np.ndarray, d: int, basis=None):
    """Success probabilities and posterior gaps for many cyclic-group instances at once.

    ``contexts`` has shape ``(n, L)``. Returns ``(success, gap)`` where
    ``gap[i]`` is the sum over steps of ``P(A,E) - p1 P(E) + p2 P(E) - P(B,E)/(L-1)``.
    The trivial frequency cancels in the gap, so it is summed over nontrivial
    frequencies only, which keeps it accurate when the gap is far below ``1/d``.
    """
    n, L = np.shape(contexts)
    e, s, phase = basis if basis is not None else cyclic_basis(contexts, d)
    mu = (p2 - p3) * s[:, None, :] + (p1 - p2) * e
    mu[:, :, 0] += p3 * d
    ones = np.ones((n, 1, d), dtype=complex)
    fwd = np.cumprod(np.concatenate([ones, mu[:, :-1]], axis=1), axis=1)
    bwd = np.cumprod(np.concatenate([ones, mu[:, :0:-1]], axis=1), axis=1)[:, ::-1]
    excl = fwd * bwd
    full = excl[:, 0] * mu[:, 0]
    success = np.einsum("nk,nk->n", full, phase).real
    gap_k = (excl * ((p1 + p2 / (L - 1)) * e - (p2 / (L - 1)) * s[:, None, :])).sum(axis=1) + L * (p2 - p1) * full
    gap = np.einsum("nk,nk->n", gap_k[:, 1:], phase[:, 1:]).real
    return success, gap


@dataclass(frozen=True, eq=False)
class FourierBasis:
    """Irrep matrices of a fixed batch of contexts, stacked by irrep dimension.

    ``blocks`` holds ``(dims, lam, total, target_adj)`` per dimension with
    ``lam`` of shape ``(n, m, L, k, k)`` for the ``m`` nontrivial irreps of
    size ``k``.
    """

    order: int
    horizon: int
    blocks: list


def fourier_basis(contexts: np.ndarray, registry: ReprRegistry, group: GroupTable) -> FourierBasis:
    registry.require_complete()
    contexts = np.asarray(contexts, dtype=np.int64)
    n, L = contexts.shape
    target = np.full(n, group.identity)
    for step in range(L):
        target = group.table[contexts[:, step], target]
    blocks = []
    for k in sorted({ir.dimension for ir in registry.nontrivial()}):
        irreps = [ir for ir in registry.nontrivial() if ir.dimension == k]
        mats = np.stack([ir.matrices for ir in irreps])  # (m, d, k, k)
        if not np.abs(mats.imag).any():
            mats = mats.real
        lam = np.moveaxis(mats[:, contexts], 0, 1)  # (n, m, L, k, k)
        target_adj = np.moveaxis(mats[:, target].conj().swapaxes(-1, -2), 0, 1)
        blocks.append((np.full(len(irreps), k), lam, lam.sum(axis=2), target_adj))
    return FourierBasis(group.order, L, blocks)


def fourier_batch_stats(p1: float, p2: float, p3: float, basis: FourierBasis):
    """Success probabilities and posterior gaps from products of irrep coefficients.

    Works for any group with a complete registry and agrees with
    :func:`cyclic_batch_stats` on cyclic groups. The trivial irrep
    contributes ``1/d`` to the success and nothing to the gap.
    """
    d, L = basis.order, basis.horizon
    n = basis.blocks[0][1].shape[0] if basis.blocks else 0
    success = np.full(n, 1.0 / d)
    gap = np.zeros(n)
    for dims, lam, total, target_adj in basis.blocks:
        mu = (p2 - p3) * total[:, :, None] + (p1 - p2) * lam
        restricted = (p1 + p2 / (L - 1)) * lam - (p2 / (L - 1)) * total[:, :, None]
        k = lam.shape[-1]
        acc = np.broadcast_to(np.eye(k, dtype=lam.dtype), lam.shape[:2] + (k, k))
        inner = np.zeros_like(acc)
        for step in range(L):
            # inner accumulates sum_j mu_L..mu_{j+1} restricted_j mu_{j-1}..mu_1
            inner = mu[:, :, step] @ inner + restricted[:, :, step] @ acc
            acc = mu[:, :, step] @ acc
        inner = inner + L * (p2 - p1) * acc
        weight = dims[None, :] / d
        success += (weight * np.einsum("nmij,nmji->nm", acc, target_adj).real).sum(axis=1)
        gap += (weight * np.einsum("nmij,nmji->nm", inner, target_adj).real).sum(axis=1)
    return success, gap
