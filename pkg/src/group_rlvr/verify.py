"""Verification suites.

``fast`` runs the small-group oracle and invariant checks (orders up to 12).
``full`` adds the end-to-end checks at order 96: exact-versus-Monte-Carlo
consistency, reduced learning dynamics and the bundled training presets.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import preset
from .dynamics import (InstancePool, PhaseTimeline, classify_regime, critical_q, first_crossing, horizon_stats,
                       integrate_reduced)
from .groups import build_cyclic, compose_all, group_from_name, is_latin_square
from .policy import (FullAttention, MlpConfig, ReducedAttention, batch_rollout, build_pretrained_W,
                     literal_mlp_logits, reduced_step_law, step_distribution, step_logits, step_probabilities)
from .spectral import (enumerate_posteriors, enumerate_success, exact_grad_q_instance, flat_region_bound,
                       fourier_success_probability, posterior_probs, registry_for, sample_operator_norm,
                       success_probability)
from .tasks import Instance, Tokenizer, new_position_space, sample_batch, sample_instance, validate_instance
from .train import horizon_set, reinforce_gradient, run_training


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.1f}s): {self.detail}"


def timed(name: str, fn) -> Check:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(name, bool(passed), detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# small-group suite


def check_group_tables():
    bad = []
    for name in ("Z12", "D6", "S3", "A4", "S4"):
        G = group_from_name(name)
        t = G.table
        assoc = (t[t[:, :, None], np.arange(G.order)[None, None, :]]
                 == t[np.arange(G.order)[:, None, None], t[None, :, :]]).all()
        inv_ok = (t[np.arange(G.order), G.inverse] == G.identity).all()
        if not (is_latin_square(G) and assoc and inv_ok):
            bad.append(name)
    return not bad, f"failing groups: {bad}" if bad else "5 groups associative, Latin, with inverses"


def check_instances(n: int = 300):
    problems = []
    for name in ("Z12", "S3"):
        G = group_from_name(name)
        space = new_position_space(9, 1)
        rng = np.random.default_rng(0)
        for _ in range(n):
            inst = sample_instance(G, space, int(rng.integers(2, min(G.order, 8) + 1)), rng)
            problems += validate_instance(inst, G, space)
        batch = sample_batch(G, space, rng.integers(2, min(G.order, 8) + 1, size=n), rng)
        for i in range(batch.size):
            L = int(batch.lengths[i])
            if not (batch.answers[i, :L] == space.align[batch.prompts[i, :L]]).all():
                problems.append("batched answer position not aligned")
            if batch.final[i] != G.table[compose_all(G, batch.transitions[i, :L]), batch.y0[i]]:
                problems.append("batched final state wrong")
    return not problems, f"{len(problems)} violations" + (f", first: {problems[0]}" if problems else "")


def check_convolution_oracle(max_d: int = 8, max_L: int = 4, tol: float = 1e-10):
    worst = 0.0
    rng = np.random.default_rng(1)
    count = 0
    for name in [f"Z{d}" for d in range(2, max_d + 1)] + ["S3", "D4"]:
        G = group_from_name(name)
        for L in range(1, min(max_L, G.order) + 1):
            ctx = rng.permutation(G.order)[:L]
            law = step_probabilities(float(rng.random()), L, G.order, 3.0)
            worst = max(worst, abs(success_probability(law, ctx, G) - enumerate_success(law, ctx, G)))
            vecs = [rng.dirichlet(np.ones(G.order)) for _ in range(L)]
            worst = max(worst, abs(success_probability(vecs, ctx, G) - enumerate_success(vecs, ctx, G)))
            count += 2
    return worst <= tol, f"{count} cases, max deviation {worst:.2e} (tol {tol:g})"


def check_fourier_oracle(tol: float = 1e-9):
    worst = 0.0
    rng = np.random.default_rng(2)
    for name in ("Z5", "Z12", "S3", "D4", "A4"):
        G = group_from_name(name)
        reg = registry_for(G)
        for L in range(2, min(5, G.order) + 1):
            ctx = rng.permutation(G.order)[:L]
            vecs = [rng.dirichlet(np.ones(G.order)) for _ in range(L)]
            worst = max(worst, abs(fourier_success_probability(vecs, ctx, G, reg) - success_probability(vecs, ctx, G)))
    return worst <= tol, f"max deviation {worst:.2e} (tol {tol:g})"


def check_posteriors(tol: float = 1e-10):
    worst = 0.0
    rng = np.random.default_rng(3)
    for name in ("Z6", "S3", "D4"):
        G = group_from_name(name)
        for L in (2, 3):
            ctx = rng.permutation(G.order)[:L]
            law = step_probabilities(float(rng.random()), L, G.order, 3.0)
            rep = posterior_probs(law, ctx, G)
            succ, ra, rb = enumerate_posteriors(law, ctx, G)
            worst = max(worst, abs(rep.success - succ), np.abs(rep.rho_target - ra).max(),
                        np.abs(rep.rho_context - rb).max())
    return worst <= tol, f"max deviation {worst:.2e}"


def _random_q(rng, dpos: int) -> FullAttention:
    return FullAttention(rng.normal(0.0, 2.0, (dpos, dpos)))


def check_mlp_equivalence(orders=(6, 8, 12), lengths=(2, 3, 4), n_q: int = 100):
    names = {6: "S3", 8: "D4", 12: "A4"}
    mismatches = cases = 0
    rng = np.random.default_rng(4)
    for d in orders:
        G = group_from_name(names.get(d, f"Z{d}"))
        mlp_cfg = MlpConfig(G.order, 3.0)
        tok = Tokenizer.random(G.order, d)
        mlp = build_pretrained_W(G, tok, mlp_cfg)
        W = mlp.materialize()
        space = new_position_space(8, d)
        for L in lengths:
            for _ in range(n_q):
                Q = _random_q(rng, space.dpos)
                inst = sample_instance(G, space, L, rng)
                for state in range(G.order):
                    for step in range(L):
                        a = step_logits(Q, mlp, inst, state, step, space)
                        b = literal_mlp_logits(W, inst, state, step, Q, space)
                        mismatches += int(not np.array_equal(a, b))
                        cases += 1
    return mismatches == 0, f"{mismatches} mismatches over {cases} (state, step) pairs"


def check_atomic_skill(d: int = 96, C_B: float = 3.0, n_q: int = 5, tol: float = 1e-12):
    G = build_cyclic(d)
    mlp = build_pretrained_W(G, Tokenizer.identity(d), MlpConfig(d, C_B))
    space = new_position_space(8, 0)
    rng = np.random.default_rng(5)
    closed = d ** C_B / (d ** C_B + d - 1)
    worst = 0.0
    smallest = 1.0
    for _ in range(n_q):
        g, y0, xp = int(rng.integers(d)), int(rng.integers(d)), int(rng.integers(space.dpos))
        last = (int(space.align[xp]) + 1) % space.dpos
        inst = Instance.build(G, space, [g], [xp], y0, last)
        dist = step_distribution(_random_q(rng, space.dpos), mlp, inst, y0, 0, space)
        p = float(dist.probs[dist.target_class])
        worst = max(worst, abs(p - closed))
        smallest = min(smallest, p)
    ok = worst <= tol and smallest > 1 - d ** -2.0
    return ok, f"max |pi - closed form| = {worst:.2e}, min pi = {smallest:.12f} > 1 - d^-2 = {1 - d ** -2.0:.12f}"


def _fd_grad(q, r, L, d, C_B, dpos, ctx, G, h=1e-3):
    # five-point stencil: a two-point difference is roundoff limited where the gradient nearly vanishes
    def J(qq):
        law, _ = reduced_step_law(qq, r, L, d, C_B)
        return success_probability(law, ctx, G)
    slope = (-J(q + 2 * h) + 8 * J(q + h) - 8 * J(q - h) + J(q - 2 * h)) / (12 * h)
    return slope / (L * dpos)


def check_gradient_fd(n: int = 200, rel_tol: float = 1e-6):
    rng = np.random.default_rng(6)
    names = ["Z6", "S3", "Z8", "D4", "Z12", "A4", "D6"]
    worst = 0.0
    dpos = 16
    for _ in range(n):
        G = group_from_name(names[int(rng.integers(len(names)))])
        d = G.order
        L = int(rng.integers(2, 5))
        C_B = float(rng.choice([2.0, 3.0, 4.0]))
        q, r = float(rng.uniform(-1, 4)), float(rng.uniform(-1, 1))
        ctx = rng.permutation(d)[:L]
        law, attn = reduced_step_law(q, r, L, d, C_B)
        exact = exact_grad_q_instance(law, attn, C_B * math.log(d), L, dpos, ctx, G)
        fd = _fd_grad(q, r, L, d, C_B, dpos, ctx, G)
        worst = max(worst, abs(exact - fd) / max(abs(exact), 1e-300))
    return worst <= rel_tol, f"{n} configs, max relative error {worst:.2e} (tol {rel_tol:g})"


def check_reinforce_unbiased(samples: int = 100_000, batch: int = 1000, q: float = 0.5, sigmas: float = 3.0):
    G = group_from_name("S3")
    d, L, C_B = G.order, 3, 3.0
    space = new_position_space(8, 7)
    mlp = MlpConfig(d, C_B)
    params = ReducedAttention(q, 0.0)
    law, attn = reduced_step_law(q, 0.0, L, d, C_B)
    # expectation over every ordered context; the start state does not matter
    exact = np.mean([exact_grad_q_instance(law, attn, mlp.B, L, space.dpos, ctx, G) * space.dpos
                     for ctx in itertools.permutations(range(d), L)])
    rng = np.random.default_rng(8)
    means = []
    for _ in range(samples // batch):
        b = sample_batch(G, space, np.full(batch, L), rng)
        roll = batch_rollout(params, mlp, G, b, space, rng)
        means.append(reinforce_gradient(roll, b, 0.0, 0.0, space, params)[0])
    means = np.array(means)
    se = means.std(ddof=1) / math.sqrt(means.size)
    z = abs(means.mean() - exact) / se
    return z <= sigmas, f"estimate {means.mean():.5f} vs exact {exact:.5f}, |z| = {z:.2f} (limit {sigmas:g})"


def check_batch_vs_exact(n_batches: int = 40, batch: int = 2000):
    G = group_from_name("D6")
    d, L = G.order, 4
    space = new_position_space(10, 2)
    mlp = MlpConfig(d, 3.0)
    params = ReducedAttention(1.5, 0.0)
    law, _ = reduced_step_law(1.5, 0.0, L, d, 3.0)
    exact = np.mean([success_probability(law, c, G) for c in itertools.permutations(range(d), L)])
    rng = np.random.default_rng(9)
    wins = [batch_rollout(params, mlp, G, sample_batch(G, space, np.full(batch, L), rng), space, rng).reward.mean()
            for _ in range(n_batches)]
    est = float(np.mean(wins))
    sd = math.sqrt(exact * (1 - exact) / (n_batches * batch))
    return abs(est - exact) <= 4 * sd, f"rollout {est:.4f} vs exact {exact:.4f} (4 sd = {4 * sd:.4f})"


def check_threshold_algebra():
    errs = [abs(critical_q(L, 0.5, 96, 3.0, mode="attention") - math.log(L - 1)) for L in (2, 5, 45)]
    gap_ok = all(critical_q(15, xi, 96, 3.0)[0] < critical_q(45, xi, 96, 3.0)[0] for xi in (0.5, 0.1))
    return max(errs) < 1e-12 and gap_ok, f"attention-mode error {max(errs):.1e}, thresholds increase with L"


FAST = [
    ("group tables", check_group_tables),
    ("instance validation and alignment", check_instances),
    ("convolution equals enumeration", check_convolution_oracle),
    ("Fourier path equals convolution", check_fourier_oracle),
    ("posteriors equal enumeration", check_posteriors),
    ("structured and literal MLP agree", functools.partial(check_mlp_equivalence, orders=(6, 8), lengths=(2, 3),
                                                           n_q=5)),
    ("atomic skill closed form", functools.partial(check_atomic_skill, d=12)),
    ("gradient matches finite differences", functools.partial(check_gradient_fd, n=40)),
    ("batched rollouts match exact success", check_batch_vs_exact),
    ("critical threshold algebra", check_threshold_algebra),
]


# ---------------------------------------------------------------------------
# end-to-end checks at order 96


def check_posterior_bounds(n: int = 1000):
    rng = np.random.default_rng(10)
    names = ([f"Z{d}" for d in (2, 3, 5, 8, 12, 17, 24, 31, 48, 60)]
             + ["S3", "A4", "S4", "A5", "D5", "D12", "D30"])
    violations = []
    for i in range(n):
        name = names[int(rng.integers(len(names)))]
        G = group_from_name(name)
        d = G.order
        L = int(rng.integers(1, min(6, d) + 1))
        law = step_probabilities(float(rng.random()), L, d, float(rng.choice([2.0, 3.0, 4.0])))
        ctx = rng.permutation(d)[:L]
        rep = posterior_probs(law, ctx, G)
        slack = 1e-12
        if abs(rep.success - rep.lead_success) > rep.bound_success + slack:
            violations.append((i, name, L, "E"))
        if np.any(np.abs(rep.joint_target - rep.lead_target) > rep.bound_target + slack):
            violations.append((i, name, L, "A"))
        if L > 1 and np.any(np.abs(rep.joint_context - rep.lead_context) > rep.bound_context + slack):
            violations.append((i, name, L, "B"))
    return not violations, f"{len(violations)} violations over {n} configs" + (
        f", first {violations[0]}" if violations else "")


def check_flat_region(group_name: str = "D48", C_B: float = 3.0, dpos: int = 64, n_ctx: int = 32,
                      rollouts: int = 100_000, orders_gap: float = 10.0):
    G = group_from_name(group_name)
    d = G.order
    reg = registry_for(G)
    B = C_B * math.log(d)
    rng = np.random.default_rng(11)
    pool = InstancePool.sample(G, [5], n_ctx, rng)
    g5 = abs(horizon_stats(0.0, 0.0, 5, pool, C_B)[1] / (5 * dpos))
    law, attn = reduced_step_law(0.0, 0.0, 45, d, C_B)
    bound = 0.0
    for _ in range(n_ctx):
        ctx = rng.permutation(d)[:45]
        sigma = sample_operator_norm(reg, ctx)
        bound = max(bound, flat_region_bound(law.delta_main, law.delta_context, sigma, law.p1, law.p2, 45, d, dpos,
                                             B, attn))
    gap_orders = math.log10(g5 / bound) if bound > 0 and g5 > 0 else (math.inf if g5 > 0 else -math.inf)
    space = new_position_space(dpos, 12)
    mlp = MlpConfig(d, C_B)
    wins = 0
    batch = 1000
    for _ in range(rollouts // batch):
        b = sample_batch(G, space, np.full(batch, 45), rng)
        wins += batch_rollout(FullAttention.zeros(dpos), mlp, G, b, space, rng).reward.sum()
    rate = wins / rollouts
    sd = math.sqrt((1 / d) * (1 - 1 / d) / rollouts)
    ok = gap_orders >= orders_gap and abs(rate - 1 / d) <= 4 * sd
    return ok, (f"{group_name}: L=5 gradient {g5:.3e}, L=45 bound {bound:.3e} ({gap_orders:.1f} orders); "
                f"L=45 rollout success {rate:.5f} vs 1/d = {1 / d:.5f} +- {4 * sd:.5f}")


def check_fixed_length(budget: int | None = None, lengths=(5, 45)):
    cfg = preset("fig4")
    group = group_from_name(cfg.group)
    space = new_position_space(cfg.dpos, cfg.position_seed)
    mlp = MlpConfig(group.order, cfg.C_B)
    train = cfg.train if budget is None else replace(cfg.train, iterations=budget)
    peaks = {}
    for L in lengths:
        records, _ = run_training(replace(train, lengths=(L,), seed=cfg.seed), group, space, mlp)
        peaks[L] = (max(r.success[L] for r in records), max(r.hit_rate[L] for r in records))
    short, long_ = peaks[min(lengths)], peaks[max(lengths)]
    ok = short[0] >= 0.95 and short[1] >= 0.9 and long_[0] <= 0.05 and long_[1] <= 0.05
    return ok, (f"budget {train.iterations}: L={min(lengths)} peak success {short[0]:.3f}, hit {short[1]:.3f}; "
                f"L={max(lengths)} peak success {long_[0]:.4f}, hit {long_[1]:.4f}")


def check_mixed_difficulty():
    from .harness import analyze_run, metrics_line

    results = {}
    for name in ("fig5a", "fig5b"):
        cfg = preset(name)
        group = group_from_name(cfg.group)
        space = new_position_space(cfg.dpos, cfg.position_seed)
        mlp = MlpConfig(group.order, cfg.C_B)
        records, _ = run_training(cfg.train_config(cfg.resolved_lengths()), group, space, mlp)
        recs = [json.loads(metrics_line(r, name, group.order)) for r in records]
        results[name] = (records, analyze_run(name, recs))
    a_records, a_an = results["fig5a"]
    b_records, b_an = results["fig5b"]
    a_peak = max(r.success[45] for r in a_records)
    b_peak = max(r.success[35] for r in b_records)
    ok = (a_peak >= 0.9 and b_peak <= 0.05 and a_an.report.label == "relay"
          and b_an.report.label == "grokking")
    return ok, (f"L3 run: L=45 peak {a_peak:.3f}, label {a_an.report.label} (stat {a_an.report.statistic}); "
                f"L7 run: L=35 peak {b_peak:.4f}, label {b_an.report.label} (stat {b_an.report.statistic})")


DYNAMICS = dict(group="D48", lr=500.0, steps=8000, C_B=3.0, dpos=64, mc_instances=32, seed=0)


@functools.lru_cache(maxsize=None)
def reduced_run(R: float, **overrides) -> PhaseTimeline:
    p = {**DYNAMICS, **overrides}
    G = group_from_name(p["group"])
    lengths = horizon_set(R, 5, 45)
    return integrate_reduced(0.0, 0.0, p["lr"], lengths, p["steps"], G.order, p["dpos"], p["C_B"],
                             p["mc_instances"], p["seed"], G, stop_when_mastered=True, patience=20)


def check_phase_structure(ratios=(2.0, 7.0), factor: float = 10.0):
    details, ok = [], True
    max_plateau = {}
    for R in ratios:
        tl = reduced_run(R)
        rep = classify_regime(tl.lengths, tl.t_vis, tl.t_mas, tl.plateaus, R, end=int(tl.t[-1]))
        plats = [p for p in tl.plateaus if p is not None]
        max_plateau[R] = max(plats) if plats else None
        mas = [tl.t_mas[L] for L in tl.lengths]
        ordered = None not in mas and all(a <= b for a, b in zip(mas, mas[1:]))
        sharp = all(lab != "grokking" or rise <= 0.1 * plat
                    for lab, rise, plat in zip(rep.transition_labels, rep.rises[1:], rep.plateaus))
        monotone_q = bool((np.diff(tl.q) >= 0).all())
        ok &= ordered and sharp and monotone_q
        details.append(f"R={R:g}: T_mas={mas} plateaus={tl.plateaus} rises={rep.rises} labels={rep.transition_labels}"
                       f" q nondecreasing={monotone_q}")
    lo, hi = max_plateau[min(ratios)], max_plateau[max(ratios)]
    ratio_ok = hi is not None and (lo is None or lo <= 0 or hi >= factor * lo)
    ok &= ratio_ok
    return ok, f"max plateau R={max(ratios):g}: {hi}, R={min(ratios):g}: {lo}; " + "; ".join(details)


def crossing_offsets(tl: PhaseTimeline, xis=(0.5, 0.1, 0.01), d: int = 96, C_B: float = 3.0):
    """Iteration offsets between the reward crossing and the logit-gap crossing of the critical score."""
    gap = tl.q - tl.r
    out = []
    for L in tl.lengths:
        for xi in xis:
            crit, _ = critical_q(L, xi, d, C_B)
            tj = first_crossing(tl.rewards[L], 1 - xi)
            ts = first_crossing(gap, crit)
            out.append((L, xi, tj, ts, None if tj is None or ts is None else tj - ts))
    return out


def check_critical_threshold(ratios=(2.0, 7.0)):
    bad, total = [], 0
    for R in ratios:
        for L, xi, tj, ts, off in crossing_offsets(reduced_run(R)):
            total += 1
            if off is None or abs(off) > 1:
                bad.append(f"R={R:g} L={L} xi={xi}: reward at {tj}, threshold at {ts}")
    return not bad, f"{total - len(bad)}/{total} crossings within one step" + (f"; misses: {bad}" if bad else "")


ACCEPTANCE = [
    ("atomic skill exactness", check_atomic_skill),
    ("structured and literal MLP equivalence", check_mlp_equivalence),
    ("oracle equivalence", lambda: _all(check_convolution_oracle(), check_fourier_oracle())),
    ("posterior expansion bounds", check_posterior_bounds),
    ("gradient identity", lambda: _all(check_gradient_fd(), check_reinforce_unbiased())),
    ("flat region at initialization", check_flat_region),
    ("fixed-length training", check_fixed_length),
    ("mixed-difficulty training", check_mixed_difficulty),
    ("phase structure of reduced dynamics", check_phase_structure),
    ("critical threshold consistency", check_critical_threshold),
]


def _all(*results):
    return all(ok for ok, _ in results), "; ".join(detail for _, detail in results)


def run_suite(level: str = "fast", log=None) -> list[Check]:
    if level not in ("fast", "full"):
        raise ValueError(f"unknown level {level!r}")
    suite = FAST + (ACCEPTANCE if level == "full" else [])
    checks = []
    for name, fn in suite:
        c = timed(name, fn)
        checks.append(c)
        if log:
            log(c)
    return checks


def format_report(checks: list[Check]) -> str:
    passed = sum(c.passed for c in checks)
    lines = [c.line() for c in checks]
    lines.append(f"{passed}/{len(checks)} checks passed")
    return "\n".join(lines)
