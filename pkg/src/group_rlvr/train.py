"""REINFORCE and teacher-forced trainers over fixed and mixed horizon distributions."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from .groups import GroupTable
from .policy import (BatchRollout, FullAttention, MlpConfig, ReducedAttention, Trajectory,
                     batch_rollout)
from .tasks import Instance, InstanceBatch, PositionSpace, batch_from_instances, sample_batch


class ConfigError(ValueError):
    pass


class InstabilityError(RuntimeError):
    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


def horizon_set(R: float, L1: int, L_max: int) -> list[int]:
    """Horizons ``L_k = min(ceil(R * L_{k-1}), L_max)`` starting at ``L1`` until ``L_max``."""
    if not R > 1:
        raise ConfigError(f"difficulty ratio must exceed 1, got {R}")
    if not 2 <= L1 <= L_max:
        raise ConfigError(f"need 2 <= L1 <= L_max, got L1={L1}, L_max={L_max}")
    out = [L1]
    while out[-1] < L_max:
        # guard against float noise such as 3 * 5 = 15.000000000000002
        out.append(min(math.ceil(R * out[-1] - 1e-9), L_max))
    return out


@dataclass
class TrainConfig:
    lr: float = 0.5
    batch_size: int = 512
    iterations: int = 2000
    lengths: tuple[int, ...] = (5,)
    ema_momentum: float = 0.95
    entropy_coef: float = 1e-3
    eval_every: int = 50
    eval_batches: int = 30
    eval_batch_size: int = 512
    seed: int = 0
    parametrization: str = "full"
    trainer: str = "rl"
    eval_mode: str = "greedy"

    def __post_init__(self) -> None:
        self.lengths = tuple(int(L) for L in self.lengths)
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0 <= self.ema_momentum < 1:
            raise ConfigError("baseline momentum must lie in [0, 1)")
        if self.entropy_coef < 0:
            raise ConfigError("entropy coefficient must be nonnegative")
        if self.batch_size < 1 or self.iterations < 0 or not self.lengths:
            raise ConfigError("batch size, iteration budget and length set must be nonempty")
        if self.parametrization not in ("full", "reduced"):
            raise ConfigError(f"unknown parametrization {self.parametrization!r}")
        if self.trainer not in ("rl", "sft"):
            raise ConfigError(f"unknown trainer {self.trainer!r}")
        if self.eval_mode not in ("greedy", "sample"):
            raise ConfigError(f"unknown evaluation mode {self.eval_mode!r}")


@dataclass
class EmaBaseline:
    momentum: float = 0.95
    value: float = 0.0

    def update(self, batch_mean: float) -> None:
        self.value = self.momentum * self.value + (1.0 - self.momentum) * batch_mean


@dataclass
class TrainState:
    params: FullAttention | ReducedAttention
    baseline: EmaBaseline
    rng: np.random.Generator
    iteration: int = 0
    reward_history: list[float] = field(default_factory=list)


@dataclass
class EvalRecord:
    iteration: int
    success: dict[int, float]
    hit_rate: dict[int, float]
    q_mean: float
    r_mean: float
    wall: float

    def to_json(self) -> str:
        rec = asdict(self)
        rec["success"] = {str(k): v for k, v in self.success.items()}
        rec["hit_rate"] = {str(k): v for k, v in self.hit_rate.items()}
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EvalRecord":
        rec = json.loads(line)
        return cls(int(rec["iteration"]), {int(k): float(v) for k, v in rec["success"].items()},
                   {int(k): float(v) for k, v in rec["hit_rate"].items()}, float(rec["q_mean"]),
                   float(rec["r_mean"]), float(rec["wall"]))


def initial_state(config: TrainConfig, dpos: int) -> TrainState:
    params = FullAttention.zeros(dpos) if config.parametrization == "full" else ReducedAttention()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
    return TrainState(params, EmaBaseline(config.ema_momentum), rng)


def score_summary(params, space: PositionSpace) -> tuple[float, float]:
    """Mean aligned and mean off-aligned score."""
    if isinstance(params, ReducedAttention):
        return params.q, params.r
    Q = params.Q
    aligned = Q[space.align, np.arange(space.dpos)]
    off = (Q.sum() - aligned.sum()) / (space.dpos * (space.dpos - 1))
    return float(aligned.mean()), float(off)


# ---------------------------------------------------------------------------
# gradients


def scatter_grad(weights: np.ndarray, batch: InstanceBatch, space: PositionSpace, params):
    """Sum per-step score gradients ``(n, Lmax, Lmax)`` into parameter space.

    Full parameters receive a ``dpos x dpos`` matrix; reduced parameters the
    pair of sums over aligned and off-aligned position pairs.
    """
    n, Lmax, _ = weights.shape
    xa = batch.answers[:, :Lmax]
    if isinstance(params, ReducedAttention):
        aligned = space.align[batch.prompts][:, None, :] == xa[:, :, None]
        return float(weights[aligned].sum()), float(weights[~aligned].sum())
    idx = (xa[:, :, None] * space.dpos + batch.prompts[:, None, :]).ravel()
    flat = np.bincount(idx, weights.ravel(), space.dpos * space.dpos)
    return flat.reshape(space.dpos, space.dpos)


def _apply(params, grad, lr: float, dpos: int):
    """Ascend along ``grad``; reduced scores move by the per-entry mean of their group."""
    if isinstance(params, ReducedAttention):
        gq, gr = grad
        return ReducedAttention(params.q + lr * gq / dpos, params.r + lr * gr / (dpos * (dpos - 1)))
    # overflow is reported by _check_finite
    with np.errstate(over="ignore", invalid="ignore"):
        return FullAttention(params.Q + lr * grad)


def _check_finite(params, partial=None) -> None:
    vals = np.asarray([params.q, params.r]) if isinstance(params, ReducedAttention) else params.Q
    if not np.isfinite(vals).all():
        raise InstabilityError("non-finite attention scores", partial)


def _replay_choices(traj: Trajectory, inst: Instance, group: GroupTable) -> np.ndarray:
    if len(traj.actions) != inst.horizon or len(traj.states) != inst.horizon:
        raise ValueError("trajectory length differs from instance horizon")
    y = inst.y0
    for a, s in zip(traj.actions, traj.states):
        y = int(group.table[a, y])
        if y != s:
            raise ValueError("trajectory actions and states are inconsistent")
    pos = {g: i for i, g in enumerate(inst.transitions)}
    return np.array([[pos.get(a, -1) for a in traj.actions]])


def score_function_grad(traj: Trajectory, inst: Instance, params, mlp: MlpConfig, group: GroupTable,
                        space: PositionSpace):
    """Gradient of the trajectory log-probability with respect to the attention scores."""
    batch = batch_from_instances([inst])
    roll = batch_rollout(params, mlp, group, batch, space, None, forced=_replay_choices(traj, inst, group))
    return scatter_grad(roll.score_grad, batch, space, params)


def reinforce_gradient(roll: BatchRollout, batch: InstanceBatch, baseline: float, entropy_coef: float,
                       space: PositionSpace, params):
    """Batch-mean surrogate gradient: advantage-weighted score plus the mean-entropy bonus."""
    L = batch.lengths[:, None, None].astype(float)
    adv = (roll.reward - baseline)[:, None, None]
    w = (adv * roll.score_grad + entropy_coef * roll.entropy_grad) / L
    g = scatter_grad(w, batch, space, params)
    n = batch.size
    return (g[0] / n, g[1] / n) if isinstance(g, tuple) else g / n


def reinforce_step(state: TrainState, batch: InstanceBatch, config: TrainConfig, mlp: MlpConfig,
                   group: GroupTable, space: PositionSpace) -> TrainState:
    roll = batch_rollout(state.params, mlp, group, batch, space, state.rng, mode="sample")
    grad = reinforce_gradient(roll, batch, state.baseline.value, config.entropy_coef, space, state.params)
    state.params = _apply(state.params, grad, config.lr, space.dpos)
    _check_finite(state.params)
    mean_reward = float(roll.reward.mean())
    state.baseline.update(mean_reward)
    state.reward_history.append(mean_reward)
    state.iteration += 1
    return state


def sft_gradient(params, mlp: MlpConfig, group: GroupTable, batch: InstanceBatch, space: PositionSpace):
    """Gradient of the mean per-step teacher-forced cross-entropy loss."""
    forced = np.tile(np.arange(batch.max_len), (batch.size, 1))
    roll = batch_rollout(params, mlp, group, batch, space, None, forced=forced)
    w = -roll.score_grad / batch.lengths[:, None, None]
    g = scatter_grad(w, batch, space, params)
    n = batch.size
    loss = float((-roll.logprob.sum(axis=1) / batch.lengths).mean())
    return ((g[0] / n, g[1] / n) if isinstance(g, tuple) else g / n), loss


def sft_step(state: TrainState, batch: InstanceBatch, config: TrainConfig, mlp: MlpConfig,
             group: GroupTable, space: PositionSpace) -> TrainState:
    grad, loss = sft_gradient(state.params, mlp, group, batch, space)
    neg = (-grad[0], -grad[1]) if isinstance(grad, tuple) else -grad
    state.params = _apply(state.params, neg, config.lr, space.dpos)
    _check_finite(state.params)
    state.reward_history.append(-loss)
    state.iteration += 1
    return state


# ---------------------------------------------------------------------------
# evaluation and loop


def evaluate(params, mlp: MlpConfig, group: GroupTable, space: PositionSpace, lengths, n_batches: int,
             batch_size: int, rng: np.random.Generator, mode: str = "greedy", iteration: int = 0) -> EvalRecord:
    start = time.perf_counter()
    success, hits = {}, {}
    for L in lengths:
        s_tot = h_tot = 0.0
        for _ in range(n_batches):
            batch = sample_batch(group, space, np.full(batch_size, L), rng)
            roll = batch_rollout(params, mlp, group, batch, space, rng, mode=mode)
            s_tot += roll.reward.mean()
            h_tot += roll.hits.sum() / roll.active.sum()
        success[int(L)] = float(s_tot / n_batches)
        hits[int(L)] = float(h_tot / n_batches)
    q, r = score_summary(params, space)
    return EvalRecord(iteration, success, hits, q, r, time.perf_counter() - start)


def iter_training(config: TrainConfig, group: GroupTable, space: PositionSpace, mlp: MlpConfig,
                  eval_lengths=None, state: TrainState | None = None) -> Iterator[EvalRecord | TrainState]:
    """Yield an EvalRecord every ``eval_every`` iterations and the final TrainState last."""
    state = state or initial_state(config, space.dpos)
    eval_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    eval_lengths = tuple(eval_lengths or config.lengths)
    step = reinforce_step if config.trainer == "rl" else sft_step
    lengths = np.asarray(config.lengths)
    while True:
        if config.eval_every and state.iteration % config.eval_every == 0 or state.iteration == config.iterations:
            yield evaluate(state.params, mlp, group, space, eval_lengths, config.eval_batches,
                           config.eval_batch_size, eval_rng, mode=config.eval_mode, iteration=state.iteration)
        if state.iteration >= config.iterations:
            break
        per_sample = state.rng.choice(lengths, config.batch_size)
        batch = sample_batch(group, space, per_sample, state.rng)
        state = step(state, batch, config, mlp, group, space)
    yield state


def run_training(config: TrainConfig, group: GroupTable, space: PositionSpace, mlp: MlpConfig,
                 eval_lengths=None, on_record: Callable[[EvalRecord], None] | None = None):
    records = []
    final = None
    for item in iter_training(config, group, space, mlp, eval_lengths):
        if isinstance(item, EvalRecord):
            records.append(item)
            if on_record:
                on_record(item)
        else:
            final = item
    return records, final


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState) -> None:
    p = state.params
    params = {"kind": "reduced", "q": p.q, "r": p.r} if isinstance(p, ReducedAttention) else {
        "kind": "full", "Q": p.Q.tolist()}
    payload = {"iteration": state.iteration, "params": params, "baseline": state.baseline.value,
               "momentum": state.baseline.momentum, "rng": state.rng.bit_generator.state}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> TrainState:
    with open(path) as fh:
        payload = json.load(fh)
    pp = payload["params"]
    params = ReducedAttention(pp["q"], pp["r"]) if pp["kind"] == "reduced" else FullAttention(np.array(pp["Q"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    return TrainState(params, EmaBaseline(payload["momentum"], payload["baseline"]), rng, payload["iteration"])
