"""One-layer attention policy with a fixed structured MLP.

At step ``k`` the answer position ``x_a[k]`` attends over the prompt
positions with scores ``Q[x_a[k], x_p[l]]``. The MLP has one designated
neuron per (transition, state) pair, so the logit of the class reached by
applying in-context transition ``g_l`` to the current state is
``attn_l * B + sigma0`` and every other class gets ``sigma0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .groups import GroupTable
from .spectral import StepLaw
from .tasks import Instance, InstanceBatch, PositionSpace, Tokenizer

LITERAL_MAX_ORDER = 16


@dataclass(frozen=True)
class MlpConfig:
    order: int
    C_B: float = 3.0

    @property
    def B(self) -> float:
        return self.C_B * math.log(self.order)

    @property
    def sigma0(self) -> float:
        return self.order ** -0.5


@dataclass(frozen=True, eq=False)
class FullAttention:
    Q: np.ndarray

    @classmethod
    def zeros(cls, dpos: int) -> "FullAttention":
        return cls(np.zeros((dpos, dpos)))


@dataclass(frozen=True)
class ReducedAttention:
    """Aligned score ``q`` and off-aligned score ``r`` shared by every position pair."""

    q: float = 0.0
    r: float = 0.0

    def to_full(self, space: PositionSpace) -> FullAttention:
        Q = np.full((space.dpos, space.dpos), self.r)
        Q[space.align, np.arange(space.dpos)] = self.q
        return FullAttention(Q)


def target_attention(q: float, r: float, L: int) -> float:
    """Weight on the aligned prompt position under reduced scores."""
    return 1.0 / (1.0 + (L - 1) * math.exp(r - q))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def attention_scores(params, instance: Instance, step: int, space: PositionSpace | None = None) -> np.ndarray:
    xa = instance.answer_positions[step]
    if isinstance(params, ReducedAttention):
        if space is None:
            aligned = np.arange(instance.horizon) == step
        else:
            aligned = space.align[list(instance.prompt_positions)] == xa
        return np.where(aligned, params.q, params.r)
    return params.Q[xa, list(instance.prompt_positions)]


def attention_weights(params, instance: Instance, step: int, space: PositionSpace | None = None) -> np.ndarray:
    if not 0 <= step < instance.horizon:
        raise ValueError(f"step {step} outside [0, {instance.horizon})")
    return softmax(attention_scores(params, instance, step, space))


@dataclass(frozen=True, eq=False)
class StructuredMlp:
    """Implicit form of the pretrained MLP weights.

    The neuron of class ``j`` indexed by state ``y`` reads group symbol
    ``g = tau^-1(j) * y^-1`` with weight ``B``, state ``y`` with ``B + 2 sigma0``
    and every other symbol with ``-B``.
    """

    group: GroupTable
    tokenizer: Tokenizer
    config: MlpConfig

    def designated_transition(self, cls: int, y: int) -> int:
        state = self.tokenizer.to_state[cls]
        return int(self.group.table[state, self.group.inverse[y]])

    def materialize(self) -> np.ndarray:
        """Dense weights of shape ``(classes, neurons, 2d)``; columns are group symbols then states."""
        d = self.group.order
        if d > LITERAL_MAX_ORDER:
            raise ValueError(f"literal MLP limited to order <= {LITERAL_MAX_ORDER}")
        B, s0 = self.config.B, self.config.sigma0
        W = np.full((d, d, 2 * d), -B)
        for cls in range(d):
            for y in range(d):
                W[cls, y, self.designated_transition(cls, y)] = B
                W[cls, y, d + y] = B + 2 * s0
        return W


def build_pretrained_W(group: GroupTable, tokenizer: Tokenizer, config: MlpConfig) -> StructuredMlp:
    if tokenizer.to_class.size != group.order or not tokenizer.is_bijective():
        raise ValueError("tokenizer must be a bijection on the group's states")
    return StructuredMlp(group, tokenizer, config)


def _preactivation(B: float, s0: float, attn: np.ndarray, transitions, g: int) -> float:
    # both the structured and the literal path sum exactly these products, so the
    # correctly rounded fsum makes them agree bit for bit
    terms = [(B + 2 * s0) * 0.5]
    terms += [(B if h == g else -B) * (0.5 * a) for h, a in zip(transitions, attn)]
    return math.fsum(terms)


def step_logits(params, mlp: StructuredMlp, instance: Instance, state: int, step: int,
                space: PositionSpace | None = None) -> np.ndarray:
    attn = attention_weights(params, instance, step, space)
    d = mlp.group.order
    B, s0 = mlp.config.B, mlp.config.sigma0
    logits = np.empty(d)
    for cls in range(d):
        g = mlp.designated_transition(cls, state)
        logits[cls] = max(_preactivation(B, s0, attn, instance.transitions, g), 0.0)
    return logits


def literal_mlp_logits(W: np.ndarray, instance: Instance, state: int, step: int, params,
                       space: PositionSpace | None = None) -> np.ndarray:
    """Reference logits from explicit embeddings and a dense ReLU layer."""
    d = W.shape[0]
    if d > LITERAL_MAX_ORDER:
        raise ValueError(f"literal MLP limited to order <= {LITERAL_MAX_ORDER}")
    attn = attention_weights(params, instance, step, space)
    z = np.zeros(2 * d)
    for g, a in zip(instance.transitions, attn):
        z[g] += 0.5 * a
    z[d + state] = 0.5
    logits = np.empty(d)
    nonzero = np.flatnonzero(z)
    for cls in range(d):
        acts = [max(math.fsum(W[cls, r, nonzero] * z[nonzero]), 0.0) for r in range(W.shape[1])]
        logits[cls] = math.fsum(acts)
    return logits


def step_probabilities(attn: float, L: int, d: int, C_B: float) -> StepLaw:
    """Three-valued step law as a function of the target attention weight."""
    if not 0.0 <= attn <= 1.0:
        raise ValueError("attention weight must lie in [0, 1]")
    if not 1 <= L <= d:
        raise ValueError(f"horizon {L} incompatible with order {d}")
    ln_d = math.log(d)
    e1 = attn * C_B * ln_d
    e2 = (1.0 - attn) / (L - 1) * C_B * ln_d if L > 1 else -math.inf
    top = max(e1, e2 if L > 1 else e1, 0.0)
    w1 = math.exp(e1 - top)
    w2 = math.exp(e2 - top) if L > 1 else 0.0
    w3 = math.exp(-top)
    Z = w1 + (L - 1) * w2 + (d - L) * w3
    return StepLaw(w1 / Z, w2 / Z, w3 / Z, L, d)


def reduced_step_law(q: float, r: float, L: int, d: int, C_B: float) -> tuple[StepLaw, float]:
    attn = target_attention(q, r, L)
    return step_probabilities(attn, L, d, C_B), attn


@dataclass
class StepDistribution:
    probs: np.ndarray
    attn: np.ndarray
    target_class: int
    context_classes: np.ndarray
    law: StepLaw | None = None
    degenerate: bool = False


def step_distribution(params, mlp: StructuredMlp, instance: Instance, state: int, step: int,
                      space: PositionSpace | None = None) -> StepDistribution:
    logits = step_logits(params, mlp, instance, state, step, space)
    probs = softmax(logits)
    attn = attention_weights(params, instance, step, space)
    group, tok = mlp.group, mlp.tokenizer
    ctx_cls = tok.to_class[group.table[list(instance.transitions), state]]
    target_cls = int(ctx_cls[step])
    L, d = instance.horizon, group.order
    dist = StepDistribution(probs, attn, target_cls, ctx_cls)
    if L == d:
        dist.degenerate = True
        return dist
    vocab = np.ones(d, dtype=bool)
    vocab[ctx_cls] = False
    others = np.delete(ctx_cls, step)
    p2 = float(probs[others].mean()) if others.size else 0.0
    p3 = float(probs[vocab].mean())
    # renormalize the three-valued summary so it satisfies the mass identity exactly
    p1 = 1.0 - (L - 1) * p2 - (d - L) * p3
    dist.law = StepLaw(p1, p2, p3, L, d)
    return dist


@dataclass
class Trajectory:
    states: list[int]
    actions: list[int]
    reward: int
    logprobs: list[float]
    hits: list[int]
    entropies: list[float] = field(default_factory=list)


def attention_hit(attn: np.ndarray, instance: Instance, step: int) -> int:
    """1 if the argmax attention (ties toward the lowest position identifier) picks the aligned prompt."""
    prompts = np.asarray(instance.prompt_positions)
    best = attn.max()
    tied = prompts[attn == best]
    return int(tied.min() == prompts[step])


def rollout(params, mlp: StructuredMlp, instance: Instance, rng: np.random.Generator | None = None,
            mode: str = "sample", space: PositionSpace | None = None) -> Trajectory:
    group, tok = mlp.group, mlp.tokenizer
    y = instance.y0
    states, actions, logps, hits, ents = [], [], [], [], []
    for step in range(instance.horizon):
        dist = step_distribution(params, mlp, instance, y, step, space)
        if mode == "greedy":
            cls = int(np.argmax(dist.probs))
        else:
            cls = int(rng.choice(dist.probs.size, p=dist.probs))
        nxt = int(tok.to_state[cls])
        actions.append(int(group.table[nxt, group.inverse[y]]))
        logps.append(float(np.log(dist.probs[cls])))
        p = dist.probs[dist.probs > 0]
        ents.append(float(-(p * np.log(p)).sum()))
        hits.append(attention_hit(dist.attn, instance, step))
        states.append(nxt)
        y = nxt
    reward = int(instance.states != () and y == instance.final_state)
    return Trajectory(states, actions, reward, logps, hits, ents)


def trajectory_logprob(params, mlp: StructuredMlp, instance: Instance, states,
                       space: PositionSpace | None = None) -> float:
    y = instance.y0
    total = []
    for step, nxt in enumerate(states):
        dist = step_distribution(params, mlp, instance, y, step, space)
        total.append(math.log(dist.probs[mlp.tokenizer.to_class[nxt]]))
        y = nxt
    return math.fsum(total)


# ---------------------------------------------------------------------------
# batched engine


@dataclass
class BatchRollout:
    """Per-step arrays of a batched rollout; padded steps are masked out."""

    reward: np.ndarray  # (n,)
    hits: np.ndarray  # (n, Lmax)
    logprob: np.ndarray  # (n, Lmax)
    entropy: np.ndarray  # (n, Lmax)
    score_grad: np.ndarray  # (n, Lmax, Lmax): d log pi / d score at each step
    entropy_grad: np.ndarray  # (n, Lmax, Lmax): d entropy / d score
    active: np.ndarray  # (n, Lmax)


def batch_scores(params, batch: InstanceBatch, space: PositionSpace) -> np.ndarray:
    """Scores ``S[i, k, l] = Q[x_a[i, k], x_p[i, l]]`` with padding set to ``-inf``."""
    n, Lmax = batch.transitions.shape
    xa = batch.answers[:, :Lmax]
    if isinstance(params, ReducedAttention):
        aligned = space.align[batch.prompts][:, None, :] == xa[:, :, None]
        S = np.where(aligned, params.q, params.r)
    else:
        S = params.Q[xa[:, :, None], batch.prompts[:, None, :]]
    pad = np.arange(Lmax)[None, :] >= batch.lengths[:, None]
    return np.where(pad[:, None, :], -np.inf, S)


def _logit_grad_to_scores(attn: np.ndarray, dz: np.ndarray, B: float) -> np.ndarray:
    # z_l = B * attn_l + sigma0 and attn = softmax(S)
    inner = (dz * attn).sum(axis=-1, keepdims=True)
    return B * attn * (dz - inner)


def batch_rollout(params, mlp: MlpConfig, group: GroupTable, batch: InstanceBatch, space: PositionSpace,
                  rng: np.random.Generator | None, mode: str = "sample",
                  forced: np.ndarray | None = None) -> BatchRollout:
    """Roll out a padded batch under the identity tokenizer.

    The structured MLP makes the step law depend only on which transition is
    applied, so sampling picks either an in-context transition or a uniformly
    random vocabulary transition. ``forced`` (``(n, Lmax)`` context indices)
    replays fixed choices instead of sampling; setting it to the correct
    transitions yields teacher-forced gradients.
    """
    n, Lmax = batch.transitions.shape
    d = group.order
    B, s0 = mlp.B, mlp.sigma0
    S = batch_scores(params, batch, space)
    attn = softmax(S, axis=-1)
    pad = ~np.isfinite(S[:, 0, :])
    z = np.where(pad[:, None, :], -np.inf, attn * B + s0)
    vocab = (d - batch.lengths).astype(float)
    with np.errstate(divide="ignore"):
        vz = s0 + np.log(vocab)  # aggregated vocabulary logit
    top = np.maximum(z.max(axis=-1), vz[:, None])
    lse = top + np.log(np.exp(z - top[..., None]).sum(axis=-1) + np.exp(vz[:, None] - top))
    logp_ctx = z - lse[..., None]
    p_ctx = np.where(pad[:, None, :], 0.0, np.exp(logp_ctx))
    logp_voc = s0 - lse
    p_voc = np.exp(logp_voc)
    plogp = np.where(pad[:, None, :], 0.0, p_ctx * np.where(pad[:, None, :], 0.0, logp_ctx))
    ent = -plogp.sum(axis=-1) - vocab[:, None] * p_voc * logp_voc

    active = np.arange(Lmax)[None, :] < batch.lengths[:, None]
    rows = np.arange(n)
    if forced is not None:
        choice = np.where(active, forced, -1)
    elif mode == "sample":
        u = rng.random((n, Lmax))
        choice = (u[..., None] >= np.cumsum(p_ctx, axis=-1)).sum(axis=-1)
        choice = np.where(choice >= batch.lengths[:, None], -1, choice)
    elif mode == "greedy":
        choice = np.full((n, Lmax), -1)
    else:
        raise ValueError(f"unknown rollout mode {mode!r}")
    in_ctx = np.zeros((n, d), dtype=bool)
    in_ctx[np.repeat(rows, Lmax)[active.ravel()], batch.transitions[active]] = True

    y = batch.y0.copy()
    logprob = np.zeros((n, Lmax))
    big = np.iinfo(np.int64).max
    for k in range(Lmax):
        act_k = active[:, k]
        if mode == "greedy" and forced is None:
            # a context logit is never below sigma0; ties go to the lowest class index
            zk = z[:, k, :]
            classes = np.where(zk == zk.max(axis=-1, keepdims=True), group.table[batch.transitions, y[:, None]], big)
            choice[:, k] = np.where(act_k, np.argmin(classes, axis=-1), -1)
        ck = choice[:, k]
        ctx_pick = act_k & (ck >= 0)
        voc_pick = act_k & (ck < 0)
        action = np.zeros(n, dtype=np.int64)
        action[ctx_pick] = batch.transitions[ctx_pick, ck[ctx_pick]]
        if voc_pick.any():
            # replayed vocabulary picks only need some non-context element; without a
            # generator the lowest one is used
            shape = (int(voc_pick.sum()), d)
            keys = rng.random(shape) if rng is not None else np.zeros(shape)
            keys[in_ctx[voc_pick]] = np.inf
            action[voc_pick] = np.argmin(keys, axis=1)
        logprob[ctx_pick, k] = logp_ctx[ctx_pick, k, ck[ctx_pick]]
        logprob[voc_pick, k] = logp_voc[voc_pick, k]
        y[act_k] = group.table[action[act_k], y[act_k]]

    onehot = np.zeros((n, Lmax, Lmax))
    ii, kk = np.nonzero(choice >= 0)
    onehot[ii, kk, choice[ii, kk]] = 1.0
    score_grad = _logit_grad_to_scores(attn, onehot - p_ctx, B)
    dH = -(p_ctx * np.where(pad[:, None, :], 0.0, logp_ctx) + p_ctx * ent[..., None])
    entropy_grad = _logit_grad_to_scores(attn, dH, B)
    mask = active[..., None]
    return BatchRollout((y == batch.final).astype(float), _hits(attn, batch, active),
                        np.where(active, logprob, 0.0), np.where(active, ent, 0.0),
                        np.where(mask, score_grad, 0.0), np.where(mask, entropy_grad, 0.0), active)


def _hits(attn: np.ndarray, batch: InstanceBatch, active: np.ndarray) -> np.ndarray:
    best = attn.max(axis=-1, keepdims=True)
    tied = np.where(attn == best, batch.prompts[:, None, :], np.iinfo(np.int64).max)
    # prompt l (0-based) is the target of step l
    return ((tied.min(axis=-1) == batch.prompts) & active).astype(float)
