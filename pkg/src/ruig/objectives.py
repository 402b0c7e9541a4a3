"""Training objectives: masked token cross-entropy and the IoU-rewarded
policy-gradient surrogate, with reward assignment for every granularity
variant plus an exact-enumeration oracle for the estimator.

The surrogate loss is -(1/K) sum_k sum_n R[k,n] * log P(y_n^k | ...),
built as one teacher-forced scoring pass over the sampled sequences:
rewards enter as a constant selection matrix multiplied against the
log-softmax, so gradient flows only through the log-probabilities and
zero-reward positions contribute exactly zero gradient. Log-probs are
conditioned on the sample's own prefix (per-sequence sampling; the
per-token resampling reading of the expectation is the documented
alternative and is not implemented).

Reward variants:
  bbox         IoU of the parsed box on the coord-value positions
  centerpoint  1 - dist/diag on the two ctr fields (one group)
  vertices     per-corner 1 - dist/diag on two position groups
  alltokens    IoU on every generated non-pad position (ablation arm)

Malformed or geometrically invalid samples earn reward 0 everywhere.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import codec
from . import tensor as T
from .codec import Malformed, Role, TokenSequence
from .geometry import BBox, Point, center, iou, point_reward
from .model import (
    DecodedSequence,
    ModelConfig,
    _sample_with_memory,
    decode_sequence_logits_t,
    encode_images_t,
    repeat_memory,
)
from .tensor import Tape, Tensor, backward


@dataclass
class RewardAssignment:
    """Per-position rewards for one sampled sequence; positions of one
    group share a value, everything else is exactly 0."""

    rewards: np.ndarray
    groups: np.ndarray
    malformed: bool
    summary: float  # sample-level scalar reward (diagnostics)


@dataclass
class LossBreakdown:
    ce: float
    pg: float
    total: float
    mean_reward: float
    malformed_fraction: float


def log_softmax_t(logits: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last dim, composed from
    tape ops (the detached rowwise max shift leaves the gradient exact)."""
    m = T.constant(logits.data.max(axis=-1, keepdims=True))
    z = T.add(logits, T.scale(m, -1.0))
    lse = T.log(T.sum_(T.exp(z), axis=-1, keepdims=True))
    return T.add(z, T.scale(lse, -1.0))


# -- cross-entropy ------------------------------------------------------------------

def _ce_core(logits: Tensor, ids: np.ndarray, roles: np.ndarray) -> Tensor:
    """Mean NLL over positions whose role is neither INSTRUCTION nor PAD.
    logits[..., i, :] scores target position i (caller aligns)."""
    mask = (roles != Role.INSTRUCTION) & (roles != Role.PAD)
    n_scored = int(mask.sum())
    if n_scored == 0:
        raise ValueError("cross-entropy with every position masked")
    sel = np.zeros(logits.data.shape, dtype=np.float64)
    if ids.ndim == 1:
        sel[np.arange(len(ids))[mask], ids[mask]] = 1.0
    else:
        b_idx, t_idx = np.nonzero(mask)
        sel[b_idx, t_idx, ids[b_idx, t_idx]] = 1.0
    picked = T.sum_(T.mul(log_softmax_t(logits), T.constant(sel)))
    return T.scale(picked, -1.0 / n_scored)


def ce_loss(logits: Tensor, target: TokenSequence) -> Tensor:
    """Teacher-forced token cross-entropy for one sequence; logits row i
    is the distribution for target position i."""
    if logits.data.shape[0] != len(target):
        raise T.ShapeError("logits/target length mismatch")
    return _ce_core(logits, target.ids, target.roles)


# -- reward assignment ---------------------------------------------------------------

def assign_rewards(sample: DecodedSequence, gt: BBox, variant: str,
                   width: int, height: int, digits: int) -> RewardAssignment:
    n = len(sample.seq)
    rewards = np.zeros(n)
    groups = np.full(n, codec.GROUP_NONE, dtype=np.int8)
    seg = TokenSequence(sample.seq.ids[sample.prompt_len - 1:],
                        sample.seq.roles[sample.prompt_len - 1:])

    if variant == "centerpoint":
        try:
            pred = codec.parse_point(seg, digits)
        except Malformed:
            return RewardAssignment(rewards, groups, True, 0.0)
        r = point_reward(pred, center(gt), width, height)
        value_pos = np.nonzero(sample.seq.roles == Role.COORD_VALUE)[0]
        rewards[value_pos] = r
        groups[value_pos] = codec.GROUP_POINT1
        return RewardAssignment(rewards, groups, False, r)

    try:
        box = codec.parse_box(seg, digits)
    except Malformed:
        return RewardAssignment(rewards, groups, True, 0.0)

    value_pos = np.nonzero(sample.seq.roles == Role.COORD_VALUE)[0]
    if variant == "vertices":
        r1 = point_reward(Point(box.x_min, box.y_min), Point(gt.x_min, gt.y_min), width, height)
        r2 = point_reward(Point(box.x_max, box.y_max), Point(gt.x_max, gt.y_max), width, height)
        first, second = value_pos[: 2 * digits], value_pos[2 * digits:]
        rewards[first] = r1
        groups[first] = codec.GROUP_POINT1
        rewards[second] = r2
        groups[second] = codec.GROUP_POINT2
        return RewardAssignment(rewards, groups, False, 0.5 * (r1 + r2))

    r = iou(box, gt) if box.valid() else 0.0
    if variant == "bbox":
        rewards[value_pos] = r
        groups[value_pos] = codec.GROUP_BOX
    elif variant == "alltokens":
        gen = np.arange(sample.prompt_len, n)
        gen = gen[sample.seq.roles[gen] != Role.PAD]
        rewards[gen] = r
        groups[gen] = codec.GROUP_BOX
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return RewardAssignment(rewards, groups, False, r)


def _baseline_adjust(rewards_list, baseline):
    """baseline='mean': subtract the across-sample mean reward per group."""
    if baseline == "none":
        return [ra.rewards for ra in rewards_list]
    if baseline != "mean":
        raise ValueError(f"unknown baseline mode {baseline!r}")
    k = len(rewards_list)
    present_groups = sorted({int(g) for ra in rewards_list for g in np.unique(ra.groups) if g != codec.GROUP_NONE})
    adjusted = [ra.rewards.copy() for ra in rewards_list]
    for g in present_groups:
        scalars = np.zeros(k)
        for i, ra in enumerate(rewards_list):
            pos = np.nonzero(ra.groups == g)[0]
            if len(pos):
                scalars[i] = ra.rewards[pos[0]]
        m = scalars.mean()
        for i, ra in enumerate(rewards_list):
            pos = np.nonzero(ra.groups == g)[0]
            adjusted[i][pos] = scalars[i] - m
    return adjusted


def pg_loss(logits: Tensor, samples, rewards, baseline="none") -> Tensor:
    """Policy-gradient surrogate over K scored sample sequences.

    logits has shape (K, L-1, V); row [k, t-1] scores position t of
    samples[k] (sequences padded to L). Digit-restricted positions are
    scored against the softmax renormalized over the digit tokens, all
    other rewarded positions against the full vocabulary.
    """
    if len(samples) == 0:
        raise ValueError("pg_loss with zero samples")
    kk, lm1, vocab = logits.data.shape
    adjusted = _baseline_adjust(rewards, baseline)
    d0 = codec.DIGIT_BASE_ID
    sel_full = np.zeros((kk, lm1, vocab))
    sel_digit = np.zeros((kk, lm1, 10))
    for r, (s, adj) in enumerate(zip(samples, adjusted)):
        for t in range(1, len(s.seq)):
            w = adj[t]
            if w == 0.0:
                continue
            tok = int(s.seq.ids[t])
            if s.restricted[t]:
                sel_digit[r, t - 1, tok - d0] = w
            else:
                sel_full[r, t - 1, tok] = w
    terms = []
    if sel_full.any():
        terms.append(T.sum_(T.mul(log_softmax_t(logits), T.constant(sel_full))))
    if sel_digit.any():
        digit_logits = T.slice_(logits, 2, d0, d0 + 10)
        terms.append(T.sum_(T.mul(log_softmax_t(digit_logits), T.constant(sel_digit))))
    if not terms:
        return T.scale(T.sum_(T.mul(logits, T.constant(np.zeros_like(logits.data)))), 0.0)
    acc = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return T.scale(acc, -1.0 / kk)


# -- combined step -------------------------------------------------------------------

def _pad_ids(seqs, length):
    ids = np.full((len(seqs), length), codec.PAD_ID, dtype=np.int64)
    roles = np.full((len(seqs), length), Role.PAD, dtype=np.int8)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        roles[i, : len(s)] = s.roles
    return ids, roles


def combined_step_loss(batch, params, cfg: ModelConfig, *, k, variant, digits,
                       rng, weights=(1.0, 1.0), baseline="none",
                       force_structural=True):
    """CE from one teacher-forced pass plus PG from k sampled decodes per
    item, on a shared image encoding. Returns (loss tensor, stats)."""
    w_ce, w_pg = weights
    images = np.stack([s.image for s in batch])
    enc = encode_images_t(images, params, cfg)

    targets = [codec.build_target_sequence(s.instruction, s.gt, variant, digits) for s in batch]
    ids, roles = _pad_ids(targets, max(len(t) for t in targets))
    logits = decode_sequence_logits_t(enc, ids[:, :-1], params, cfg)
    ce = _ce_core(logits, ids[:, 1:], roles[:, 1:])

    if w_pg == 0.0:
        total = T.scale(ce, w_ce)
        return total, LossBreakdown(ce.item(), 0.0, total.item(), 0.0, 0.0)

    flat_samples = []
    flat_rewards = []
    for i, s in enumerate(batch):
        draws = _sample_with_memory(enc.data[i : i + 1], s.instruction, params, cfg,
                                    k, rng, force_structural, variant, digits, False)
        for d in draws:
            flat_samples.append(d)
            flat_rewards.append(assign_rewards(d, s.gt, variant, cfg.width, cfg.height, digits))

    lmax = max(len(d.seq) for d in flat_samples)
    ids2, _ = _pad_ids([d.seq for d in flat_samples], lmax)
    mem = repeat_memory(enc, k)
    logits2 = decode_sequence_logits_t(mem, ids2[:, :-1], params, cfg)
    # per-item baselines: pg_loss adjusts across each item's own k draws
    adjusted_all = []
    for i in range(len(batch)):
        adjusted_all.extend(_baseline_adjust(flat_rewards[i * k : (i + 1) * k], baseline))
    carriers = [
        RewardAssignment(adj, ra.groups, ra.malformed, ra.summary)
        for adj, ra in zip(adjusted_all, flat_rewards)
    ]
    pg = pg_loss(logits2, flat_samples, carriers, baseline="none")

    total = T.add(T.scale(ce, w_ce), T.scale(pg, w_pg))
    stats = LossBreakdown(
        ce=ce.item(),
        pg=pg.item(),
        total=total.item(),
        mean_reward=float(np.mean([ra.summary for ra in flat_rewards])),
        malformed_fraction=float(np.mean([ra.malformed for ra in flat_rewards])),
    )
    return total, stats


# -- enumeration oracle ---------------------------------------------------------------

def _restricted_logp_t(logits: Tensor, tok: int, allowed) -> Tensor:
    """log of softmax(logits) renormalized over `allowed`, at token `tok`."""
    lsm = log_softmax_t(logits)
    one = np.zeros(logits.data.shape[-1])
    one[tok] = 1.0
    lp_tok = T.sum_(T.mul(lsm, T.constant(one)))
    mask = np.zeros(logits.data.shape[-1])
    mask[list(allowed)] = 1.0
    if mask.all():
        return lp_tok
    mass = T.log(T.sum_(T.mul(T.exp(lsm), T.constant(mask))))
    return T.add(lp_tok, T.scale(mass, -1.0))


def sequence_logp_t(policy_fn, prompt_ids, seq, allowed) -> Tensor:
    """Differentiable log-probability of emitting `seq` after the prompt,
    sampling each slot from the allowed-renormalized softmax."""
    prefix = list(prompt_ids)
    total = None
    for tok in seq:
        logits = policy_fn(np.array(prefix, dtype=np.int64))
        lp = _restricted_logp_t(logits, int(tok), allowed)
        total = lp if total is None else T.add(total, lp)
        prefix.append(int(tok))
    return total


def enumerate_decode_distribution(policy_fn, prompt_ids, n_slots, allowed):
    """All slot sequences with their exact model probabilities (no grad)."""
    seqs = list(itertools.product(allowed, repeat=n_slots))
    probs = np.empty(len(seqs))
    for i, seq in enumerate(seqs):
        probs[i] = np.exp(sequence_logp_t(policy_fn, prompt_ids, seq, allowed).item())
    return seqs, probs


def exact_expectation(policy_fn, prompt_ids, n_slots, allowed, reward_fn, leaves):
    """Exact E[R] and its parameter gradient by full enumeration.

    policy_fn(prefix_ids) must return next-token logits as a Tensor built
    on the ambient tape. leaves is a name->Tensor parameter mapping; the
    returned grads dict matches its keys.
    """
    n_seqs = len(allowed) ** n_slots
    if n_seqs > 10_000:
        raise ValueError(f"decode space {n_seqs} exceeds enumeration budget")
    for t in leaves.values():
        t.grad = None
    with Tape() as tape:
        acc = None
        for seq in itertools.product(allowed, repeat=n_slots):
            logp = sequence_logp_t(policy_fn, prompt_ids, seq, allowed)
            term = T.scale(T.exp(logp), float(reward_fn(seq)))
            acc = term if acc is None else T.add(acc, term)
        e = acc
    backward(e, tape, leaves=list(leaves.values()))
    return e.item(), {name: t.grad.copy() for name, t in leaves.items()}


def sequence_surrogate_grads(policy_fn, prompt_ids, seq, allowed, reward, leaves):
    """Gradient of R * log P(seq) w.r.t. leaves - one draw's REINFORCE term."""
    for t in leaves.values():
        t.grad = None
    with Tape() as tape:
        obj = T.scale(sequence_logp_t(policy_fn, prompt_ids, seq, allowed), float(reward))
    backward(obj, tape, leaves=list(leaves.values()))
    return {name: t.grad.copy() for name, t in leaves.items()}
