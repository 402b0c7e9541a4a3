"""Deterministic training loop: Adam, cosine annealing, global-norm
gradient clipping, teacher forcing, checkpointing and metric logging.

Every random stream is derived statelessly from (master seed, domain,
index) - epoch shuffles from the epoch number, Monte Carlo sampling from
the step number - so identical configs replay bit-identically and a run
resumed from an epoch-boundary checkpoint continues exactly as if it had
never stopped.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .codec import digits_for
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .objectives import combined_step_loss
from .tensor import Tape, backward

_DOMAIN_SHUFFLE = 3
_DOMAIN_SAMPLE = 4


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient; carries a diagnostic record."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    k: int = 16
    w_ce: float = 1.0
    w_pg: float = 1.0
    variant: str = "bbox"
    baseline: str = "none"
    force_structural: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = final only

    def __post_init__(self):
        if self.base_lr <= 0 or self.clip_norm <= 0 or self.epochs < 1:
            raise ValueError("lr and clip_norm must be positive, epochs >= 1")
        if self.k < 1 or self.batch_size < 1:
            raise ValueError("k and batch_size must be >= 1")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, **kv):
        if self.records and kv["step"] <= self.records[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        self.records.append(kv)

    def save(self, path):
        with open(path, "w", encoding="ascii") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="ascii") as fh:
            return cls([json.loads(line) for line in fh])


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not (0 <= step <= total_steps) or total_steps < 1:
        raise ValueError("need 0 <= step <= total_steps, total_steps >= 1")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_global_norm(grads: dict, max_norm: float = 1.0) -> float:
    """Scale all grads in place so the global L2 norm is <= max_norm;
    returns the pre-clip norm. Raises NumericAbort on non-finite grads."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for name in sorted(grads):
        g = grads[name]
        sq += float(g.reshape(-1) @ g.reshape(-1))
    if not np.isfinite(sq):
        raise NumericAbort("non-finite gradient", {"grad_sq_norm": sq})
    norm = math.sqrt(sq)
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = np.ascontiguousarray(grads[name].reshape(-1))
        if g.shape != (p.data.size,):
            raise ValueError(f"gradient shape mismatch for {name}")
        kernels.adam_update(
            p.data.reshape(-1), g, state.m[name].reshape(-1), state.v[name].reshape(-1),
            lr, beta1, beta2, eps, bc1, bc2,
        )


def _rng_for(seed, domain, index):
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, domain, index]))
    )


def _state_path(ckpt_path):
    return ckpt_path + ".state"


def _save_train_state(path, params_like, step, epoch, t):
    from .tensor import Tensor

    store = {name: Tensor(arr) for name, arr in params_like.items()}
    save_checkpoint(path, store, {"kind": "train_state", "step": step, "epoch": epoch, "t": t})


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset, out_dir=None,
          resume_from=None, stop_check=None, stop_check_every=0):
    """Train on dataset.samples; returns (params, TrainLog).

    out_dir, when given, receives checkpoint.bin (+ epoch checkpoints at
    the configured cadence), vocab.txt, train_state sidecars and
    train_log.jsonl. stop_check(params, step) -> bool is polled every
    stop_check_every steps for early exit (overfit harnesses).
    """
    samples = dataset.samples
    if not samples:
        raise ValueError("empty dataset")
    digits = digits_for(model_cfg.width, model_cfg.height)
    n = len(samples)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = steps_per_epoch * train_cfg.epochs

    meta = {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "vocab": list(dataset.vocab.tokens),
        "digits": digits,
        "variant": train_cfg.variant,
    }

    start_epoch = 0
    step = 0
    if resume_from is None:
        params = init_params(model_cfg, seed=train_cfg.seed)
        adam = AdamState.fresh(params)
    else:
        params, ck_meta = load_checkpoint(resume_from)
        if ck_meta.get("model") != meta["model"]:
            raise ValueError("resume checkpoint has a different model config")
        st, st_meta = load_checkpoint(_state_path(resume_from))
        adam = AdamState(
            m={k[2:]: t.data for k, t in st.items() if k.startswith("m.")},
            v={k[2:]: t.data for k, t in st.items() if k.startswith("v.")},
            t=int(st_meta["t"]),
        )
        start_epoch = int(st_meta["epoch"])
        step = int(st_meta["step"])

    log = TrainLog()
    weights = (train_cfg.w_ce, train_cfg.w_pg)
    stop = False

    def checkpoint(name):
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name)
        save_checkpoint(path, params, meta)
        state_arrays = {f"m.{k}": v for k, v in adam.m.items()}
        state_arrays.update({f"v.{k}": v for k, v in adam.v.items()})
        _save_train_state(_state_path(path), state_arrays, step, epoch + 1, adam.t)
        dataset.vocab.save(os.path.join(out_dir, "vocab.txt"))

    epoch = start_epoch - 1
    for epoch in range(start_epoch, train_cfg.epochs):
        order = _rng_for(train_cfg.seed, _DOMAIN_SHUFFLE, epoch).permutation(n)
        for b0 in range(0, n, train_cfg.batch_size):
            batch = [samples[i] for i in order[b0 : b0 + train_cfg.batch_size]]
            lr = cosine_lr(step, total_steps, train_cfg.base_lr)
            rng = _rng_for(train_cfg.seed, _DOMAIN_SAMPLE, step)
            with Tape() as tape:
                loss, stats = combined_step_loss(
                    batch, params, model_cfg,
                    k=train_cfg.k, variant=train_cfg.variant, digits=digits,
                    rng=rng, weights=weights, baseline=train_cfg.baseline,
                    force_structural=train_cfg.force_structural,
                )
                if not np.isfinite(stats.total):
                    raise NumericAbort("non-finite loss", {"step": step, **asdict_safe(stats)})
                backward(loss, tape, leaves=list(params.values()))
            grads = {name: p.grad for name, p in params.items()}
            gnorm = clip_global_norm(grads, train_cfg.clip_norm)
            adam_step(params, grads, adam, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
            for p in params.values():
                p.grad = None
            log.append(
                step=step, lr=lr, ce=stats.ce, pg=stats.pg,
                mean_reward=stats.mean_reward,
                malformed_fraction=stats.malformed_fraction,
                grad_norm=gnorm,
            )
            step += 1
            if stop_check is not None and stop_check_every and step % stop_check_every == 0:
                if stop_check(params, step):
                    stop = True
                    break
        if stop:
            break
        if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0 \
                and epoch + 1 < train_cfg.epochs:
            checkpoint(f"checkpoint_ep{epoch + 1:03d}.bin")

    checkpoint("checkpoint.bin")
    if out_dir is not None:
        log.save(os.path.join(out_dir, "train_log.jsonl"))
    return params, log


def asdict_safe(stats):
    return {"ce": stats.ce, "pg": stats.pg, "total": stats.total}
