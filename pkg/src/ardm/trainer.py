"""Likelihood training of the two-role model: AdamW, linear warmup,
per-token averaged loss over length-bucketed dialog batches.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dialog_model import (ArdmParams, DialogTooLongError, dialog_nll,
                           save_bundle)
from .tensor import NonFiniteError, Tape
from .tokenizer import SYSTEM, USER, Vocab


@dataclass
class TrainConfig:
    # Desk-scale default; GPT-2-scale fine-tuning would use ~3e-5.
    learning_rate: float = 3e-4
    warmup_steps: int | None = None  # None: one epoch's worth of batches
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    epochs: int = 3
    batch_size: int = 8
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    # Post-warmup schedule is constant; set to "linear" for decay to 0 at
    # total_steps (must then be provided).
    decay: str = "constant"
    total_steps: int | None = None
    overlong_policy: str = "skip"  # skip | error | truncate

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size/epochs out of range")
        if self.overlong_policy not in ("skip", "error", "truncate"):
            raise ValueError(f"bad overlong_policy {self.overlong_policy!r}")


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def lr_schedule(step: int, cfg: TrainConfig, warmup_steps: int | None = None
                ) -> float:
    """Linear ramp 0 -> peak over the warmup, then constant (or linear decay)."""
    warmup = warmup_steps if warmup_steps is not None else cfg.warmup_steps
    if warmup is None:
        raise ValueError("warmup_steps not resolved")
    if step < warmup:
        return cfg.learning_rate * step / warmup
    if cfg.decay == "linear":
        total = cfg.total_steps
        frac = max(0.0, (total - step) / max(1, total - warmup))
        return cfg.learning_rate * frac
    return cfg.learning_rate


def adamw_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray],
               state: OptimState, cfg: TrainConfig, lr: float | None = None
               ) -> dict[str, T.Tensor]:
    """One AdamW update; weight decay decoupled from the adaptive term.

    Returns a new parameter dict (tensors are immutable) and mutates
    `state` in place (moments, step counter).
    """
    if lr is None:
        lr = cfg.learning_rate
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    out: dict[str, T.Tensor] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        w = p.data - lr * cfg.weight_decay * p.data
        w = w - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        out[name] = T.param(w, name=p.name)
    return out


def _flatten(params: ArdmParams) -> dict[str, T.Tensor]:
    if params.shared:
        return {f"user.{k}": v for k, v in params.user.items()}
    flat = {f"user.{k}": v for k, v in params.user.items()}
    flat.update({f"system.{k}": v for k, v in params.system.items()})
    return flat


def _unflatten(flat: dict[str, T.Tensor], params: ArdmParams) -> ArdmParams:
    user = {k[len("user."):]: v for k, v in flat.items()
            if k.startswith("user.")}
    if params.shared:
        return ArdmParams(params.config, user=user, system=user)
    system = {k[len("system."):]: v for k, v in flat.items()
              if k.startswith("system.")}
    return ArdmParams(params.config, user=user, system=system)


def dialog_tokens(dialog, vocab: Vocab) -> int:
    from .tokenizer import format_turn
    return sum(len(vocab.encode(format_turn(t.role, t.text))) for t in dialog)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale


def batch_gradients(batch, params: ArdmParams, vocab: Vocab,
                    dropout_rng=None) -> tuple[dict, dict]:
    """Accumulated gradients of the per-token mean NLL over a dialog batch.

    Returns (grads keyed like _flatten, metrics dict).
    """
    flat = _flatten(params)
    names = list(flat)
    tensors = [flat[n] for n in names]
    grads = {n: np.zeros(t.shape) for n, t in flat.items()}
    nll = {USER: 0.0, SYSTEM: 0.0}
    counts = {USER: 0, SYSTEM: 0}
    losses = []
    for dialog in batch:
        r = dialog_nll(dialog, params, vocab, dropout_rng=dropout_rng)
        losses.append(r)
        nll[USER] += r["user_nll"].item()
        nll[SYSTEM] += r["system_nll"].item()
        counts[USER] += r["token_counts"][USER]
        counts[SYSTEM] += r["token_counts"][SYSTEM]
    total_tokens = max(1, counts[USER] + counts[SYSTEM])
    for r in losses:
        gs = T.gradient_of(r["total_nll"], tensors)
        for n, g in zip(names, gs):
            grads[n] += g / total_tokens
    metrics = {
        "nll_user": nll[USER], "nll_system": nll[SYSTEM],
        "tokens_user": counts[USER], "tokens_system": counts[SYSTEM],
    }
    return grads, metrics


def corpus_nll(corpus, params: ArdmParams, vocab: Vocab) -> dict:
    nll = {USER: 0.0, SYSTEM: 0.0}
    counts = {USER: 0, SYSTEM: 0}
    for dialog in corpus:
        r = dialog_nll(dialog, params, vocab)
        nll[USER] += r["user_nll"].item()
        nll[SYSTEM] += r["system_nll"].item()
        counts[USER] += r["token_counts"][USER]
        counts[SYSTEM] += r["token_counts"][SYSTEM]
    total = nll[USER] + nll[SYSTEM]
    tokens = max(1, counts[USER] + counts[SYSTEM])
    return {
        "nll_user": nll[USER], "nll_system": nll[SYSTEM],
        "tokens_user": counts[USER], "tokens_system": counts[SYSTEM],
        "ppl": float(np.exp(total / tokens)),
    }


def _prepare_corpus(corpus, params: ArdmParams, vocab: Vocab,
                    cfg: TrainConfig):
    """Apply the over-long policy and pair each dialog with its length."""
    limit = params.config.max_positions
    out = []
    for i, dialog in enumerate(corpus):
        n = dialog_tokens(dialog, vocab)
        if n <= limit:
            if dialog:
                out.append((n, dialog))
            continue
        if cfg.overlong_policy == "error":
            raise DialogTooLongError(i, limit)
        if cfg.overlong_policy == "truncate":
            trimmed = list(dialog)
            while trimmed and dialog_tokens(trimmed, vocab) > limit:
                trimmed.pop()
            if trimmed:
                out.append((dialog_tokens(trimmed, vocab), trimmed))
        # "skip": drop it
    if not out:
        raise ValueError("no dialog fits within max_positions")
    return out


def train(corpus, params: ArdmParams, vocab: Vocab, cfg: TrainConfig,
          val_corpus=None, out_dir=None, log=None):
    """Maximize dialog likelihood; returns (best params, history).

    History holds one record per epoch: train NLL per role, validation
    perplexity.  Deterministic for a fixed config seed.  The best-validation
    checkpoint is persisted to `out_dir` when given.
    """
    sized = _prepare_corpus(corpus, params, vocab, cfg)
    sized.sort(key=lambda p: p[0])
    batches = [[d for _, d in sized[i:i + cfg.batch_size]]
               for i in range(0, len(sized), cfg.batch_size)]
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else len(batches)
    order_rng = np.random.default_rng(cfg.seed)
    state = OptimState()
    flat = _flatten(params)
    history = []
    best_ppl = np.inf
    best = params
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(batches))
        nll = {USER: 0.0, SYSTEM: 0.0}
        counts = {USER: 0, SYSTEM: 0}
        for bi in order:
            dropout_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch, int(bi)]))
            try:
                grads, m = batch_gradients(batches[bi], params, vocab,
                                           dropout_rng=dropout_rng)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"non-finite loss at step {state.step}: {exc}") from exc
            if cfg.grad_clip_norm is not None:
                clip_grads(grads, cfg.grad_clip_norm)
            lr = lr_schedule(state.step + 1, cfg, warmup_steps=warmup)
            flat = adamw_step(flat, grads, state, cfg, lr=lr)
            params = _unflatten(flat, params)
            for role in (USER, SYSTEM):
                nll[role] += m[f"nll_{role}"]
                counts[role] += m[f"tokens_{role}"]
        record = {
            "epoch": epoch,
            "train_nll_user": nll[USER] / max(1, counts[USER]),
            "train_nll_system": nll[SYSTEM] / max(1, counts[SYSTEM]),
        }
        if val_corpus is not None:
            record["val_ppl"] = corpus_nll(val_corpus, params, vocab)["ppl"]
            if record["val_ppl"] < best_ppl:
                best_ppl = record["val_ppl"]
                best = params
                if out_dir is not None:
                    save_bundle(out_dir, params, vocab)
        else:
            best = params
            if out_dir is not None:
                save_bundle(out_dir, params, vocab)
        history.append(record)
        if log is not None:
            log(record)
        if out_dir is not None:
            with open(os.path.join(out_dir, "metrics.jsonl"), "a") as f:
                f.write(json.dumps(record) + "\n")
    return best, history
