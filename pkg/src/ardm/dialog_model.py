"""Two role-specific language models sharing one key/value memory.

A dialog is scored left to right: each turn's tokens run through the owning
role's transformer, whose K/V rows are appended to the shared memory, so the
other role's model attends over them on the next turn.  The memory is the
only channel between the two parameter sets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import (CapacityError, KVMemory, ModelConfig, empty_memory,
                    forward_with_memory, init_params, params_from_arrays,
                    params_to_arrays)
from .tokenizer import SYSTEM, USER, Vocab, format_turn


@dataclass(frozen=True)
class Turn:
    role: str
    text: str

    def __post_init__(self):
        if self.role not in (USER, SYSTEM):
            raise ValueError(f"unknown role {self.role!r}")


Dialog = list  # list[Turn]


def make_dialog(pairs) -> list[Turn]:
    return [Turn(role, text) for role, text in pairs]


@dataclass
class ArdmParams:
    """Independent user and system parameter sets built from one config.

    The two models share no weights; equal shapes are required so K/V rows
    written by either model are interchangeable in the shared memory.  A
    shared-parameter baseline is expressed by passing the same dict twice.
    """

    config: ModelConfig
    user: dict = field(repr=False, default=None)
    system: dict = field(repr=False, default=None)

    def __post_init__(self):
        if self.user is None:
            self.user = init_params(self.config)
        if self.system is None:
            self.system = init_params(self.config)

    def for_role(self, role: str) -> dict:
        return self.user if role == USER else self.system

    @property
    def shared(self) -> bool:
        return self.user is self.system

    @classmethod
    def fresh(cls, config: ModelConfig) -> "ArdmParams":
        """Both roles start from the same random checkpoint, then diverge."""
        base = init_params(config)
        user = params_from_arrays(params_to_arrays(base))
        return cls(config, user=user, system=base)

    @classmethod
    def shared_lm(cls, config: ModelConfig) -> "ArdmParams":
        base = init_params(config)
        return cls(config, user=base, system=base)


def process_turn(role: str, tokens, memory: KVMemory, params: ArdmParams,
                 dropout_rng=None):
    """Run one framed turn through the owning role's model over `memory`."""
    return forward_with_memory(tokens, memory, params.for_role(role),
                               params.config, dropout_rng)


class DialogTooLongError(RuntimeError):
    def __init__(self, turn_index: int, limit: int):
        super().__init__(
            f"dialog exceeds {limit} positions at turn {turn_index}")
        self.turn_index = turn_index
        self.limit = limit


def dialog_nll(dialog, params: ArdmParams, vocab: Vocab, dropout_rng=None,
               return_memory: bool = False):
    """Negative log-likelihood of a dialog under the two-role factorization.

    One left-to-right pass alternating parameter sets.  The loss at each
    position uses the logits of the model that owns that position; each
    predicted token's NLL is attributed to the role owning the turn it
    belongs to.  The dialog's very first token has no predictor and is not
    scored.

    Returns {"user_nll", "system_nll", "total_nll", "token_counts"} where
    token_counts maps role -> number of scored tokens.
    """
    memory = empty_memory(params.config)
    nll = {USER: T.const(0.0), SYSTEM: T.const(0.0)}
    counts = {USER: 0, SYSTEM: 0}
    prev_last_logits = None  # Tensor row: logits at the previous position
    for idx, turn in enumerate(dialog):
        tokens = vocab.encode(format_turn(turn.role, turn.text))
        try:
            logits, memory = process_turn(turn.role, tokens, memory, params,
                                          dropout_rng)
        except CapacityError as exc:
            raise DialogTooLongError(idx, exc.limit) from exc
        targets = []
        rows = []
        if prev_last_logits is not None:
            rows.append(prev_last_logits)
            targets.append(tokens[0])
        if len(tokens) > 1:
            rows.append(T.narrow(logits, 0, 0, len(tokens) - 1))
            targets.extend(tokens[1:])
        if targets:
            stacked = rows[0] if len(rows) == 1 else T.concat(rows, axis=0)
            loss = T.cross_entropy(stacked, targets)
            nll[turn.role] = T.add(nll[turn.role],
                                   T.mul(loss, T.const(float(len(targets)))))
            counts[turn.role] += len(targets)
        prev_last_logits = T.narrow(logits, 0, len(tokens) - 1, 1)
    result = {
        "user_nll": nll[USER],
        "system_nll": nll[SYSTEM],
        "total_nll": T.add(nll[USER], nll[SYSTEM]),
        "token_counts": counts,
    }
    if return_memory:
        result["memory"] = memory
    return result


def next_token_dist(role: str, memory: KVMemory, params: ArdmParams,
                    sampler) -> np.ndarray:
    """Filtered next-token distribution at the memory's current frontier.

    The memory must have been produced by a forward pass of `role`'s model
    (its cached last-position logits belong to that pass).
    """
    from .decoder import filter_logits
    if memory.last_logits is None:
        raise ValueError("memory holds no context yet")
    del role  # the logits cache already reflects the owning model
    return filter_logits(memory.last_logits, sampler)


# ---------------------------------------------------------------------------
# Checkpoint bundle: directory with manifest + two checkpoints + vocab/config.

from .tensor import load_checkpoint, save_checkpoint  # noqa: E402

MANIFEST_NAME = "manifest.json"


def save_bundle(directory, params: ArdmParams, vocab: Vocab) -> None:
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(os.path.join(directory, "user.ckpt"),
                    params_to_arrays(params.user))
    save_checkpoint(os.path.join(directory, "system.ckpt"),
                    params_to_arrays(params.system))
    vocab.save(os.path.join(directory, "vocab.json"))
    with open(os.path.join(directory, "config.json"), "w") as f:
        f.write(params.config.to_json())
    manifest = {
        "format": "ardm-bundle",
        "user": "user.ckpt",
        "system": "system.ckpt",
        "vocab": "vocab.json",
        "config": "config.json",
        "shared": params.shared,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2)


def load_bundle(directory) -> tuple[ArdmParams, Vocab]:
    with open(os.path.join(directory, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    with open(os.path.join(directory, manifest["config"])) as f:
        config = ModelConfig.from_json(f.read())
    vocab = Vocab.load(os.path.join(directory, manifest["vocab"]))
    user = params_from_arrays(
        load_checkpoint(os.path.join(directory, manifest["user"])))
    if manifest.get("shared"):
        system = user
    else:
        system = params_from_arrays(
            load_checkpoint(os.path.join(directory, manifest["system"])))
    return ArdmParams(config, user=user, system=system), vocab
