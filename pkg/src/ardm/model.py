"""Decoder-only transformer with an external, append-only key/value memory.

The model exposes two entry points: `forward_full` over a whole token
sequence, and `forward_with_memory`, which processes a block of new tokens on
top of cached keys/values from earlier blocks.  The two agree exactly
(dropout off) because positions are absolute and the memory stores the same
per-layer K/V rows a full pass would compute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class CapacityError(RuntimeError):
    """The memory plus new tokens would exceed max_positions."""

    def __init__(self, limit: int, requested: int):
        super().__init__(
            f"memory capacity exceeded: {requested} rows requested, "
            f"limit is {limit} positions")
        self.limit = limit
        self.requested = requested


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 2048
    max_positions: int = 512
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))


def gpt2_small_config(vocab_size: int = 50257) -> ModelConfig:
    """GPT-2-small shape: 12 layers, 12 heads, 768 wide."""
    return ModelConfig(n_layers=12, n_heads=12, d_model=768, d_ff=3072,
                       vocab_size=vocab_size, max_positions=1024)


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Random init: weights N(0, 0.02), LN gains 1, biases 0.

    Token embeddings are tied to the output projection (logits = h @ wteᵀ).
    """
    rng = np.random.default_rng(config.seed)
    d, ff = config.d_model, config.d_ff

    def w(name, *shape):
        return T.param(rng.normal(0.0, 0.02, shape), name=name)

    params = {
        "wte": w("wte", config.vocab_size, d),
        "wpe": w("wpe", config.max_positions, d),
        "ln_f_g": T.param(np.ones(d), name="ln_f_g"),
        "ln_f_b": T.param(np.zeros(d), name="ln_f_b"),
    }
    for i in range(config.n_layers):
        params.update({
            f"h{i}.ln1_g": T.param(np.ones(d), name=f"h{i}.ln1_g"),
            f"h{i}.ln1_b": T.param(np.zeros(d), name=f"h{i}.ln1_b"),
            f"h{i}.qkv_w": w(f"h{i}.qkv_w", d, 3 * d),
            f"h{i}.qkv_b": T.param(np.zeros(3 * d), name=f"h{i}.qkv_b"),
            f"h{i}.proj_w": w(f"h{i}.proj_w", d, d),
            f"h{i}.proj_b": T.param(np.zeros(d), name=f"h{i}.proj_b"),
            f"h{i}.ln2_g": T.param(np.ones(d), name=f"h{i}.ln2_g"),
            f"h{i}.ln2_b": T.param(np.zeros(d), name=f"h{i}.ln2_b"),
            f"h{i}.fc_w": w(f"h{i}.fc_w", d, ff),
            f"h{i}.fc_b": T.param(np.zeros(ff), name=f"h{i}.fc_b"),
            f"h{i}.fc_proj_w": w(f"h{i}.fc_proj_w", ff, d),
            f"h{i}.fc_proj_b": T.param(np.zeros(d), name=f"h{i}.fc_proj_b"),
        })
    return params


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for the architecture above."""
    d, ff = config.d_model, config.d_ff
    per_layer = (2 * d            # ln1
                 + d * 3 * d + 3 * d   # qkv
                 + d * d + d           # attn out proj
                 + 2 * d               # ln2
                 + d * ff + ff         # mlp in
                 + ff * d + d)         # mlp out
    return (config.vocab_size * d + config.max_positions * d
            + config.n_layers * per_layer + 2 * d)


class KVMemory:
    """Per-layer cached K/V rows for all past tokens; append-only.

    Rows are graph-connected Tensors so training losses backpropagate across
    turn boundaries.  `last_logits` caches the final position's logits from
    the forward call that produced this memory (needed to continue decoding,
    since K/V alone cannot reproduce the next-token distribution).
    """

    def __init__(self, config: ModelConfig, keys=None, values=None,
                 length: int = 0, turn_spans=None, last_logits=None):
        self.config = config
        self.keys = keys if keys is not None else [None] * config.n_layers
        self.values = values if values is not None else [None] * config.n_layers
        self.length = length
        # [(start, end)] row spans of whole appended blocks, oldest first.
        self.turn_spans: list[tuple[int, int]] = list(turn_spans or [])
        self.last_logits = last_logits

    @property
    def position(self) -> int:
        """Absolute position counter for the next token."""
        return self.length

    def rows(self) -> int:
        """Total resident K rows summed over layers (accounting API)."""
        return self.length * self.config.n_layers

    def extended(self, new_keys, new_values, n_new: int, last_logits) -> "KVMemory":
        keys, values = [], []
        for i in range(self.config.n_layers):
            if self.keys[i] is None:
                keys.append(new_keys[i])
                values.append(new_values[i])
            else:
                keys.append(T.concat([self.keys[i], new_keys[i]], axis=1))
                values.append(T.concat([self.values[i], new_values[i]], axis=1))
        spans = self.turn_spans + [(self.length, self.length + n_new)]
        return KVMemory(self.config, keys, values, self.length + n_new,
                        spans, last_logits)

    def drop_oldest_turn(self) -> "KVMemory":
        """Truncate-oldest policy: discard the earliest appended block.

        Positions stay absolute; remaining rows are not shifted, the rows are
        simply removed from the attention context.
        """
        if not self.turn_spans:
            raise ValueError("no turns to drop")
        start, end = self.turn_spans[0]
        n_drop = end - start
        keys = [T.narrow(k, 1, n_drop, k.shape[1] - n_drop) for k in self.keys]
        values = [T.narrow(v, 1, n_drop, v.shape[1] - n_drop)
                  for v in self.values]
        return KVMemory(self.config, keys, values, self.length,
                        self.turn_spans[1:], self.last_logits)


def empty_memory(config: ModelConfig) -> KVMemory:
    return KVMemory(config)


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    n = x.shape[0]
    return T.transpose(T.reshape(x, (n, n_heads, d_head)), (1, 0, 2))


def forward_with_memory(tokens, memory: KVMemory, params: dict[str, Tensor],
                        config: ModelConfig,
                        dropout_rng: np.random.Generator | None = None
                        ) -> tuple[Tensor, KVMemory]:
    """Process `tokens` on top of `memory`; returns logits and a new memory.

    The input memory is not mutated.  New tokens attend to every memory row
    plus earlier positions inside the block (causal).  Positions are indexed
    by the memory's absolute counter.  Dropout is active only when a
    generator is supplied.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    n = len(ids)
    if n == 0:
        raise ValueError("empty token block")
    start = memory.position
    if start + n > config.max_positions:
        raise CapacityError(config.max_positions, start + n)
    rate = config.dropout_rate if dropout_rng is not None else 0.0

    pos = T.embedding(params["wpe"], np.arange(start, start + n))
    x = T.add(T.embedding(params["wte"], ids), pos)
    x = T.dropout(x, rate, dropout_rng)

    # Memory rows precede the block, so a dropped earliest turn just shortens
    # the prefix every query may already attend to.
    mem_len = memory.keys[0].shape[1] if memory.keys[0] is not None else 0
    new_keys, new_values = [], []
    for i in range(config.n_layers):
        h = T.layer_norm(x, params[f"h{i}.ln1_g"], params[f"h{i}.ln1_b"])
        qkv = T.add(h @ params[f"h{i}.qkv_w"], params[f"h{i}.qkv_b"])
        q = _split_heads(T.narrow(qkv, 1, 0, config.d_model),
                         config.n_heads, config.d_head)
        k = _split_heads(T.narrow(qkv, 1, config.d_model, config.d_model),
                         config.n_heads, config.d_head)
        v = _split_heads(T.narrow(qkv, 1, 2 * config.d_model, config.d_model),
                         config.n_heads, config.d_head)
        new_keys.append(k)
        new_values.append(v)
        if memory.keys[i] is not None:
            k_all = T.concat([memory.keys[i], k], axis=1)
            v_all = T.concat([memory.values[i], v], axis=1)
        else:
            k_all, v_all = k, v
        ctx = T.scaled_attention(q, k_all, v_all, causal_from=mem_len)
        ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (n, config.d_model))
        attn = T.add(ctx @ params[f"h{i}.proj_w"], params[f"h{i}.proj_b"])
        x = T.add(x, T.dropout(attn, rate, dropout_rng))

        h = T.layer_norm(x, params[f"h{i}.ln2_g"], params[f"h{i}.ln2_b"])
        h = T.gelu(T.add(h @ params[f"h{i}.fc_w"], params[f"h{i}.fc_b"]))
        h = T.add(h @ params[f"h{i}.fc_proj_w"], params[f"h{i}.fc_proj_b"])
        x = T.add(x, T.dropout(h, rate, dropout_rng))

    x = T.layer_norm(x, params["ln_f_g"], params["ln_f_b"])
    logits = x @ T.transpose(params["wte"], (1, 0))
    new_memory = memory.extended(new_keys, new_values, n,
                                 last_logits=np.array(logits.data[-1]))
    return logits, new_memory


def forward_full(tokens, params: dict[str, Tensor], config: ModelConfig,
                 dropout_rng: np.random.Generator | None = None) -> Tensor:
    logits, _ = forward_with_memory(tokens, empty_memory(config), params,
                                    config, dropout_rng)
    return logits


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: np.asarray(t.data) for name, t in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: T.param(arr, name=name) for name, arr in arrays.items()}
