"""Fast no-grad inference over fixed-capacity key/value buffers.

Decoding does not need the autodiff graph, so this module mirrors the
transformer forward in plain numpy.  Slots share preallocated per-layer
buffers; every reduction runs over a globally fixed length (d_model, d_ff,
vocab, or the full position capacity, with disallowed rows masked), and all
batched matmuls carry the batch as leading dimensions so BLAS executes one
GEMM per slot.  Consequence: a slot's numbers are bit-identical whether it
runs alone or alongside 15 others, which is what makes batched decoding a
pure speedup rather than a behavior change.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .model import CapacityError, ModelConfig
from .tensor import MASK_VALUE as _MASK64

# Inference runs in float32: decode quality is unaffected and the
# fixed-capacity buffers halve their memory traffic.  Bit-identity
# between batched and sequential runs holds per dtype; both paths
# share this engine, so they always agree.
DTYPE = np.float32
MASK_VALUE = DTYPE(_MASK64)
_INV_SQRT2 = DTYPE(1.0 / np.sqrt(2.0))
_LN_EPS = 1e-5


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    return g * (c / np.sqrt(var + _LN_EPS)) + b


def _gelu(x):
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class RoleWeights:
    """Plain-array view of one transformer parameter set."""

    def __init__(self, arrays: dict[str, np.ndarray], config: ModelConfig):
        self.config = config
        self.wte = np.ascontiguousarray(arrays["wte"], dtype=DTYPE)
        self.wte_t = np.ascontiguousarray(arrays["wte"].T, dtype=DTYPE)
        self.wpe = np.ascontiguousarray(arrays["wpe"], dtype=DTYPE)
        self.ln_f = (arrays["ln_f_g"].astype(DTYPE),
             arrays["ln_f_b"].astype(DTYPE))
        self.layers = []
        for i in range(config.n_layers):
            self.layers.append({
                k: np.ascontiguousarray(arrays[f"h{i}.{k}"], dtype=DTYPE)
                for k in ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w",
                          "proj_b", "ln2_g", "ln2_b", "fc_w", "fc_b",
                          "fc_proj_w", "fc_proj_b")
            })


class BatchSlots:
    """`batch_size` decode slots over shared fixed-capacity KV buffers.

    K is stored (B, heads, capacity, d_head) and V transposed
    (B, heads, d_head, capacity) so single-token attention needs no
    transpose copies.  A slot's logical content is rows [0, length); rows
    beyond that are stale and masked.  Releasing a slot just zeroes its
    length, which is also how eval-mode generation is rewound.
    """

    def __init__(self, config: ModelConfig, batch_size: int):
        self.config = config
        self.batch_size = batch_size
        cap, h, dh = config.max_positions, config.n_heads, config.d_head
        self.k = [np.zeros((batch_size, h, cap, dh), dtype=DTYPE)
                  for _ in range(config.n_layers)]
        self.vt = [np.zeros((batch_size, h, dh, cap), dtype=DTYPE)
                   for _ in range(config.n_layers)]
        self.lengths = np.zeros(batch_size, dtype=np.int64)
        self.last_logits = [None] * batch_size

    def release(self, slot: int) -> None:
        self.lengths[slot] = 0
        self.last_logits[slot] = None

    def resident_rows(self) -> int:
        """Logical K rows currently held, summed over slots and layers."""
        return int(self.lengths.sum()) * self.config.n_layers

    def rewind(self, slot: int, length: int) -> None:
        if length > self.lengths[slot]:
            raise ValueError("cannot rewind forward")
        self.lengths[slot] = length

    def move_slot(self, src: int, dst: int) -> None:
        """Relocate a slot's live state into another (free) slot.

        Contents are copied verbatim, so the relocated dialog's numbers are
        unchanged; schedulers use this to keep live slots packed at the
        front of the arena so step() can run over a prefix view.
        """
        n = int(self.lengths[src])
        for k, vt in zip(self.k, self.vt):
            k[dst, :, :n] = k[src, :, :n]
            vt[dst, :, :, :n] = vt[src, :, :, :n]
        self.lengths[dst] = n
        self.last_logits[dst] = self.last_logits[src]
        self.release(src)


class InferenceEngine:
    """Runs role-selected forward passes over a BatchSlots arena."""

    def __init__(self, weights_by_role: dict[str, RoleWeights],
                 batch_size: int):
        cfgs = {w.config for w in weights_by_role.values()}
        if len(cfgs) != 1:
            raise ValueError("all role models must share one config")
        self.config = next(iter(cfgs))
        self.weights = weights_by_role
        self.slots = BatchSlots(self.config, batch_size)

    # -- multi-token force-feed for one slot ------------------------------

    def feed(self, slot: int, role: str, tokens) -> np.ndarray:
        """Append a block of known tokens to `slot`; returns block logits."""
        w = self.weights[role]
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        n = len(ids)
        start = int(self.slots.lengths[slot])
        if start + n > cfg.max_positions:
            raise CapacityError(cfg.max_positions, start + n)
        x = w.wte[ids] + w.wpe[start:start + n]
        end = start + n
        # Query i (absolute start+i) may see buffer rows <= start+i.  Unlike
        # step(), this path touches only this slot's own rows, so slicing to
        # the live prefix is safe: the shapes depend on nothing but the
        # slot's own state and are therefore the same in batched and
        # sequential runs.
        col = np.arange(end)[None, :]
        mask = np.where(col > start + np.arange(n)[:, None], MASK_VALUE,
                        DTYPE(0.0))
        for layer, buf_k, buf_vt in zip(w.layers, self.slots.k, self.slots.vt):
            h = _layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            qkv = h @ layer["qkv_w"] + layer["qkv_b"]
            q, k, v = np.split(qkv, 3, axis=1)
            q = q.reshape(n, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
            k = k.reshape(n, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
            v = v.reshape(n, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
            buf_k[slot, :, start:end] = k
            buf_vt[slot, :, :, start:end] = v.transpose(0, 2, 1)
            scores = np.matmul(q, buf_k[slot, :, :end].transpose(0, 2, 1))
            scores *= DTYPE(1.0 / np.sqrt(cfg.d_head))
            scores += mask
            weights = _softmax(scores, axis=-1)
            ctx = np.matmul(weights, buf_vt[slot, :, :, :end]
                            .transpose(0, 2, 1))
            ctx = ctx.transpose(1, 0, 2).reshape(n, cfg.d_model)
            x = x + (ctx @ layer["proj_w"] + layer["proj_b"])
            h = _layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            h = _gelu(h @ layer["fc_w"] + layer["fc_b"])
            x = x + (h @ layer["fc_proj_w"] + layer["fc_proj_b"])
        x = _layer_norm(x, *w.ln_f)
        logits = x @ w.wte_t
        self.slots.lengths[slot] = start + n
        self.slots.last_logits[slot] = logits[-1]
        return logits

    # -- single-token step over many slots --------------------------------

    def step(self, tokens_by_slot: dict[int, tuple[str, int]]
             ) -> dict[int, np.ndarray]:
        """Advance each listed slot by one token; returns next logits per slot.

        tokens_by_slot maps slot -> (role, token id).  The forward pass runs
        over the arena prefix [0, max listed slot] once per distinct role;
        schedulers keep live slots packed low (move_slot) so the prefix is
        the live set.  Slots in the prefix not owned by the current role
        compute garbage that is never read or written back, which keeps
        every array operation a contiguous batch view.  Each owned slot's
        new K/V row is scattered into the buffer before scoring so the
        token attends to itself.
        """
        cfg = self.config
        cap = cfg.max_positions
        for slot in tokens_by_slot:
            if self.slots.lengths[slot] + 1 > cap:
                raise CapacityError(cap, int(self.slots.lengths[slot]) + 1)
        n = max(tokens_by_slot) + 1
        lengths = self.slots.lengths[:n]
        roles = sorted({role for role, _ in tokens_by_slot.values()})
        token_vec = np.zeros(n, dtype=np.int64)
        for slot, (_, tok) in tokens_by_slot.items():
            token_vec[slot] = tok
        # Rows <= the slot's pre-step length are visible (== is the new row).
        col = np.arange(cap)[None, None, :, None]
        mask = np.where(col > lengths[:, None, None, None], MASK_VALUE,
                        DTYPE(0.0))
        scale = DTYPE(1.0 / np.sqrt(cfg.d_head))
        out: dict[int, np.ndarray] = {}
        for role in roles:
            owned = [s for s, (r, _) in tokens_by_slot.items() if r == role]
            w = self.weights[role]
            x = (w.wte[token_vec] + w.wpe[lengths])[:, None, :]  # (n,1,d)
            for layer, buf_k, buf_vt in zip(w.layers, self.slots.k,
                                            self.slots.vt):
                h = _layer_norm(x, layer["ln1_g"], layer["ln1_b"])
                qkv = np.matmul(h, layer["qkv_w"]) + layer["qkv_b"]
                q, k, v = np.split(qkv, 3, axis=2)  # (n,1,d) each
                kh = k.reshape(n, cfg.n_heads, cfg.d_head)
                vh = v.reshape(n, cfg.n_heads, cfg.d_head)
                for s in owned:
                    pos = lengths[s]
                    buf_k[s, :, pos, :] = kh[s]
                    buf_vt[s, :, :, pos] = vh[s]
                q4 = q.reshape(n, cfg.n_heads, cfg.d_head, 1)
                scores = np.matmul(buf_k[:n], q4)  # (n,h,cap,1)
                scores = scores * scale + mask
                weights = _softmax(scores, axis=2)
                ctx = np.matmul(buf_vt[:n], weights)  # (n,h,dh,1)
                ctx = ctx.transpose(0, 3, 1, 2).reshape(n, 1, cfg.d_model)
                x = x + (np.matmul(ctx, layer["proj_w"]) + layer["proj_b"])
                h = _layer_norm(x, layer["ln2_g"], layer["ln2_b"])
                h = _gelu(np.matmul(h, layer["fc_w"]) + layer["fc_b"])
                x = x + (np.matmul(h, layer["fc_proj_w"]) + layer["fc_proj_b"])
            x = _layer_norm(x, *w.ln_f)
            logits = np.matmul(x, w.wte_t)  # (B,1,V)
            for s in owned:
                out[s] = logits[s, 0]
        for s in tokens_by_slot:
            lengths[s] += 1
            self.slots.last_logits[s] = out[s]
        return out
