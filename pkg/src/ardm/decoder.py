"""Utterance generation: nucleus/top-k/temperature sampling, ground-truth
(eval) and interactive decoding, self-play, and batched decoding with
dynamic dialog filtering.

Batching is behavior-preserving: every job owns an RNG stream derived from
(global seed, job id), and the inference engine computes identical numbers
for a slot regardless of batch occupancy, so batched output strings equal
the job-at-a-time output strings exactly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dialog_model import ArdmParams, Turn
from .infer import BatchSlots, InferenceEngine, RoleWeights
from .model import CapacityError, params_to_arrays
from .tokenizer import (END_OF_UTTERANCE, ROLE_PREFIX, SYSTEM, USER, Vocab,
                        format_turn)


def other_role(role: str) -> str:
    return SYSTEM if role == USER else USER


@dataclass(frozen=True)
class SamplerConfig:
    top_p: float = 1.0
    top_k: int | None = None  # None: unrestricted (vocab size)
    temperature: float = 1.0
    max_utterance_tokens: int = 48
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if not 0 < self.temperature <= 1:
            raise ValueError("temperature must be in (0, 1]")
        if self.max_utterance_tokens < 1:
            raise ValueError("max_utterance_tokens must be positive")


# Task presets: restaurant-search-style sharp sampling, persuasion-style
# diverse sampling.
PRESETS = {
    "default": SamplerConfig(),
    "camrest": SamplerConfig(top_p=0.2, temperature=0.7),
    "persuasion": SamplerConfig(top_p=0.9, temperature=0.7),
}


def filter_probs(probs: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Nucleus + top-k filtering of an already-normalized distribution.

    Keeps the smallest sorted prefix whose cumulative mass reaches top_p
    (the boundary token included, ties broken by token id), then caps the
    kept set at top_k, and renormalizes.  Dropped tokens get exactly 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep = int(np.searchsorted(cum, cfg.top_p, side="left")) + 1
    if cfg.top_k is not None:
        keep = min(keep, cfg.top_k)
    keep = min(keep, len(probs))
    kept = order[:keep]
    out = np.zeros_like(probs)
    # Renormalize in extended precision so each kept probability is the
    # correctly rounded float64 quotient (0.3/0.8 must be exactly 0.375).
    kept_p = probs[kept].astype(np.longdouble)
    out[kept] = (kept_p / kept_p.sum()).astype(np.float64)
    return out


def filter_logits(logits: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Temperature on logits, softmax, then nucleus/top-k filtering."""
    z = np.asarray(logits, dtype=np.float64) / cfg.temperature
    e = np.exp(z - z.max())
    return filter_probs(e / e.sum(), cfg)


def sample_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform variate."""
    cum = np.cumsum(probs)
    u = rng.random()
    return int(min(np.searchsorted(cum, u, side="right"), len(probs) - 1))


def job_rng(global_seed: int, job_id: int) -> np.random.Generator:
    """Per-dialog RNG stream so batching cannot change outputs."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, job_id]))


# ---------------------------------------------------------------------------
# Single-session decode memory (used by the chat service and sample_utterance)

class DecodeMemory:
    """One dialog's inference state: a single-slot engine plus a turn log."""

    def __init__(self, params: ArdmParams, vocab: Vocab, _engine=None):
        self.vocab = vocab
        if _engine is None:
            weights = _role_weights(params)
            _engine = InferenceEngine(weights, batch_size=1)
        self.engine = _engine
        self.turns: list[Turn] = []

    @property
    def length(self) -> int:
        return int(self.engine.slots.lengths[0])

    def rows(self) -> int:
        return self.engine.slots.resident_rows()

    def clone(self) -> "DecodeMemory":
        dup = DecodeMemory.__new__(DecodeMemory)
        dup.vocab = self.vocab
        eng = InferenceEngine.__new__(InferenceEngine)
        eng.config = self.engine.config
        eng.weights = self.engine.weights
        slots = self.engine.slots
        s2 = BatchSlots.__new__(BatchSlots)
        s2.config = slots.config
        s2.batch_size = 1
        s2.k = [np.array(a) for a in slots.k]
        s2.vt = [np.array(a) for a in slots.vt]
        s2.lengths = np.array(slots.lengths)
        s2.last_logits = list(slots.last_logits)
        eng.slots = s2
        dup.engine = eng
        dup.turns = list(self.turns)
        return dup

    def feed_turn(self, role: str, text: str) -> None:
        """Force-feed a complete framed turn (e.g. a human utterance)."""
        tokens = self.vocab.encode(format_turn(role, text))
        self.engine.feed(0, role, tokens)
        self.turns.append(Turn(role, text))


def _role_weights(params: ArdmParams) -> dict[str, RoleWeights]:
    user = RoleWeights(params_to_arrays(params.user), params.config)
    if params.shared:
        system = user
    else:
        system = RoleWeights(params_to_arrays(params.system), params.config)
    return {USER: user, SYSTEM: system}


@dataclass
class UtteranceResult:
    text: str
    memory: "DecodeMemory"
    truncated: bool = False


def sample_utterance(role: str, memory: DecodeMemory, cfg: SamplerConfig,
                     rng: np.random.Generator) -> UtteranceResult:
    """Generate one turn for `role` on top of `memory` (not mutated).

    The role marker is force-fed; sampling stops at the end-of-utterance
    marker or max_utterance_tokens (then flagged truncated).  The returned
    memory contains the full framed turn.
    """
    mem = memory.clone()
    engine, vocab = mem.engine, mem.vocab
    marker = END_OF_UTTERANCE.encode("utf-8")
    start_len = int(engine.slots.lengths[0])
    try:
        engine.feed(0, role, vocab.encode(ROLE_PREFIX[role]))
    except CapacityError:
        return UtteranceResult("", memory, truncated=True)
    generated: list[int] = []
    truncated = True
    for _ in range(cfg.max_utterance_tokens):
        probs = filter_logits(engine.slots.last_logits[0], cfg)
        tok = sample_token(probs, rng)
        try:
            engine.step({0: (role, tok)})
        except CapacityError:
            break
        generated.append(tok)
        if marker in vocab.decode_bytes(generated):
            truncated = False
            break
    raw = vocab.decode_bytes(generated)
    text = _finalize_utterance(raw, marker)
    # Rewind the sampled tokens and re-feed the canonical encoding of the
    # framed turn, so memory depends only on the turn log (replayable).
    engine.slots.rewind(0, start_len)
    canonical = vocab.encode(format_turn(role, text))
    room = engine.config.max_positions - start_len
    try:
        engine.feed(0, role, canonical[:room])
    except CapacityError:
        pass
    mem.turns.append(Turn(role, text))
    return UtteranceResult(text, mem, truncated)


def _finalize_utterance(raw: bytes, marker: bytes) -> str:
    """Strip everything from the first end-of-utterance marker on."""
    idx = raw.find(marker)
    if idx >= 0:
        raw = raw[:idx]
    return raw.decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# Batched decoding with dynamic dialog filtering.
#
# Each job is a small script (generator) that yields Feed and Gen commands.
# The runner executes feeds immediately and coordinates generation
# token-synchronously across resident jobs; a finished job's slot length is
# zeroed (its memory released) before the next pending job is admitted.

@dataclass
class Feed:
    role: str
    text: str  # framed turn text


@dataclass
class Gen:
    role: str
    cfg: SamplerConfig
    rewind: bool = False  # discard generated rows afterwards (eval mode)


@dataclass
class SelfPlayJob:
    job_id: int
    opening_role: str = USER
    opening_text: str | None = None
    max_turns: int = 8
    cfg_user: SamplerConfig = field(default_factory=SamplerConfig)
    cfg_system: SamplerConfig = field(default_factory=SamplerConfig)


@dataclass
class EvalJob:
    """Generate each `generate_role` turn from ground-truth history only."""
    job_id: int
    dialog: list
    generate_role: str
    cfg: SamplerConfig = field(default_factory=SamplerConfig)


@dataclass
class JobResult:
    job_id: int
    outputs: list[str] = field(default_factory=list)
    dialog: list = field(default_factory=list)
    truncated: bool = False
    error: str | None = None


@dataclass
class RunStats:
    peak_resident_rows: int = 0
    token_steps: int = 0


def _selfplay_script(job: SelfPlayJob, result: JobResult):
    role = job.opening_role
    turns_done = 0
    consecutive_empty = 0
    if job.opening_text is not None:
        yield Feed(role, format_turn(role, job.opening_text))
        result.dialog.append(Turn(role, job.opening_text))
        role = other_role(role)
        turns_done += 1
    while turns_done < job.max_turns:
        cfg = job.cfg_user if role == USER else job.cfg_system
        text, truncated = yield Gen(role, cfg)
        result.outputs.append(text)
        result.dialog.append(Turn(role, text))
        result.truncated = result.truncated or truncated
        consecutive_empty = consecutive_empty + 1 if text == "" else 0
        if consecutive_empty >= 2:
            break
        role = other_role(role)
        turns_done += 1


def _eval_script(job: EvalJob, result: JobResult):
    for turn in job.dialog:
        if turn.role == job.generate_role:
            text, truncated = yield Gen(turn.role, job.cfg, rewind=True)
            result.outputs.append(text)
            result.truncated = result.truncated or truncated
        yield Feed(turn.role, format_turn(turn.role, turn.text))
        result.dialog.append(turn)


def _make_script(job, result: JobResult):
    if isinstance(job, SelfPlayJob):
        return _selfplay_script(job, result)
    if isinstance(job, EvalJob):
        return _eval_script(job, result)
    raise TypeError(f"unknown job type {type(job).__name__}")


class _ActiveJob:
    __slots__ = ("job_id", "script", "result", "rng", "slot", "gen",
                 "generated", "saved_length", "send_value")

    def __init__(self, job, slot, global_seed):
        self.job_id = job.job_id
        self.result = JobResult(job.job_id)
        self.script = _make_script(job, self.result)
        self.rng = job_rng(global_seed, job.job_id)
        self.slot = slot
        self.gen: Gen | None = None
        self.generated: list[int] = []
        self.saved_length = 0
        self.send_value = None


def batch_decode_filtered(jobs, params: ArdmParams, vocab: Vocab,
                          batch_size: int, global_seed: int = 0,
                          return_stats: bool = False):
    """Run decode jobs with at most `batch_size` resident at once.

    Outputs are ordered by position in `jobs` and are string-identical to
    running each job alone (same global_seed).  A job's failure is recorded
    in its result without affecting the others.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    engine = InferenceEngine(_role_weights(params), batch_size)
    marker = END_OF_UTTERANCE.encode("utf-8")
    pending = deque(jobs)
    free_slots = list(range(batch_size - 1, -1, -1))
    active: dict[int, _ActiveJob] = {}
    results: dict[int, JobResult] = {}
    stats = RunStats()

    def finish(aj: _ActiveJob, error: str | None = None):
        if error is not None:
            aj.result.error = error
        results[aj.job_id] = aj.result
        engine.slots.release(aj.slot)
        free_slots.append(aj.slot)
        del active[aj.slot]

    def advance(aj: _ActiveJob):
        """Run the job's script until it needs generation or finishes."""
        while True:
            try:
                cmd = (aj.script.send(aj.send_value)
                       if aj.send_value is not None else next(aj.script))
            except StopIteration:
                finish(aj)
                return
            aj.send_value = None
            if isinstance(cmd, Feed):
                try:
                    engine.feed(aj.slot, cmd.role,
                                vocab.encode(cmd.text))
                except CapacityError as exc:
                    finish(aj, error=str(exc))
                    return
            elif isinstance(cmd, Gen):
                aj.gen = cmd
                aj.generated = []
                aj.saved_length = int(engine.slots.lengths[aj.slot])
                try:
                    engine.feed(aj.slot, cmd.role,
                                vocab.encode(ROLE_PREFIX[cmd.role]))
                except CapacityError:
                    aj.gen = None
                    aj.send_value = ("", True)
                    continue
                return
            else:
                raise TypeError(f"bad script command {cmd!r}")

    def deliver(aj: _ActiveJob, truncated: bool):
        """Hand a finished utterance back to the job's script."""
        text = _finalize_utterance(vocab.decode_bytes(aj.generated), marker)
        gen = aj.gen
        aj.gen = None
        # Discard the raw sampled tokens; eval-mode turns vanish entirely,
        # interactive turns are re-fed in canonical framed encoding.
        engine.slots.rewind(aj.slot, aj.saved_length)
        if not gen.rewind:
            canonical = vocab.encode(format_turn(gen.role, text))
            room = engine.config.max_positions - aj.saved_length
            try:
                engine.feed(aj.slot, gen.role, canonical[:room])
            except CapacityError:
                pass
        aj.send_value = (text, truncated)
        advance(aj)

    def compact():
        """Pack live slots to the front so step() runs on a prefix view.

        Moving a slot copies its state verbatim, so the relocated job's
        numbers are unchanged; this only shrinks the compute width after
        jobs finish (the dynamic-filtering payoff).
        """
        while active and free_slots:
            top = max(active)
            holes = [s for s in free_slots if s < top]
            if not holes:
                break
            dst = min(holes)
            free_slots.remove(dst)
            aj = active.pop(top)
            engine.slots.move_slot(top, dst)
            aj.slot = dst
            active[dst] = aj
            free_slots.append(top)
        free_slots.sort(reverse=True)  # reuse low slots first

    while pending or active:
        compact()
        while pending and free_slots:
            slot = free_slots.pop()
            job = pending.popleft()
            try:
                aj = _ActiveJob(job, slot, global_seed)
            except Exception as exc:  # isolate malformed jobs
                results[job.job_id] = JobResult(job.job_id, error=repr(exc))
                free_slots.append(slot)
                continue
            active[slot] = aj
            try:
                advance(aj)
            except Exception as exc:  # isolate per-job script failures
                finish(aj, error=repr(exc))
        stats.peak_resident_rows = max(stats.peak_resident_rows,
                                       engine.slots.resident_rows())
        generating = {s: aj for s, aj in active.items() if aj.gen is not None}
        if not generating:
            if active and not pending:
                break  # defensive: a script stalled without generating
            continue
        tokens_by_slot: dict[int, tuple[str, int]] = {}
        for slot, aj in generating.items():
            if engine.slots.lengths[slot] + 1 > engine.config.max_positions:
                deliver(aj, truncated=True)
                continue
            probs = filter_logits(engine.slots.last_logits[slot], aj.gen.cfg)
            tokens_by_slot[slot] = (aj.gen.role, sample_token(probs, aj.rng))
        if tokens_by_slot:
            engine.step(tokens_by_slot)
            stats.token_steps += 1
        stats.peak_resident_rows = max(stats.peak_resident_rows,
                                       engine.slots.resident_rows())
        for slot, (role, tok) in tokens_by_slot.items():
            aj = active.get(slot)
            if aj is None or aj.gen is None:
                continue
            aj.generated.append(tok)
            if marker in vocab.decode_bytes(aj.generated):
                deliver(aj, truncated=False)
            elif len(aj.generated) >= aj.gen.cfg.max_utterance_tokens:
                deliver(aj, truncated=True)

    ordered = [results[j.job_id] for j in jobs]
    return (ordered, stats) if return_stats else ordered


def decode_eval_mode(dialog, generate_role: str, params: ArdmParams,
                     vocab: Vocab, cfg: SamplerConfig,
                     global_seed: int = 0) -> list[str]:
    """Generate every `generate_role` turn from ground-truth history < t."""
    job = EvalJob(job_id=0, dialog=list(dialog), generate_role=generate_role,
                  cfg=cfg)
    return batch_decode_filtered([job], params, vocab, batch_size=1,
                                 global_seed=global_seed)[0].outputs


def self_play(opening: str | None, max_turns: int, params: ArdmParams,
              vocab: Vocab, cfg_user: SamplerConfig,
              cfg_system: SamplerConfig, opening_role: str = USER,
              global_seed: int = 0) -> JobResult:
    """Let the two role models talk to each other."""
    if max_turns < 1:
        raise ValueError("max_turns must be at least 1")
    job = SelfPlayJob(job_id=0, opening_role=opening_role,
                      opening_text=opening, max_turns=max_turns,
                      cfg_user=cfg_user, cfg_system=cfg_system)
    return batch_decode_filtered([job], params, vocab, batch_size=1,
                                 global_seed=global_seed)[0]
