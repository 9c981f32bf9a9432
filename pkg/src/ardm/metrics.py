"""Dialog evaluation metrics: perplexity, corpus BLEU, Success F1, and
exact-set entity match, plus report assembly over generated dialogs.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .dialog_model import ArdmParams, dialog_nll
from .tokenizer import SYSTEM, USER, Vocab

BOTH = "both"

_BLEU_SMOOTHING = 1e-9


class MetricError(ValueError):
    pass


def perplexity(params: ArdmParams, corpus, vocab: Vocab,
               role_filter: str = BOTH) -> float:
    """exp(total NLL / scored tokens) over turns matching the role filter."""
    if role_filter not in (USER, SYSTEM, BOTH):
        raise MetricError(f"bad role filter {role_filter!r}")
    nll = 0.0
    tokens = 0
    for dialog in corpus:
        r = dialog_nll(dialog, params, vocab)
        if role_filter in (USER, BOTH):
            nll += r["user_nll"].item()
            tokens += r["token_counts"][USER]
        if role_filter in (SYSTEM, BOTH):
            nll += r["system_nll"].item()
            tokens += r["token_counts"][SYSTEM]
    if tokens == 0:
        raise MetricError("no scored tokens under this role filter")
    return float(np.exp(nll / tokens))


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 100] over whitespace-tokenized strings.

    Geometric mean of modified n-gram precisions up to max_n times the
    brevity penalty; zero precisions are floored at 1e-9 rather than
    zeroing the score.
    """
    if len(hypotheses) != len(references):
        raise MetricError("hypothesis/reference length mismatch")
    if not hypotheses:
        raise MetricError("empty corpus")
    matched = np.zeros(max_n)
    total = np.zeros(max_n)
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = hyp.split()
        r = ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            matched[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)
    # Orders with no candidate n-grams anywhere (corpus shorter than n)
    # are excluded; zero precisions elsewhere are floored, not zeroed.
    live = total > 0
    if not live.any():
        return 0.0
    precisions = np.maximum(matched[live] / total[live], _BLEU_SMOOTHING)
    log_p = np.log(precisions).mean()
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    return float(100.0 * bp * np.exp(log_p))


def slots_in_text(text: str, requestable=None) -> set:
    """Placeholder names appearing in a delexicalized string."""
    import re
    found = set(re.findall(r"\[([a-z][a-z0-9_]*)\]", text))
    if requestable is not None:
        found &= set(requestable)
    return found


def success_f1(predicted_slot_sets, gold_slot_sets) -> float:
    """Micro-averaged F1 of offered requestable slots against the gold sets."""
    if len(predicted_slot_sets) != len(gold_slot_sets):
        raise MetricError("predicted/gold length mismatch")
    tp = fp = fn = 0
    for pred, gold in zip(predicted_slot_sets, gold_slot_sets):
        pred, gold = set(pred), set(gold)
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def entity_match_rate(predicted_sets, gold_sets) -> float:
    """Fraction of dialogs whose predicted entity set is exactly the gold set."""
    if len(predicted_sets) != len(gold_sets):
        raise MetricError("predicted/gold length mismatch")
    if not predicted_sets:
        raise MetricError("empty corpus")
    hits = sum(1 for p, g in zip(predicted_sets, gold_sets)
               if dict(p) == dict(g))
    return hits / len(predicted_sets)


@dataclass
class EvalReport:
    ppl_user: float
    ppl_system: float
    ppl_both: float
    bleu_1: float
    bleu_2: float
    bleu_4: float
    success_f1: float | None = None
    entity_match_rate: float | None = None
    n_dialogs: int = 0
    n_generated_turns: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ppl_user", "ppl_system", "ppl_both"):
            if getattr(self, name) < 1.0:
                raise MetricError(f"{name} below 1")
        for name in ("bleu_1", "bleu_2", "bleu_4"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise MetricError(f"{name} out of [0, 100]")
        for name in ("success_f1", "entity_match_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name} out of [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def build_report(params: ArdmParams, vocab: Vocab, corpus,
                 generations, records=None, db=None,
                 config_echo=None) -> EvalReport:
    """Assemble the full report.

    `generations` maps dialog index -> list of generated system-turn texts
    aligned with the reference system turns (eval-mode output).  When
    `records` carry requested-slot annotations, Success F1 is computed on
    the generations; with a DB, the regex entity tracker is scored against
    the records' goal labels.
    """
    hyps, refs = [], []
    n_generated = 0
    for i, dialog in enumerate(corpus):
        gen = generations.get(i, []) if isinstance(generations, dict) \
            else generations[i]
        sys_refs = [t.text for t in dialog if t.role == SYSTEM]
        for h, r in zip(gen, sys_refs):
            hyps.append(h)
            refs.append(r)
        n_generated += len(gen)
    report = dict(
        ppl_user=perplexity(params, corpus, vocab, USER),
        ppl_system=perplexity(params, corpus, vocab, SYSTEM),
        ppl_both=perplexity(params, corpus, vocab, BOTH),
        bleu_1=bleu(hyps, refs, 1) if hyps else 0.0,
        bleu_2=bleu(hyps, refs, 2) if hyps else 0.0,
        bleu_4=bleu(hyps, refs, 4) if hyps else 0.0,
        n_dialogs=len(corpus),
        n_generated_turns=n_generated,
        config=dict(config_echo or {}),
    )
    if records is not None:
        requestable = None
        if db is not None:
            requestable = [s for s in db.slots if s.startswith("restaurant_")]
        pred_sets, gold_sets = [], []
        for i, rec in enumerate(records):
            gen = generations.get(i, []) if isinstance(generations, dict) \
                else generations[i]
            pred = set()
            for text in gen:
                pred |= slots_in_text(text, requestable)
            pred_sets.append(pred)
            gold_sets.append(set(rec.requested_slots))
        report["success_f1"] = success_f1(pred_sets, gold_sets)
        if db is not None:
            from .data import extract_entities
            tracked, gold_entities = [], []
            for i, rec in enumerate(records):
                history = " ".join(t.text for t in corpus[i]
                                   if t.role == USER)
                found = extract_entities(history, db)
                tracked.append({s: v for s, v in found.items()
                                if s in rec.goal})
                gold_entities.append(dict(rec.goal))
            report["entity_match_rate"] = entity_match_rate(tracked,
                                                            gold_entities)
    return EvalReport(**report)
