"""Corpus plumbing: delexicalization, DB-result prefixes, time
normalization, subsampling, and a synthetic two-role dialog generator.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .dialog_model import Turn, make_dialog
from .tokenizer import SYSTEM, USER


class DataError(ValueError):
    pass


_SLOT_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")


@dataclass
class EntityDB:
    """Slot name -> surface values, plus an optional row table for lookups."""

    domain: str
    slots: dict = field(default_factory=dict)  # slot -> [values]
    rows: list = field(default_factory=list)   # [{slot: value}]

    def __post_init__(self):
        for slot, values in self.slots.items():
            if not _SLOT_NAME_RE.match(slot):
                raise DataError(f"bad slot name {slot!r}")
            if not values or any(not isinstance(v, str) or not v
                                 for v in values):
                raise DataError(f"slot {slot!r} needs non-empty string values")

    def match_count(self, constraints: dict) -> int:
        """Number of rows consistent with every given slot=value pair."""
        return sum(1 for row in self.rows
                   if all(row.get(s) == v for s, v in constraints.items()))

    def to_json(self) -> str:
        return json.dumps({"domain": self.domain, "slots": self.slots,
                           "rows": self.rows}, indent=2)

    @classmethod
    def from_json(cls, blob: str) -> "EntityDB":
        d = json.loads(blob)
        return cls(domain=d["domain"], slots=d["slots"],
                   rows=d.get("rows", []))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "EntityDB":
        with open(path) as f:
            return cls.from_json(f.read())


@dataclass
class DialogRecord:
    """One dialog plus optional task annotations, JSONL-serializable.

    turns: [(role, text, db_result or None)] where db_result is
    {"domain", "match_count", "booking_status"?}.
    """

    id: str
    turns: list = field(default_factory=list)
    requested_slots: list = field(default_factory=list)
    goal: dict = field(default_factory=dict)

    def __post_init__(self):
        for t in self.turns:
            if t[0] not in (USER, SYSTEM):
                raise DataError(f"unknown role {t[0]!r} in record {self.id}")

    def to_dialog(self, with_db_prefix: bool = True) -> list[Turn]:
        """Flatten into role/text turns, optionally inlining DB prefixes."""
        out = []
        for role, text, db in self.turns:
            if db is not None and with_db_prefix:
                text = db_result_prefix(**db) + " " + text
            out.append(Turn(role, text))
        return out

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "turns": self.turns,
            "requested_slots": self.requested_slots, "goal": self.goal,
        })

    @classmethod
    def from_json(cls, blob: str) -> "DialogRecord":
        d = json.loads(blob)
        turns = [(r, t, db) for r, t, db in d["turns"]]
        return cls(id=d["id"], turns=turns,
                   requested_slots=d.get("requested_slots", []),
                   goal=d.get("goal", {}))


def save_corpus(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def load_corpus(path) -> list[DialogRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(DialogRecord.from_json(line))
    return records


# ---------------------------------------------------------------------------
# Delexicalization.

def _value_index(db: EntityDB):
    """(value, slot) pairs sorted longest value first for longest-match."""
    pairs = []
    for slot, values in db.slots.items():
        for v in values:
            pairs.append((v, slot))
    pairs.sort(key=lambda p: (-len(p[0]), p[0]))
    return pairs


def delexicalize(text: str, db: EntityDB) -> tuple[str, list]:
    """Replace DB surface values with "[slot]" placeholders.

    Longest match wins; scanning is left to right; already-placed
    placeholders are never rewritten, so the operation is idempotent.
    Returns (new text, slot_map) where slot_map lists
    {"slot", "value", "start"} for each replacement, start being the
    placeholder's offset in the returned text.
    """
    pairs = _value_index(db)
    out = []
    slot_map = []
    i = 0
    while i < len(text):
        if text[i] == "[":
            close = text.find("]", i)
            if close != -1 and _SLOT_NAME_RE.match(text[i + 1:close]):
                out.append(text[i:close + 1])
                i = close + 1
                continue
        hit = None
        for value, slot in pairs:
            if text.startswith(value, i):
                hit = (value, slot)
                break
        if hit is None:
            out.append(text[i])
            i += 1
            continue
        value, slot = hit
        start = sum(len(s) for s in out)
        out.append(f"[{slot}]")
        slot_map.append({"slot": slot, "value": value, "start": start})
        i += len(value)
    return "".join(out), slot_map


_PLACEHOLDER_RE = re.compile(r"\[([a-z][a-z0-9_]*)\]")


class RelexError(DataError):
    def __init__(self, slot: str):
        super().__init__(f"no value available for slot {slot!r}")
        self.slot = slot


def relexicalize(text: str, slot_map=None, db_row: dict | None = None) -> str:
    """Substitute placeholders back to surface values.

    A slot_map (as produced by delexicalize) restores original values in
    order; a db_row dict fills any remaining placeholders by slot name.
    Unresolvable placeholders raise RelexError naming the slot.
    """
    queue = {}
    for entry in slot_map or []:
        queue.setdefault(entry["slot"], []).append(entry["value"])

    def pick(m):
        slot = m.group(1)
        if queue.get(slot):
            return queue[slot].pop(0)
        if db_row and slot in db_row:
            return db_row[slot]
        raise RelexError(slot)

    return _PLACEHOLDER_RE.sub(pick, text)


# ---------------------------------------------------------------------------
# DB-result prefixes and time normalization.

def db_result_prefix(domain: str, match_count: int,
                     booking_status: str | None = None) -> str:
    """Wire form of a DB lookup outcome: "domain;count[;status]"."""
    if match_count < 0:
        raise DataError("match_count must be non-negative")
    base = f"{domain};{match_count}"
    return base if booking_status is None else f"{base};{booking_status}"


def parse_db_prefix(prefix: str):
    parts = prefix.split(";")
    if len(parts) not in (2, 3):
        raise DataError(f"bad DB prefix {prefix!r}")
    out = {"domain": parts[0], "match_count": int(parts[1])}
    if len(parts) == 3:
        out["booking_status"] = parts[2]
    return out


def attach_db_result(turn: Turn, domain: str, match_count: int,
                     booking_status: str | None = None) -> Turn:
    """Prepend the DB outcome to a system turn's text."""
    if turn.role != SYSTEM:
        raise DataError("DB results attach to system turns only")
    prefix = db_result_prefix(domain, match_count, booking_status)
    return Turn(turn.role, f"{prefix} {turn.text}")


_TIME_RE = re.compile(r"\b(\d{1,2})(?::([0-5]\d))?\s*([ap])\.?m\.?\b",
                      re.IGNORECASE)


def normalize_times(text: str) -> str:
    """Rewrite h[:mm] am/pm clock expressions as 24-hour HH:MM."""

    def conv(m):
        hour = int(m.group(1))
        if not 1 <= hour <= 12:
            return m.group(0)
        minute = int(m.group(2) or 0)
        if m.group(3).lower() == "a":
            hour = 0 if hour == 12 else hour
        else:
            hour = 12 if hour == 12 else hour + 12
        return f"{hour:02d}:{minute:02d}"

    return _TIME_RE.sub(conv, text)


def subsample(corpus, fraction: float, seed: int = 0):
    """Deterministic sample of ceil(fraction * N) items."""
    if not 0 < fraction <= 1:
        raise DataError("fraction must be in (0, 1]")
    n = len(corpus)
    keep = math.ceil(fraction * n)
    if keep == 0 or n == 0:
        raise DataError("subsample would be empty")
    if keep == n:
        return list(corpus)
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(n, size=keep, replace=False).tolist())
    return [corpus[i] for i in idx]


def extract_entities(history: str, db: EntityDB) -> dict:
    """Report DB values mentioned in the history; last mention wins per slot."""
    found = {}
    order = []
    for value, slot in _value_index(db):
        for m in re.finditer(re.escape(value), history):
            order.append((m.start(), m.end(), slot, value))
    # Longer values were indexed first; drop mentions inside a longer match.
    order.sort(key=lambda t: (t[0], -(t[1] - t[0])))
    claimed = []
    for start, end, slot, value in order:
        if any(s <= start and end <= e for s, e in claimed):
            continue
        claimed.append((start, end))
        if slot not in found or start > found[slot][0]:
            found[slot] = (start, value)
    return {slot: value for slot, (start, value) in found.items()}


# ---------------------------------------------------------------------------
# Synthetic corpus generator.
#
# A small booking domain with disjoint user/system phrase banks, so the two
# roles have measurably different unigram statistics and a per-role model has
# something real to learn.

_FOODS = ["noodle", "tapas", "curry", "pizza", "sushi", "ramen", "bistro",
          "grill"]
_AREAS = ["north", "south", "east", "west", "centre"]
_PRICES = ["cheap", "moderate", "expensive"]
_NAMES = ["golden wok", "blue lagoon", "spice garden", "river cafe",
          "old mill", "corner house", "lucky star", "green door",
          "red lantern", "city diner"]
_PHONES = ["01223 356354", "01223 812660", "01223 566188", "01223 302010",
           "01223 461661", "01223 248882", "01223 577786", "01223 323178",
           "01223 412430", "01223 351880"]
_POSTCODES = ["cb21ab", "cb43le", "cb58aq", "cb12qa", "cb30ad", "cb17dy",
              "cb21uj", "cb41uy", "cb23qf", "cb58ba"]

_USER_OPENERS = ["hi, i want a {price} {food} place in the {area}",
                 "hello, looking for some {food} food, {price} if possible",
                 "i need a {price} restaurant serving {food} in the {area}",
                 "can you find me a {food} spot in the {area} part of town",
                 "good evening, anywhere doing {price} {food} around the "
                 "{area}",
                 "hey, fancy eating {food} tonight, somewhere {price}",
                 "my friends suggested {food} cuisine, ideally {price} and "
                 "near the {area}",
                 "please help me book a {price} table for {food} in the "
                 "{area}"]
_USER_ASKS = {"restaurant_phone": ["what is their phone number",
                                   "could i get the phone please"],
              "restaurant_postcode": ["whats the postcode",
                                      "can you tell me the postcode"],
              "restaurant_address": ["where is it located",
                                     "what is the address"]}
_USER_CLOSERS = ["great, thanks a lot, bye", "perfect, thank you, goodbye",
                 "thats all i needed, cheers"]

_SYS_OFFERS = ["[restaurant_name] is a nice {price} {food} restaurant in "
               "the {area}",
               "you could try [restaurant_name], a {price} place with "
               "{food} food in the {area}",
               "i recommend [restaurant_name] for {food}, it is {price} "
               "and in the {area}"]
_SYS_ANSWERS = {"restaurant_phone": ["their phone number is "
                                     "[restaurant_phone]",
                                     "you can reach them on "
                                     "[restaurant_phone]"],
                "restaurant_postcode": ["the postcode is "
                                        "[restaurant_postcode]",
                                        "it is in postcode "
                                        "[restaurant_postcode]"],
                "restaurant_address": ["it is on [restaurant_address]",
                                       "the address is "
                                       "[restaurant_address]"]}
_SYS_CLOSERS = ["you are welcome, enjoy your meal",
                "glad to help, have a lovely day",
                "my pleasure, goodbye"]


def build_entity_db(seed: int = 0) -> EntityDB:
    rng = np.random.default_rng(seed)
    rows = []
    for i, name in enumerate(_NAMES):
        rows.append({
            "restaurant_name": name,
            "restaurant_phone": _PHONES[i],
            "restaurant_postcode": _POSTCODES[i],
            "restaurant_address": f"{int(rng.integers(1, 99))} station road",
            "food": _FOODS[i % len(_FOODS)],
            "area": _AREAS[i % len(_AREAS)],
            "pricerange": _PRICES[i % len(_PRICES)],
        })
    slots = {
        "restaurant_name": _NAMES,
        "restaurant_phone": _PHONES,
        "restaurant_postcode": _POSTCODES,
        "restaurant_address": sorted({r["restaurant_address"] for r in rows}),
        "food": _FOODS,
        "area": _AREAS,
        "pricerange": _PRICES,
    }
    return EntityDB(domain="restaurant", slots=slots, rows=rows)


def synth_corpus(n_dialogs: int, grammar_seed: int = 0
                 ) -> tuple[list[DialogRecord], EntityDB]:
    """Template-grammar booking dialogs with gold requested-slot labels.

    User and system turns draw from disjoint phrase banks; system turns carry
    DB-result annotations and speak in placeholders (the corpus is stored
    delexicalized, as the training data should be).
    """
    if n_dialogs < 1:
        raise DataError("n_dialogs must be at least 1")
    db = build_entity_db(grammar_seed)
    rng = np.random.default_rng(grammar_seed)
    records = []
    for i in range(n_dialogs):
        food = _FOODS[rng.integers(len(_FOODS))]
        area = _AREAS[rng.integers(len(_AREAS))]
        price = _PRICES[rng.integers(len(_PRICES))]
        fills = {"food": food, "area": area, "price": price}
        count = int(db.match_count({"food": food}))
        asks = list(_USER_ASKS)
        rng.shuffle(asks)
        asks = asks[:int(rng.integers(1, 3))]

        turns = []
        opener = _USER_OPENERS[rng.integers(len(_USER_OPENERS))]
        turns.append((USER, opener.format(**fills), None))
        offer = _SYS_OFFERS[rng.integers(len(_SYS_OFFERS))]
        turns.append((SYSTEM, offer.format(**fills),
                      {"domain": db.domain, "match_count": count}))
        for slot in asks:
            ask = _USER_ASKS[slot][rng.integers(len(_USER_ASKS[slot]))]
            turns.append((USER, ask, None))
            ans = _SYS_ANSWERS[slot][rng.integers(len(_SYS_ANSWERS[slot]))]
            turns.append((SYSTEM, ans,
                          {"domain": db.domain, "match_count": count}))
        turns.append((USER, _USER_CLOSERS[rng.integers(len(_USER_CLOSERS))],
                      None))
        turns.append((SYSTEM, _SYS_CLOSERS[rng.integers(len(_SYS_CLOSERS))],
                      {"domain": db.domain, "match_count": count,
                       "booking_status": "succeed"}))
        records.append(DialogRecord(
            id=f"synth-{grammar_seed}-{i:05d}", turns=turns,
            requested_slots=sorted(asks),
            goal={"food": food, "area": area, "pricerange": price}))
    return records, db


def role_unigram_entropy(records) -> dict:
    """Whitespace-unigram entropy (nats) of each role's training-form text.

    Measured on the text the models are trained on, DB prefixes included.
    """
    counts = {USER: {}, SYSTEM: {}}
    for rec in records:
        for turn in rec.to_dialog(with_db_prefix=True):
            for w in turn.text.split():
                counts[turn.role][w] = counts[turn.role].get(w, 0) + 1
    out = {}
    for role, c in counts.items():
        total = sum(c.values())
        p = np.array(list(c.values())) / total
        out[role] = float(-(p * np.log(p)).sum())
    return out


def records_to_dialogs(records, with_db_prefix: bool = True):
    return [rec.to_dialog(with_db_prefix) for rec in records]
