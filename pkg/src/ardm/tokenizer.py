"""Byte-level BPE vocabulary plus the role-marker turn framing.

The vocabulary starts from the 256 single bytes and learns an ordered merge
list from a corpus, so any byte string round-trips exactly.  Dialog turns are
framed as plain text ("A: " / "B: " prefix, "\\n\\n\\n" terminator) and run
through BPE like everything else; no atomic special ids.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter

USER = "user"
SYSTEM = "system"
ROLES = (USER, SYSTEM)

ROLE_PREFIX = {USER: "A: ", SYSTEM: "B: "}
END_OF_UTTERANCE = "\n\n\n"


class TokenizerError(ValueError):
    pass


def format_turn(role: str, text: str) -> str:
    """Frame one utterance: role marker prefix + text + end marker."""
    if role not in ROLE_PREFIX:
        raise TokenizerError(f"unknown role {role!r}")
    if END_OF_UTTERANCE in text:
        raise TokenizerError("utterance contains the end-of-utterance marker")
    return ROLE_PREFIX[role] + text + END_OF_UTTERANCE


def split_turn(framed: str) -> tuple[str, str]:
    """Inverse of format_turn; raises if the framing is malformed."""
    for role, prefix in ROLE_PREFIX.items():
        if framed.startswith(prefix) and framed.endswith(END_OF_UTTERANCE):
            return role, framed[len(prefix):-len(END_OF_UTTERANCE)]
    raise TokenizerError("text is not a framed turn")


class Vocab:
    """256 byte symbols plus an ordered list of learned merges."""

    def __init__(self, merges: list[tuple[int, int]]):
        self.symbols: list[bytes] = [bytes([i]) for i in range(256)]
        self.merges: list[tuple[int, int]] = []
        self.ranks: dict[tuple[int, int], int] = {}
        for left, right in merges:
            self._add_merge(left, right)
        self.role_prefixes = dict(ROLE_PREFIX)
        self.end_of_utterance = END_OF_UTTERANCE

    def _add_merge(self, left: int, right: int) -> int:
        if left >= len(self.symbols) or right >= len(self.symbols):
            raise TokenizerError("merge refers to a symbol not yet defined")
        new_id = len(self.symbols)
        self.ranks[(left, right)] = len(self.merges)
        self.merges.append((left, right))
        self.symbols.append(self.symbols[left] + self.symbols[right])
        return new_id

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode_bytes(self, data: bytes) -> list[int]:
        ids = list(data)
        ranks = self.ranks
        while len(ids) > 1:
            best_rank = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            merged_id = 256 + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def decode_bytes(self, ids) -> bytes:
        try:
            return b"".join(self.symbols[i] for i in ids)
        except IndexError:
            raise TokenizerError("token id out of range") from None

    def encode(self, text: str) -> list[int]:
        return self.encode_bytes(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def to_json(self) -> str:
        merges = [[self.symbols[l].decode("latin-1"),
                   self.symbols[r].decode("latin-1")] for l, r in self.merges]
        return json.dumps({"merges": merges, "size": self.size})

    @classmethod
    def from_json(cls, blob: str) -> "Vocab":
        doc = json.loads(blob)
        vocab = cls([])
        index = {bytes([i]): i for i in range(256)}
        for left_s, right_s in doc["merges"]:
            left = index[left_s.encode("latin-1")]
            right = index[right_s.encode("latin-1")]
            new_id = vocab._add_merge(left, right)
            index[vocab.symbols[new_id]] = new_id
        if vocab.size != doc["size"]:
            raise TokenizerError("vocab size does not match merge list")
        return vocab

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())


def train_bpe(corpus, vocab_size: int, seed: int = 0) -> Vocab:
    """Learn a BPE vocabulary of `vocab_size` symbols from text documents.

    Deterministic: the highest-count pair wins each round, ties broken by the
    lexicographically smallest (left bytes, right bytes).  `seed` is accepted
    for interface uniformity; the algorithm has no random choices.  Stops
    early if no adjacent pair remains.
    """
    del seed
    if isinstance(corpus, (str, bytes)):
        corpus = [corpus]
    docs = [d.encode("utf-8") if isinstance(d, str) else bytes(d)
            for d in corpus]
    if not docs or all(len(d) == 0 for d in docs):
        raise TokenizerError("empty corpus")
    if vocab_size < 256:
        raise TokenizerError("vocab_size must be at least 256")

    vocab = Vocab([])
    # One flat symbol array with -1 separators between documents, as a doubly
    # linked list so merges are local updates.
    sym: list[int] = []
    for d in docs:
        sym.extend(d)
        sym.append(-1)
    sym.pop()
    n = len(sym)
    nxt = list(range(1, n)) + [-1]
    prv = [-1] + list(range(n - 1))

    counts: Counter = Counter()
    positions: dict[tuple[int, int], set[int]] = {}
    for i in range(n - 1):
        a, b = sym[i], sym[i + 1]
        if a >= 0 and b >= 0:
            counts[(a, b)] += 1
            positions.setdefault((a, b), set()).add(i)

    def sort_key(pair):
        return (vocab.symbols[pair[0]], vocab.symbols[pair[1]])

    heap = [(-c, sort_key(p), p) for p, c in counts.items()]
    heapq.heapify(heap)

    def dec(pair, pos):
        if counts.get(pair, 0) <= 0:
            return
        counts[pair] -= 1
        positions[pair].discard(pos)

    def inc(pair, pos):
        counts[pair] += 1
        positions.setdefault(pair, set()).add(pos)
        heapq.heappush(heap, (-counts[pair], sort_key(pair), pair))

    while vocab.size < vocab_size:
        pair = None
        while heap:
            neg, key, cand = heapq.heappop(heap)
            actual = counts.get(cand, 0)
            if actual <= 0:
                continue
            if actual != -neg:
                # Count changed since this entry was pushed; reinsert fresh.
                heapq.heappush(heap, (-actual, key, cand))
                continue
            pair = cand
            break
        if pair is None:
            break
        new_id = vocab._add_merge(*pair)
        left, right = pair
        for i in sorted(positions[pair]):
            j = nxt[i]
            # Stale entry: an earlier merge in this round consumed a neighbor.
            if j == -1 or sym[i] != left or sym[j] != right:
                continue
            p, k = prv[i], nxt[j]
            if p != -1 and sym[p] >= 0:
                dec((sym[p], left), p)
            dec(pair, i)
            if k != -1 and sym[k] >= 0:
                dec((right, sym[k]), j)
            sym[i] = new_id
            sym[j] = -2  # dead cell
            nxt[i] = k
            if k != -1:
                prv[k] = i
            if p != -1 and sym[p] >= 0:
                inc((sym[p], new_id), p)
            if k != -1 and sym[k] >= 0:
                inc((new_id, sym[k]), i)
        counts.pop(pair, None)
        positions.pop(pair, None)
    return vocab
