"""Byte-level BPE vocabulary with six reserved special tokens."""

from __future__ import annotations

import re
from collections import Counter
from functools import lru_cache

from .errors import ConfigError, DataError

SPECIALS = ("<pad>", "<unk>", "<mask>", "<bos>", "<eos>", "<name>")
PAD, UNK, MASK, BOS, EOS, NAME_MASK = range(len(SPECIALS))
N_SPECIAL = len(SPECIALS)
BYTE_OFFSET = N_SPECIAL

# Chunks concatenate back to the input exactly.
_CHUNK = re.compile(r" ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]+|\s+(?!\S)|\s+")


def pretokenize(text: str) -> list[str]:
    return _CHUNK.findall(text)


class Vocabulary:
    """Ordered merge list plus the derived id tables.

    Ids 0-5 are the specials, 6-261 the raw bytes, and each merge appends
    one id in merge order.
    """

    def __init__(self, merges):
        self.merges = [(bytes(a), bytes(b)) for a, b in merges]
        self.token_bytes: list[bytes] = [s.encode() for s in SPECIALS]
        self.token_bytes += [bytes([i]) for i in range(256)]
        self._id = {tb: i for i, tb in enumerate(self.token_bytes) if i >= N_SPECIAL}
        self.ranks: dict[tuple[int, int], int] = {}
        self._merge_out: list[int] = []
        for rank, (a, b) in enumerate(self.merges):
            try:
                pair = (self._id[a], self._id[b])
            except KeyError as exc:
                raise DataError(f"merge {rank} refers to an unknown token") from exc
            new_id = len(self.token_bytes)
            self.token_bytes.append(a + b)
            self._id.setdefault(a + b, new_id)
            # identical byte strings reached by different merges share one id
            self._merge_out.append(self._id[a + b])
            self.ranks.setdefault(pair, rank)
        self._encode_chunk = lru_cache(maxsize=1 << 16)(self._encode_chunk_uncached)

    def __len__(self):
        return len(self.token_bytes)

    @property
    def size(self):
        return len(self.token_bytes)

    def _encode_chunk_uncached(self, chunk: str) -> tuple[int, ...]:
        ids = [b + BYTE_OFFSET for b in chunk.encode("utf-8")]
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best is None or r < best[0]):
                    best = (r, pair)
            if best is None:
                break
            rank, pair = best
            new_id = self._merge_out[rank]
            out, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return tuple(ids)

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in pretokenize(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids, skip_specials=True) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i < N_SPECIAL:
                if not skip_specials:
                    parts.append(SPECIALS[i].encode())
                continue
            parts.append(self.token_bytes[i])
        return b"".join(parts).decode("utf-8", errors="replace")

    def token_text(self, i: int) -> str:
        if i < N_SPECIAL:
            return SPECIALS[i]
        return self.token_bytes[i].decode("utf-8", errors="replace")

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in SPECIALS:
                fh.write(s + "\n")
            for a, b in self.merges:
                fh.write(f"{a.hex()} {b.hex()}\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:N_SPECIAL]) != SPECIALS:
            raise DataError(f"{path}: missing or reordered specials header")
        merges = []
        for lineno, line in enumerate(lines[N_SPECIAL:], start=N_SPECIAL + 1):
            try:
                a, b = line.split(" ")
                merges.append((bytes.fromhex(a), bytes.fromhex(b)))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed merge line") from exc
        return cls(merges)


def _merge_word(word, pair, new):
    out, i = [], 0
    while i < len(word):
        if i + 1 < len(word) and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(new)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def train_bpe(texts, vocab_size: int) -> Vocabulary:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties go to the lexicographically smaller pair of byte strings.  Training
    stops early when no pair occurs any more.
    """
    base = N_SPECIAL + 256
    if vocab_size <= base:
        raise ConfigError(f"vocab_size must exceed {base} (256 bytes + {N_SPECIAL} specials)")
    words = Counter()
    for text in texts:
        for chunk in pretokenize(text):
            words[tuple(bytes([b]) for b in chunk.encode("utf-8"))] += 1
    merges = []
    for _ in range(vocab_size - base):
        pairs = Counter()
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                pairs[pair] += freq
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        joined = best[0] + best[1]
        nxt = Counter()
        for word, freq in words.items():
            nxt[_merge_word(word, best, joined)] += freq
        words = nxt
    return Vocabulary(merges)
