"""Word-piece subword model trained by greedy frequency pair merging.

Pieces that do not start a word carry the ``##`` prefix.  Ids 0 and 1 are
reserved for the transducer blank and for unknown characters.
"""
from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BLANK = "<blank>"
UNK = "<unk>"
BLANK_ID = 0
UNK_ID = 1
CONT = "##"


class WordPieceError(ValueError):
    pass


@dataclass
class WordPieceModel:
    pieces: list[str]
    merge_rank: dict[tuple[str, str], int]
    _index: dict[str, int] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.pieces[:2] != [BLANK, UNK]:
            raise WordPieceError("ids 0 and 1 must be the blank and unk pieces")
        self._index = {p: i for i, p in enumerate(self.pieces)}
        if len(self._index) != len(self.pieces):
            raise WordPieceError("duplicate pieces in vocabulary")

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def alphabet(self) -> set[str]:
        return {p[len(CONT):] if p.startswith(CONT) else p for p in self.pieces[2:] if len(p.removeprefix(CONT)) == 1}

    def piece_id(self, piece: str) -> int:
        return self._index.get(piece, UNK_ID)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.pieces).encode()).hexdigest()[:16]

    def encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = [ch if i == 0 else CONT + ch for i, ch in enumerate(word)]
        while len(symbols) > 1:
            best = None
            for i in range(len(symbols) - 1):
                rank = self.merge_rank.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, i)
            if best is None:
                break
            i = best[1]
            symbols[i : i + 2] = [_join(symbols[i], symbols[i + 1])]
        ids = tuple(self.piece_id(s) for s in symbols)
        self._cache[word] = ids
        return ids

    def covers(self, text: str) -> bool:
        """True when every character of ``text`` is in the training alphabet."""
        return all(UNK_ID not in self.encode_word(w) for w in text.split())

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, piece in enumerate(self.pieces):
                fh.write(f"{piece}\t{i}\n")
            for (left, right), rank in sorted(self.merge_rank.items(), key=lambda kv: kv[1]):
                fh.write(f"{left}\t{right}\t{rank}\n")

    @classmethod
    def load(cls, path: str | Path) -> "WordPieceModel":
        pieces: dict[int, str] = {}
        merges = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh.read().splitlines():
                cols = line.split("\t")
                if len(cols) == 2:
                    pieces[int(cols[1])] = cols[0]
                elif len(cols) == 3:
                    merges[(cols[0], cols[1])] = int(cols[2])
                else:
                    raise WordPieceError(f"bad line in {path}: {line!r}")
        return cls([pieces[i] for i in range(len(pieces))], merges)


def _join(left: str, right: str) -> str:
    return left + right[len(CONT):]


def _base_symbols(words: Iterable[str]) -> list[str]:
    chars = sorted({ch for w in words for ch in w})
    return [s for ch in chars for s in (ch, CONT + ch)]


def train_wpm(sentences: Sequence[str], vocab_size: int = 1024) -> WordPieceModel:
    """Greedy pair-merge training.

    The base vocabulary holds both the word-initial and continuation form of
    every character seen.  Each step merges the most frequent adjacent pair
    (ties broken by the lexicographically smallest pair) until the target
    size is reached or no pair occurs at least twice.
    """
    if not sentences:
        raise WordPieceError("no training sentences")
    word_freq = Counter(w for s in sentences for w in s.split())
    base = _base_symbols(word_freq)
    if vocab_size < len(base) + 2:
        raise WordPieceError(
            f"vocab_size {vocab_size} is below the {len(base)} base symbols plus 2 reserved tokens"
        )
    words = sorted(word_freq)
    freqs = [word_freq[w] for w in words]
    segs = [[ch if i == 0 else CONT + ch for i, ch in enumerate(w)] for w in words]

    pair_count: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, seg in enumerate(segs):
        for pair in zip(seg, seg[1:]):
            pair_count[pair] += freqs[wi]
            where[pair].add(wi)

    pieces = [BLANK, UNK] + base
    known = set(pieces)
    merges: dict[tuple[str, str], int] = {}
    while len(pieces) < vocab_size and pair_count:
        best = min(pair_count, key=lambda p: (-pair_count[p], p))
        if pair_count[best] < 2:
            break
        merged = _join(*best)
        merges[best] = len(merges)
        if merged not in known:
            pieces.append(merged)
            known.add(merged)
        for wi in sorted(where.pop(best, ())):
            seg, f = segs[wi], freqs[wi]
            for pair in zip(seg, seg[1:]):
                pair_count[pair] -= f
                if pair_count[pair] <= 0:
                    del pair_count[pair]
                if pair != best:
                    where[pair].discard(wi)
            out, i = [], 0
            while i < len(seg):
                if i + 1 < len(seg) and (seg[i], seg[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            segs[wi] = out
            for pair in zip(out, out[1:]):
                pair_count[pair] += f
                where[pair].add(wi)
        pair_count.pop(best, None)
    return WordPieceModel(pieces, merges)


def encode(text: str, model: WordPieceModel) -> list[int]:
    return [i for w in text.split() for i in model.encode_word(w)]


def decode(ids: Sequence[int], model: WordPieceModel) -> str:
    words: list[str] = []
    for i in ids:
        if not 0 <= i < len(model.pieces) or i == BLANK_ID:
            raise WordPieceError(f"token id {i} is not a piece id")
        piece = model.pieces[i]
        if piece.startswith(CONT) and words:
            words[-1] += piece[len(CONT):]
        else:
            words.append(piece.removeprefix(CONT))
    return " ".join(words)


def piece_strings(ids: Sequence[int], model: WordPieceModel) -> list[str]:
    return [model.pieces[i] for i in ids]
