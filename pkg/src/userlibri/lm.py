"""Back-off n-gram language models over word-piece ids.

Token ids follow the word-piece vocabulary: id 0 is the transducer blank
and never predicted, ids ``1..V-1`` are pieces, id ``V`` is end of
sentence and id ``V+1`` is the begin-of-sentence padding symbol (context
only).  Distributions are returned as arrays of length ``V+1``.

Smoothing is interpolated absolute discounting down to a uniform
distribution over the ``V`` predictable symbols.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CAPACITY_ORDERS = {"S": 2, "M": 3, "L": 4}
NESTED_SIZES = (200, 500, 1000, 3000)
# per-model bound on memoized contexts; the cache is simply reset when full
CACHE_LIMIT = 4096


class LMError(ValueError):
    pass


class InsufficientDataError(LMError):
    """Raised when a user has too few sentences for the requested subsets."""


@dataclass(frozen=True)
class PersonalizationConfig:
    mix_weight: float = 0.5
    nested_sizes: tuple[int, ...] = NESTED_SIZES
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mix_weight <= 1.0:
            raise LMError(f"mix_weight must lie in [0, 1], got {self.mix_weight}")
        if any(b <= a for a, b in zip(self.nested_sizes, self.nested_sizes[1:])):
            raise LMError("nested_sizes must be strictly increasing")


class _OrderTable:
    """Sorted k-gram codes with counts, plus per-context totals and type counts."""

    def __init__(self, codes: np.ndarray, base: int):
        keys, counts = np.unique(codes, return_counts=True)
        self.keys = keys
        self.counts = counts.astype(np.float64)
        self.tokens = keys % base
        ctx = keys // base
        self.ctx_keys, start, types = np.unique(ctx, return_index=True, return_counts=True)
        self.ctx_start = start
        self.ctx_types = types
        self.ctx_total = np.add.reduceat(self.counts, start) if len(start) else np.zeros(0)

    def lookup(self, ctx_code: int):
        j = np.searchsorted(self.ctx_keys, ctx_code)
        if j == len(self.ctx_keys) or self.ctx_keys[j] != ctx_code:
            return None
        lo = self.ctx_start[j]
        hi = lo + self.ctx_types[j]
        return self.tokens[lo:hi], self.counts[lo:hi], self.ctx_total[j], self.ctx_types[j]


class BackoffLanguageModel:
    """Interpolated absolute-discount n-gram model, immutable after training."""

    def __init__(self, vocab_size: int, order: int, discount: float = 0.75):
        if order < 0:
            raise LMError("order must be >= 0")
        if not 0.0 <= discount < 1.0:
            raise LMError("discount must lie in [0, 1)")
        self.vocab_size = vocab_size
        self.order = order
        self.discount = discount
        self.eos = vocab_size
        self.bos = vocab_size + 1
        self.base = vocab_size + 2
        self._tables: list[_OrderTable] = []
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._hit_cache: dict[tuple[int, ...], list] = {}
        self.num_sentences = 0

    # -- construction --

    @classmethod
    def uniform(cls, vocab_size: int) -> "BackoffLanguageModel":
        return cls(vocab_size, order=0)

    @classmethod
    def train(
        cls, sentences: Sequence[Sequence[int]], vocab_size: int, order: int, discount: float = 0.75
    ) -> "BackoffLanguageModel":
        if order < 1:
            raise LMError("trained models need order >= 1")
        if not sentences:
            raise LMError("cannot train on an empty corpus")
        if order > 1 and (vocab_size + 2) ** order >= 2**62:
            raise LMError("vocabulary too large for packed n-gram codes at this order")
        model = cls(vocab_size, order, discount)
        pad = [model.bos] * (order - 1)
        flat, starts = [], []
        for sent in sentences:
            for t in sent:
                if not 1 <= t < vocab_size:
                    raise LMError(f"token id {t} outside 1..{vocab_size - 1}")
            starts.append(len(flat) + len(pad))
            flat.extend(pad)
            flat.extend(sent)
            flat.append(model.eos)
        seq = np.asarray(flat, dtype=np.int64)
        is_pred = np.ones(len(seq), dtype=bool)
        for s in starts:
            is_pred[s - len(pad) : s] = False
        pred_pos = np.flatnonzero(is_pred)
        base = model.base
        for k in range(1, order + 1):
            code = np.zeros(len(pred_pos), dtype=np.int64)
            for offset in range(k - 1, -1, -1):
                code = code * base + seq[pred_pos - offset]
            model._tables.append(_OrderTable(code, base))
        model.num_sentences = len(sentences)
        return model

    # -- queries --

    @property
    def support_size(self) -> int:
        return self.vocab_size

    def _context(self, history: Sequence[int]) -> tuple[int, ...]:
        if self.order <= 1:
            return ()
        hist = [self.bos] * (self.order - 1) + list(history)
        return tuple(hist[-(self.order - 1):])

    def _hits(self, ctx: tuple[int, ...]) -> list:
        """Per-order count slices for a context, lowest order first (None where unseen)."""
        hits = self._hit_cache.get(ctx)
        if hits is None:
            hits = []
            for k, table in enumerate(self._tables, start=1):
                code = 0
                for t in ctx[len(ctx) - (k - 1):] if k > 1 else ():
                    code = code * self.base + t
                hits.append(table.lookup(code))
            if len(self._hit_cache) >= CACHE_LIMIT:
                self._hit_cache.clear()
            self._hit_cache[ctx] = hits
        return hits

    def dist(self, history: Sequence[int]) -> np.ndarray:
        """Next-token distribution (length ``V+1``; index 0 is always zero)."""
        ctx = self._context(history)
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        p = np.full(self.vocab_size + 1, 1.0 / self.vocab_size)
        p[0] = 0.0
        d = self.discount
        for hit in self._hits(ctx):
            if hit is None:
                continue
            tokens, counts, total, types = hit
            p = p * (d * types / total)
            p[tokens] += (counts - d) / total
        p.flags.writeable = False
        if len(self._cache) >= CACHE_LIMIT:
            self._cache.clear()
        self._cache[ctx] = p
        return p

    def probs(self, history: Sequence[int], tokens: np.ndarray) -> np.ndarray:
        """``dist(history)[tokens]`` without building the full vector (same arithmetic)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        p = np.full(len(tokens), 1.0 / self.vocab_size)
        d = self.discount
        for hit in self._hits(self._context(history)):
            if hit is None:
                continue
            seen, counts, total, types = hit
            j = np.minimum(np.searchsorted(seen, tokens), len(seen) - 1)
            found = seen[j] == tokens
            p = p * (d * types / total)
            p = p + np.where(found, (counts[j] - d) / total, 0.0)
        return p

    def log_prob(self, token: int, history: Sequence[int] = ()) -> float:
        if not 1 <= token <= self.eos:
            raise LMError(f"token id {token} outside 1..{self.eos}")
        return math.log(self.dist(history)[token])

    def sequence_log_prob(self, tokens: Sequence[int]) -> float:
        total = 0.0
        hist: list[int] = []
        for t in list(tokens) + [self.eos]:
            total += self.log_prob(t, hist)
            hist.append(t)
        return total

    def count(self, ngram: Sequence[int]) -> int:
        k = len(ngram)
        if not 1 <= k <= self.order:
            return 0
        code = 0
        for t in ngram:
            code = code * self.base + t
        table = self._tables[k - 1]
        j = np.searchsorted(table.keys, code)
        return int(table.counts[j]) if j < len(table.keys) and table.keys[j] == code else 0

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.vocab_size}:{self.order}:{self.discount}".encode())
        for table in self._tables:
            h.update(table.keys.tobytes())
            h.update(table.counts.tobytes())
        return h.hexdigest()[:16]

    # -- serialization --

    def iter_counts(self) -> Iterable[tuple[int, tuple[int, ...], int, int]]:
        for k, table in enumerate(self._tables, start=1):
            for key, cnt in zip(table.keys.tolist(), table.counts.tolist()):
                gram = []
                for _ in range(k):
                    gram.append(key % self.base)
                    key //= self.base
                gram.reverse()
                yield k, tuple(gram[:-1]), gram[-1], int(cnt)


class PersonalizedLM:
    """Lazy linear interpolation of a user model with a frozen general model."""

    def __init__(self, general: BackoffLanguageModel, user: BackoffLanguageModel, mix_weight: float):
        if not 0.0 <= mix_weight <= 1.0:
            raise LMError(f"mix_weight must lie in [0, 1], got {mix_weight}")
        if general.vocab_size != user.vocab_size:
            raise LMError("general and user models use different vocabularies")
        self.general = general
        self.user = user
        self.mix_weight = mix_weight
        self.vocab_size = general.vocab_size
        self.order = max(general.order, user.order)
        self.eos = general.eos
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def _key(self, history: Sequence[int]) -> tuple[int, ...]:
        if self.order <= 1:
            return ()
        return tuple(([self.eos + 1] * (self.order - 1) + list(history))[-(self.order - 1):])

    def dist(self, history: Sequence[int]) -> np.ndarray:
        key = self._key(history)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        a = self.mix_weight
        if a == 0.0:
            p = self.general.dist(key)
        elif a == 1.0:
            p = self.user.dist(key)
        else:
            p = a * self.user.dist(key) + (1.0 - a) * self.general.dist(key)
            p.flags.writeable = False
        if len(self._cache) >= CACHE_LIMIT:
            self._cache.clear()
        self._cache[key] = p
        return p

    def probs(self, history: Sequence[int], tokens: np.ndarray) -> np.ndarray:
        key = self._key(history)
        a = self.mix_weight
        if a == 0.0:
            return self.general.probs(key, tokens)
        if a == 1.0:
            return self.user.probs(key, tokens)
        return a * self.user.probs(key, tokens) + (1.0 - a) * self.general.probs(key, tokens)

    log_prob = BackoffLanguageModel.log_prob
    sequence_log_prob = BackoffLanguageModel.sequence_log_prob

    def fingerprint(self) -> str:
        text = f"{self.general.fingerprint()}:{self.user.fingerprint()}:{self.mix_weight}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def train_general(sentences: Sequence[Sequence[int]], vocab_size: int, order: int = 3,
                  discount: float = 0.75) -> BackoffLanguageModel:
    return BackoffLanguageModel.train(sentences, vocab_size, order, discount)


def personalize(general: BackoffLanguageModel, user_sentences: Sequence[Sequence[int]],
                config: PersonalizationConfig = PersonalizationConfig()) -> PersonalizedLM:
    if not user_sentences:
        raise LMError("no personalization sentences")
    user = BackoffLanguageModel.train(user_sentences, general.vocab_size, general.order, general.discount)
    return PersonalizedLM(general, user, config.mix_weight)


def subset_nested(user_sentences: Sequence, sizes: Sequence[int], seed: int) -> dict[int, list]:
    """Nested random subsets: each size's set is the previous one plus fresh draws.

    A single seeded permutation is drawn and every subset is a prefix of it,
    which is the same as adding randomly chosen new sentences at each step.
    Subsets keep the original sentence order.
    """
    sizes = list(sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise LMError("sizes must be strictly increasing")
    if sizes and len(user_sentences) < sizes[-1]:
        raise InsufficientDataError(f"{len(user_sentences)} sentences < required {sizes[-1]}")
    order = np.random.default_rng(seed).permutation(len(user_sentences))
    return {n: [user_sentences[i] for i in np.sort(order[:n])] for n in sizes}


def perplexity(model, sentences: Sequence[Sequence[int]]) -> float:
    if not sentences:
        raise LMError("perplexity of an empty set is undefined")
    total, n = 0.0, 0
    for sent in sentences:
        total += model.sequence_log_prob(sent)
        n += len(sent) + 1
    return math.exp(-total / n)


# -- text serialization --

def _vocab_hash(pieces: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(pieces).encode()).hexdigest()[:16]


def _names(model: BackoffLanguageModel, pieces: Sequence[str]) -> list[str]:
    names = list(pieces[: model.vocab_size])
    return names + ["</s>", "<s>"]


def save_lm(model: BackoffLanguageModel, path: str | Path, pieces: Sequence[str],
            mix_weight: float | None = None, parent: str | None = None) -> None:
    """Write ``<order>\\t<context pieces>\\t<token>\\t<count>`` lines after a header."""
    names = _names(model, pieces)
    rows = sorted(
        (k, " ".join(names[c] for c in ctx), names[t], cnt) for k, ctx, t, cnt in model.iter_counts()
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# order={model.order}\n")
        fh.write(f"# discount={model.discount}\n")
        fh.write(f"# vocab_size={model.vocab_size}\n")
        fh.write(f"# vocab_hash={_vocab_hash(pieces)}\n")
        fh.write(f"# num_sentences={model.num_sentences}\n")
        if mix_weight is not None:
            fh.write(f"# alpha={mix_weight}\n")
            fh.write(f"# parent_hash={parent}\n")
        for k, ctx, tok, cnt in rows:
            fh.write(f"{k}\t{ctx}\t{tok}\t{cnt}\n")


def read_lm_header(path: str | Path) -> dict[str, str]:
    header = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].strip().partition("=")
            header[key] = value
    return header


def load_lm(path: str | Path, pieces: Sequence[str]) -> BackoffLanguageModel:
    header = read_lm_header(path)
    if header.get("vocab_hash") != _vocab_hash(pieces):
        raise LMError(f"{path}: vocabulary hash does not match the word-piece model")
    model = BackoffLanguageModel(int(header["vocab_size"]), int(header["order"]), float(header["discount"]))
    model.num_sentences = int(header.get("num_sentences", 0))
    index = {name: i for i, name in enumerate(_names(model, pieces))}
    per_order: dict[int, tuple[list[int], list[int]]] = {k: ([], []) for k in range(1, model.order + 1)}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# "):
                continue
            k, ctx, tok, cnt = line.rstrip("\n").split("\t")
            code = 0
            for name in (ctx.split(" ") if ctx else []) + [tok]:
                code = code * model.base + index[name]
            codes, counts = per_order[int(k)]
            codes.append(code)
            counts.append(int(cnt))
    for k in range(1, model.order + 1):
        codes, counts = per_order[k]
        expanded = np.repeat(np.asarray(codes, dtype=np.int64), np.asarray(counts, dtype=np.int64))
        model._tables.append(_OrderTable(expanded, model.base))
    return model
