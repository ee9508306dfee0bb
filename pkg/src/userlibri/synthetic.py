"""Seeded synthetic stand-in for book text plus read-speech metadata.

The generator builds a pseudo-word language with a Zipfian general
vocabulary and a shared inventory of multi-word phrases.  Each test book
adds its own character names (some one edit away from common words), its
own topic words, and its own recurring phrases, so text from the rest of
the book is informative about the utterances read from it.  Books are
rendered as raw, line-wrapped prose with Gutenberg-style boilerplate and
a mix of UTF-8 and Windows-1252 encodings, then go through ``forge``
like real data would.
"""
from __future__ import annotations

import bisect
import random
import textwrap
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ABBREVIATIONS, BoilerplateWarning, ForgeResult, forge, write_lines

ONSETS = list("BCDFGHKLMNPRSTVWZ") + ["BR", "CH", "DR", "GR", "KL", "PL", "SH", "ST", "TR", "TH"]
VOWELS = ["A", "E", "I", "O", "U", "AI", "EA", "OU"]
CODAS = ["", "", "", "N", "R", "S", "L", "T", "RN", "ND", "CK"]
SPLITS = ("test-clean", "test-other")
GENERAL_LM_FILE = "general_lm.txt"


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    users_per_split: int = 20
    utterances_per_user: int = 40
    lm_sentences_per_user: int = 4000
    general_sentences: int = 30_000
    general_vocab: int = 3000
    global_phrases: int = 1500
    names_per_book: int = 6
    topic_words_per_book: int = 40
    phrases_per_book: int = 150
    zipf_exponent: float = 1.1
    # chunk mixture for book sentences: book phrase, global phrase, topic word, name, general word
    book_mix: tuple[float, ...] = (0.25, 0.35, 0.10, 0.05, 0.25)
    # chunk mixture for general sentences: global phrase, general word
    general_mix: tuple[float, ...] = (0.6, 0.4)


def _zipf_cum(n: int, s: float) -> list[float]:
    w = 1.0 / np.arange(1, n + 1) ** s
    return np.cumsum(w / w.sum()).tolist()


class _WordFactory:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set(ABBREVIATIONS)

    def _fresh(self, min_syl: int, max_syl: int) -> str:
        rng = self.rng
        while True:
            n = rng.randint(min_syl, max_syl)
            word = "".join(
                rng.choice(ONSETS) + rng.choice(VOWELS) + (rng.choice(CODAS) if i == n - 1 else "")
                for i in range(n)
            )
            if word not in self.used:
                self.used.add(word)
                return word

    def words(self, n: int, min_syl: int = 1, max_syl: int = 3) -> list[str]:
        return [self._fresh(min_syl, max_syl) for _ in range(n)]

    def mutation(self, base: str) -> str | None:
        """One-letter substitution or insertion of ``base`` that is not yet a word."""
        rng = self.rng
        letters = "ABCDEFGHIKLMNOPRSTUVZ"
        for _ in range(20):
            i = rng.randrange(len(base) + 1)
            ch = rng.choice(letters)
            cand = base[:i] + ch + base[i:] if rng.random() < 0.5 else base[:i] + ch + base[i + 1:]
            if cand != base and cand not in self.used:
                self.used.add(cand)
                return cand
        return None


@dataclass
class _Book:
    book_id: str
    names: list[str]
    topic: list[str]
    topic_cum: list[float]
    phrases: list[list[str]]
    phrase_cum: list[float]


class SyntheticLanguage:
    def __init__(self, config: SyntheticConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.factory = _WordFactory(self.rng)
        c = config
        self.vocab = self.factory.words(c.general_vocab)
        # a few possessives so the corpus exercises intra-word apostrophes
        for i in range(0, 60, 3):
            self.vocab[200 + i] = self.vocab[200 + i] + "'S"
        self.word_cum = _zipf_cum(len(self.vocab), c.zipf_exponent)
        self.phrases = [self._draw_general(self.rng.randint(2, 4)) for _ in range(c.global_phrases)]
        self.phrase_cum = _zipf_cum(len(self.phrases), 1.0)
        self.book_kinds = np.cumsum(np.asarray(c.book_mix) / np.sum(c.book_mix)).tolist()

    def _draw_general(self, n: int) -> list[str]:
        return self.rng.choices(self.vocab, cum_weights=self.word_cum, k=n)

    def _global_phrase(self) -> list[str]:
        return self.rng.choices(self.phrases, cum_weights=self.phrase_cum)[0]

    def general_sentence(self) -> list[str]:
        rng = self.rng
        out: list[str] = []
        for _ in range(rng.randint(2, 4)):
            if rng.random() < self.config.general_mix[0]:
                out += self._global_phrase()
            else:
                out += self._draw_general(1)
        return out

    def new_book(self, book_id: str) -> _Book:
        c, rng = self.config, self.rng
        names = []
        for i in range(c.names_per_book):
            mutated = None
            if i % 2 == 0:
                # near-homophone of a fairly common word
                mutated = self.factory.mutation(self.vocab[rng.randrange(20, 400)])
            names.append(mutated or self.factory.words(1, 2, 3)[0])
        topic = self.factory.words(c.topic_words_per_book, 2, 3)
        topic_cum = _zipf_cum(len(topic), 1.0)
        phrases = []
        for _ in range(c.phrases_per_book):
            words = []
            for _ in range(rng.randint(2, 4)):
                u = rng.random()
                if u < 0.2:
                    words.append(rng.choice(names))
                elif u < 0.55:
                    words += rng.choices(topic, cum_weights=topic_cum)
                else:
                    words += self._draw_general(1)
            phrases.append(words)
        return _Book(book_id, names, topic, topic_cum, phrases, _zipf_cum(len(phrases), 0.8))

    def book_sentence(self, book: _Book) -> list[str]:
        rng = self.rng
        out: list[str] = []
        for _ in range(rng.randint(2, 4)):
            kind = bisect.bisect_right(self.book_kinds, rng.random())
            if kind == 0:
                out += rng.choices(book.phrases, cum_weights=book.phrase_cum)[0]
            elif kind == 1:
                out += self._global_phrase()
            elif kind == 2:
                out += rng.choices(book.topic, cum_weights=book.topic_cum)
            elif kind == 3:
                out.append(rng.choice(book.names))
            else:
                out += self._draw_general(1)
        return out


# --- rendering raw book files ------------------------------------------------------

_START = [
    "*** START OF THIS PROJECT GUTENBERG EBOOK {title} ***",
    "***START OF THE PROJECT GUTENBERG EBOOK {title}***",
    "*** start of this project gutenberg ebook {title} ***",
    "***** START OF THIS PROJECT GUTENBERG EBOOK {title} *****",
]
_END = [
    "*** END OF THIS PROJECT GUTENBERG EBOOK {title} ***",
    "***END OF THE PROJECT GUTENBERG EBOOK {title}***",
    "*** end of this project gutenberg ebook {title} ***",
    "***** END OF THIS PROJECT GUTENBERG EBOOK {title} *****",
]
_HEADER = "The Project Gutenberg EBook of {title}\n\nThis eBook is for the use of anyone anywhere at no cost.\n"
_FOOTER = "Updated editions will replace the previous one. Creating the works from\npublic domain print editions means that no one owns a copy.\n"


def _render_sentence(words: list[str], names: set[str], rng: random.Random) -> str:
    out = []
    for i, w in enumerate(words):
        tok = w.capitalize() if i == 0 or w in names else w.lower()
        if i < len(words) - 1 and rng.random() < 0.08:
            tok += ","
        out.append(tok)
    text = " ".join(out) + rng.choice(".....!?")
    if rng.random() < 0.1:
        text = "“" + text + "”"
    return text


def render_book(title: str, sentences: list[list[str]], names: set[str], rng: random.Random,
                style: int) -> str:
    paras, cur = [], []
    for sent in sentences:
        cur.append(_render_sentence(sent, names, rng))
        if rng.random() < 0.15:
            paras.append(textwrap.fill(" ".join(cur), width=70))
            cur = []
    if cur:
        paras.append(textwrap.fill(" ".join(cur), width=70))
    body = "\n\n".join(paras)
    if style < 0:
        return body + "\n"
    return (
        _HEADER.format(title=title) + "\n" + _START[style].format(title=title.upper()) + "\n\n"
        + body + "\n\n" + _END[style].format(title=title.upper()) + "\n\n" + _FOOTER
    )


@dataclass
class SyntheticDataset:
    root: Path
    forge_result: ForgeResult
    general_lm: Path


def generate(out_dir: str | Path, config: SyntheticConfig = SyntheticConfig()) -> SyntheticDataset:
    """Write raw books, metadata and general LM text, then forge the dataset.

    Layout: ``raw/books/<book>.txt``, ``raw/metadata.tsv``, the forged
    dataset at the top level, and ``general_lm.txt`` next to it.
    """
    out = Path(out_dir)
    raw = out / "raw"
    (raw / "books").mkdir(parents=True, exist_ok=True)
    lang = SyntheticLanguage(config)
    rng = lang.rng

    general = [" ".join(lang.general_sentence()) for _ in range(config.general_sentences)]
    write_lines(out / GENERAL_LM_FILE, general)

    meta_rows = []
    n_users = config.users_per_split
    for s, split in enumerate(SPLITS):
        books: list[_Book] = []
        for u in range(n_users):
            speaker = f"{1000 + s * 100 + u}"
            # the last speaker of each split reads the same book as the first
            if u == n_users - 1 and n_users > 1:
                book = books[0]
            else:
                book = lang.new_book(f"{10000 + s * 1000 + u}")
                books.append(book)
            for k in range(config.utterances_per_user):
                words = lang.book_sentence(book)
                meta_rows.append((f"{speaker}-{book.book_id}-{k:04d}", speaker, book.book_id, " ".join(words), split))
        for i, book in enumerate(books):
            transcripts = [r[3].split() for r in meta_rows if r[2] == book.book_id]
            text = [lang.book_sentence(book) for _ in range(config.lm_sentences_per_user)]
            for t in transcripts:
                text.insert(rng.randrange(len(text) + 1), t)
            style = -1 if i == 1 else i % len(_START)
            rendered = render_book(f"Book {book.book_id}", text, set(book.names), rng, style)
            encoding = "cp1252" if i % 3 == 2 else "utf-8"
            (raw / "books" / f"{book.book_id}.txt").write_bytes(rendered.encode(encoding))

    with open(raw / "metadata.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("utterance_id\tspeaker_id\tbook_id\ttranscript\tsplit\n")
        for row in meta_rows:
            fh.write("\t".join(row) + "\n")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoilerplateWarning)
        result = forge(raw / "books", raw / "metadata.tsv", out)
    return SyntheticDataset(out, result, out / GENERAL_LM_FILE)
