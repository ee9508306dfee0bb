"""Turn raw book texts and utterance metadata into per-user datasets.

A *user* is one speaker reading one book.  Each user gets that speaker's
utterances plus the remaining text of the book as LM training sentences,
minus any sentence that substantially overlaps a test transcript of the
same book.
"""
from __future__ import annotations

import csv
import math
import re
import statistics
import unicodedata
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class CorpusError(ValueError):
    pass


class EncodingRepairError(CorpusError):
    def __init__(self, book_id: str, offset: int):
        super().__init__(f"book {book_id}: undecodable byte at offset {offset}")
        self.book_id = book_id
        self.offset = offset


class MalformedBoilerplateError(CorpusError):
    pass


class MissingBookError(CorpusError):
    def __init__(self, book_ids: Sequence[str]):
        super().__init__("no LM text for book(s): " + ", ".join(book_ids))
        self.book_ids = list(book_ids)


class EmptySplitError(CorpusError):
    pass


class BoilerplateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RawBook:
    book_id: str
    data: bytes
    declared_encoding: str | None = None

    def __post_init__(self):
        if not self.book_id:
            raise CorpusError("book_id must be non-empty")
        if not self.data:
            raise CorpusError(f"book {self.book_id}: empty file")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    book_id: str
    transcript: tuple[str, ...]
    split: str = "test"

    def __post_init__(self):
        if not self.transcript:
            raise CorpusError(f"utterance {self.utterance_id}: empty transcript")

    @property
    def user_id(self) -> str:
        return f"{self.speaker_id}-{self.book_id}"

    @property
    def text(self) -> str:
        return " ".join(self.transcript)


@dataclass
class UserDataset:
    user_id: str
    utterances: list[UtteranceRecord]
    lm_sentences: list[str]

    @property
    def speaker_id(self) -> str:
        return self.utterances[0].speaker_id

    @property
    def book_id(self) -> str:
        return self.utterances[0].book_id

    @property
    def split(self) -> str:
        return self.utterances[0].split


@dataclass(frozen=True)
class CorpusStats:
    user_count: int
    avg_utterances: float
    median_utterances: float
    max_utterances: int
    users_with_10_utterances: int
    total_lm_sentences: int
    avg_lm_sentences: float
    median_lm_sentences: float
    max_lm_sentences: int
    users_with_3k_sentences: int

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("# Users", str(self.user_count)),
            ("Utts: Avg. # per User", f"{self.avg_utterances:.1f}"),
            ("Utts: Median # per User", f"{self.median_utterances:g}"),
            ("Utts: # Users with >=10", str(self.users_with_10_utterances)),
            ("Utts: Max # for 1 User", str(self.max_utterances)),
            ("LM: Total #", f"{self.total_lm_sentences:,}"),
            ("LM: Avg. # per User", f"{self.avg_lm_sentences:,.0f}"),
            ("LM: Median # per User", f"{self.median_lm_sentences:,g}"),
            ("LM: # Users with >=3k", str(self.users_with_3k_sentences)),
            ("LM: Max # for 1 User", f"{self.max_lm_sentences:,}"),
        ]


# --- encoding -----------------------------------------------------------------

_C1_CONTROLS = re.compile("[\x80-\x9f]")


def normalize_encoding(book: RawBook) -> str:
    """Decode a book's bytes, repairing legacy single-byte encodings.

    Tries the declared encoding (if any), then UTF-8, then Windows-1252,
    then Latin-1.  A Latin-1 result that still contains C1 control
    characters is rejected since those bytes are not text in any of the
    supported encodings.
    """
    data = book.data
    if data.startswith(b"\xef\xbb\xbf"):
        data = data[3:]
    candidates = ["utf-8", "cp1252"]
    if book.declared_encoding:
        candidates.insert(0, book.declared_encoding)
    first_bad = None
    for enc in candidates:
        try:
            text = data.decode(enc)
        except (UnicodeDecodeError, LookupError) as err:
            if isinstance(err, UnicodeDecodeError) and enc == "cp1252":
                first_bad = err.start
            continue
        return text.replace("\r\n", "\n").replace("\r", "\n")
    text = data.decode("latin-1")
    bad = _C1_CONTROLS.search(text)
    if bad is not None:
        raise EncodingRepairError(book.book_id, bad.start() if first_bad is None else first_bad)
    return text.replace("\r\n", "\n").replace("\r", "\n")


# --- boilerplate ---------------------------------------------------------------

_START_MARKERS = re.compile(
    r"^[ \t]*(?:\*+[ \t]*START OF (?:THE|THIS) PROJECT GUTENBERG E-?BOOK\b.*"
    r"|\*END\*THE SMALL PRINT!.*)$",
    re.IGNORECASE | re.MULTILINE,
)
_END_MARKERS = re.compile(
    r"^[ \t]*(?:\*+[ \t]*END OF (?:THE|THIS) PROJECT GUTENBERG E-?BOOK\b.*"
    r"|END OF (?:THE )?PROJECT GUTENBERG(?:'S)? (?:E-?BOOK|E-?TEXT)\b.*)$",
    re.IGNORECASE | re.MULTILINE,
)


def strip_boilerplate(text: str) -> str:
    start = _START_MARKERS.search(text)
    end = _END_MARKERS.search(text)
    if start is None and end is None:
        warnings.warn("no Project Gutenberg markers found; text kept whole", BoilerplateWarning, stacklevel=2)
        return text
    if start is not None and end is not None and end.start() < start.start():
        raise MalformedBoilerplateError("end marker precedes start marker")
    lo = start.end() if start is not None else 0
    hi = end.start() if end is not None else len(text)
    return text[lo:hi].strip()


# --- sentences -----------------------------------------------------------------

ABBREVIATIONS = frozenset({"MR", "MRS", "DR", "ST"})

# terminal mark(s), optional closing quotes/brackets, then whitespace
_BOUNDARY = re.compile(r"[.!?]+[\"'\)\]’”]*(?=\s)")
_WS = re.compile(r"\s+")


def segment_sentences(body_text: str) -> list[str]:
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(body_text):
        if m.group().startswith(".") and len(m.group()) == 1:
            word = body_text[start : m.start()].rsplit(None, 1)
            if word and word[-1].strip("\"'(‘“").upper() in ABBREVIATIONS:
                continue
        piece = _WS.sub(" ", body_text[start : m.end()]).strip()
        if piece:
            sentences.append(piece)
        start = m.end()
    tail = _WS.sub(" ", body_text[start:]).strip()
    if tail:
        sentences.append(tail)
    return sentences


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _strip_word(word: str) -> str:
    if word[0].isalnum() and word[-1].isalnum():
        return word
    lo, hi = 0, len(word)
    while lo < hi and _is_punct(word[lo]):
        lo += 1
    while hi > lo and _is_punct(word[hi - 1]):
        hi -= 1
    return word[lo:hi]


_ASCII_UPPER = str.maketrans("abcdefghijklmnopqrstuvwxyz", "ABCDEFGHIJKLMNOPQRSTUVWXYZ")


def normalize_sentence(sentence: str) -> str:
    words = (_strip_word(w) for w in sentence.split())
    return " ".join(w for w in words if w).translate(_ASCII_UPPER)


# --- overlap filter --------------------------------------------------------------

def overlap_run_length(n_tokens: int) -> int:
    """Length of the contiguous run that makes an n-token sentence a duplicate."""
    return max(1, math.ceil(round(0.8 * n_tokens, 9)))


class TranscriptIndex:
    """Hashed lookup of every contiguous token run in a set of transcripts."""

    def __init__(self, transcripts: Iterable[Sequence[str]]):
        self._transcripts = [tuple(t) for t in transcripts]
        self._runs: dict[int, set[tuple[str, ...]]] = {}

    def runs(self, length: int) -> set[tuple[str, ...]]:
        if length not in self._runs:
            self._runs[length] = {
                t[i : i + length] for t in self._transcripts for i in range(len(t) - length + 1)
            }
        return self._runs[length]

    def overlaps(self, tokens: Sequence[str]) -> bool:
        tokens = tuple(tokens)
        if not tokens:
            return False
        length = overlap_run_length(len(tokens))
        runs = self.runs(length)
        return any(tokens[i : i + length] in runs for i in range(len(tokens) - length + 1))


def filter_overlap(sentences: Sequence[str], same_book_transcripts: Iterable[Sequence[str] | str]) -> list[str]:
    index = TranscriptIndex(t.split() if isinstance(t, str) else t for t in same_book_transcripts)
    return [s for s in sentences if not index.overlaps(s.split())]


# --- users and statistics -----------------------------------------------------------

def cluster_users(
    utterances: Sequence[UtteranceRecord], lm_pool: Mapping[str, Sequence[str]]
) -> list[UserDataset]:
    """Group utterances into speaker+book users and attach filtered book text.

    Each book's sentences are filtered once, against every transcript of
    that book in ``utterances``, and shared by all users reading it.
    """
    missing = sorted({u.book_id for u in utterances} - set(lm_pool))
    if missing:
        raise MissingBookError(missing)
    by_user: dict[str, list[UtteranceRecord]] = defaultdict(list)
    by_book: dict[str, list[tuple[str, ...]]] = defaultdict(list)
    for utt in utterances:
        by_user[utt.user_id].append(utt)
        by_book[utt.book_id].append(utt.transcript)
    filtered = {book: filter_overlap(lm_pool[book], by_book[book]) for book in sorted(by_book)}
    return [
        UserDataset(user_id=uid, utterances=by_user[uid], lm_sentences=filtered[by_user[uid][0].book_id])
        for uid in sorted(by_user)
    ]


def compute_stats(users: Sequence[UserDataset]) -> CorpusStats:
    if not users:
        raise EmptySplitError("cannot compute statistics for an empty split")
    utts = [len(u.utterances) for u in users]
    sents = [len(u.lm_sentences) for u in users]
    return CorpusStats(
        user_count=len(users),
        avg_utterances=sum(utts) / len(utts),
        median_utterances=statistics.median(utts),
        max_utterances=max(utts),
        users_with_10_utterances=sum(n >= 10 for n in utts),
        total_lm_sentences=sum(sents),
        avg_lm_sentences=sum(sents) / len(sents),
        median_lm_sentences=statistics.median(sents),
        max_lm_sentences=max(sents),
        users_with_3k_sentences=sum(n >= 3000 for n in sents),
    )


def stats_by_split(users: Sequence[UserDataset]) -> dict[str, CorpusStats]:
    groups: dict[str, list[UserDataset]] = defaultdict(list)
    for user in users:
        groups[user.split].append(user)
    return {split: compute_stats(groups[split]) for split in sorted(groups)}


def book_sentences(book: RawBook) -> list[str]:
    """Full text pipeline for one book: decode, strip, segment, normalize."""
    body = strip_boilerplate(normalize_encoding(book))
    out = []
    for raw in segment_sentences(body):
        norm = normalize_sentence(raw)
        if norm:
            out.append(norm)
    return out


# --- file I/O --------------------------------------------------------------------

UTTERANCE_COLUMNS = ("utterance_id", "speaker_id", "book_id", "transcript")


def read_metadata(path: str | Path) -> list[UtteranceRecord]:
    """Read utterance metadata TSV; an optional fifth ``split`` column is honored."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for lineno, row in enumerate(reader, 1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0] == "utterance_id":
                continue
            if len(row) < 4:
                raise CorpusError(f"{path}:{lineno}: expected at least 4 columns, got {len(row)}")
            transcript = tuple(normalize_sentence(row[3]).split())
            split = row[4] if len(row) > 4 and row[4] else "test"
            records.append(UtteranceRecord(row[0], row[1], row[2], transcript, split))
    return records


def write_utterances(path: Path, utterances: Sequence[UtteranceRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(UTTERANCE_COLUMNS) + "\n")
        for u in utterances:
            fh.write(f"{u.utterance_id}\t{u.speaker_id}\t{u.book_id}\t{u.text}\n")


def read_utterances(path: str | Path, split: str) -> list[UtteranceRecord]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    out = []
    for line in lines[1:]:
        uid, spk, book, text = line.split("\t")
        out.append(UtteranceRecord(uid, spk, book, tuple(text.split()), split))
    return out


def write_lines(path: Path, lines: Iterable[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


METADATA_COLUMNS = ("user_id", "split", "speaker_id", "book_id", "num_utterances", "num_lm_sentences")


@dataclass
class ForgeResult:
    users: list[UserDataset]
    stats: dict[str, CorpusStats]
    errors: list[str] = field(default_factory=list)


def forge(books_dir: str | Path, metadata_tsv: str | Path, out_dir: str | Path) -> ForgeResult:
    """Build the on-disk dataset layout from raw books and utterance metadata."""
    books_dir, out_dir = Path(books_dir), Path(out_dir)
    utterances = read_metadata(metadata_tsv)
    pool: dict[str, list[str]] = {}
    errors = []
    for book_id in sorted({u.book_id for u in utterances}):
        path = books_dir / f"{book_id}.txt"
        try:
            pool[book_id] = book_sentences(RawBook(book_id, path.read_bytes()))
        except (OSError, CorpusError) as err:
            errors.append(f"{path}: {err}")
    if errors:
        return ForgeResult([], {}, errors)
    users = cluster_users(utterances, pool)
    written = set()
    for user in users:
        if user.book_id not in written:
            write_lines(out_dir / "lm_data" / f"{user.book_id}_lm_data.txt", user.lm_sentences)
            written.add(user.book_id)
        write_utterances(out_dir / "audio_data" / user.split / user.user_id / "utterances.tsv", user.utterances)
    with open(out_dir / "metadata.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(METADATA_COLUMNS) + "\n")
        for u in users:
            fh.write(f"{u.user_id}\t{u.split}\t{u.speaker_id}\t{u.book_id}\t{len(u.utterances)}\t{len(u.lm_sentences)}\n")
    stats = stats_by_split(users)
    write_stats(out_dir / "stats.tsv", stats)
    return ForgeResult(users, stats)


def write_stats(path: Path, stats: Mapping[str, CorpusStats]) -> None:
    splits = sorted(stats)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metadata\t" + "\t".join(splits) + "\n")
        columns = [dict(stats[s].rows()) for s in splits]
        for key, _ in stats[splits[0]].rows():
            fh.write(key + "\t" + "\t".join(col[key] for col in columns) + "\n")


@dataclass
class DatasetUser:
    """A forged user as seen from disk; LM text is loaded only on request."""

    user_id: str
    split: str
    speaker_id: str
    book_id: str
    utterances: list[UtteranceRecord]
    lm_path: Path


def load_dataset(root: str | Path) -> list[DatasetUser]:
    root = Path(root)
    meta = root / "metadata.tsv"
    if not meta.exists():
        raise FileNotFoundError(f"{meta} not found; run `userlibri forge` first")
    users = []
    with open(meta, encoding="utf-8") as fh:
        rows = fh.read().splitlines()[1:]
    for row in rows:
        uid, split, spk, book, *_ = row.split("\t")
        utts = read_utterances(root / "audio_data" / split / uid / "utterances.tsv", split)
        users.append(DatasetUser(uid, split, spk, book, utts, root / "lm_data" / f"{book}_lm_data.txt"))
    return users
