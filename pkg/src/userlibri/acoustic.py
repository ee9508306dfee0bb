"""Simulated transducer posteriors from reference word-piece sequences.

Each reference piece yields one label frame whose label posterior is the
frame's acoustic evidence multiplied by an explicit internal-LM prior,
so the decoder's internal-LM subtraction has an exact ground truth.
Blank frames are inserted between label frames at a configurable rate.

Frames are stored sparsely as ``(ids, probs)`` pairs over the word-piece
id space, where id 0 is blank.
"""
from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .wordpiece import BLANK_ID, CONT, UNK_ID

NOISE_PROFILES = {"clean": 0.10, "other": 0.25}


class ChannelError(ValueError):
    pass


class SkipUser(Exception):
    """A user has too little data for the requested procedure."""


def _edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def piece_neighbors(pieces: Sequence[str], max_neighbors: int = 3) -> dict[int, list[int]]:
    """Nearest pieces by edit distance, within the same word-position class.

    Candidates come from shared single-deletion keys, so only pieces within
    edit distance two are ever considered.  Ties go to the lower id.
    """
    keys: dict[tuple[bool, str], set[int]] = defaultdict(set)
    forms = {}
    for i, p in enumerate(pieces):
        if i in (BLANK_ID, UNK_ID):
            continue
        cont = p.startswith(CONT)
        body = p[len(CONT):] if cont else p
        forms[i] = (cont, body)
        keys[(cont, body)].add(i)
        for j in range(len(body)):
            keys[(cont, body[:j] + body[j + 1:])].add(i)
    out = {}
    for i, (cont, body) in forms.items():
        cands = set(keys[(cont, body)])
        for j in range(len(body)):
            cands |= keys[(cont, body[:j] + body[j + 1:])]
        cands.discard(i)
        ranked = sorted((_edit_distance(body, forms[c][1]), c) for c in cands)
        out[i] = [c for _, c in ranked[:max_neighbors]]
    return out


@dataclass
class ConfusionChannel:
    """Row ``r`` of ``matrix`` is the expected acoustic evidence for true piece ``r``.

    ``concentration`` controls per-frame variability: each label frame's
    evidence is a Dirichlet draw around its row (``None`` uses the row
    itself).  ``correction`` is set on adapted channels and maps a
    recognized piece to a distribution over true pieces.
    """

    matrix: np.ndarray
    blank_rate: float = 0.2
    noise_profile: str = "clean"
    concentration: float | None = None
    deletion_mass: float = 0.0
    correction: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.blank_rate < 1.0:
            raise ChannelError("blank_rate must lie in [0, 1)")
        if not 0.0 <= self.deletion_mass < 1.0:
            raise ChannelError("deletion_mass must lie in [0, 1)")
        if self.concentration is not None and self.concentration <= 0:
            raise ChannelError("concentration must be positive")

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    def row_support(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        row = self.matrix[r]
        idx = np.flatnonzero(row)
        return idx, row[idx]


def build_channel(pieces: Sequence[str], noise_profile: str = "clean", noise_mass: float | None = None,
                  blank_rate: float = 0.2, concentration: float | None = None,
                  deletion_mass: float = 0.0, max_neighbors: int = 3) -> ConfusionChannel:
    """Channel whose off-diagonal mass sits on edit-distance neighbors."""
    if noise_mass is None:
        if noise_profile not in NOISE_PROFILES:
            raise ChannelError(f"unknown noise profile {noise_profile!r}")
        noise_mass = NOISE_PROFILES[noise_profile]
    V = len(pieces)
    matrix = np.zeros((V, V))
    matrix[BLANK_ID, BLANK_ID] = 1.0
    matrix[UNK_ID, UNK_ID] = 1.0
    for r, nbrs in piece_neighbors(pieces, max_neighbors).items():
        if nbrs and noise_mass > 0:
            matrix[r, r] = 1.0 - noise_mass
            matrix[r, nbrs] = noise_mass / len(nbrs)
        else:
            matrix[r, r] = 1.0
    return ConfusionChannel(matrix, blank_rate, noise_profile, concentration, deletion_mass)


def bias_channel(channel: ConfusionChannel, seed: int, fraction: float, strength: float,
                 candidates: Sequence[int] | None = None) -> ConfusionChannel:
    """Copy of ``channel`` where some pieces systematically lean toward one neighbor.

    Models a speaker whose pronunciation of those pieces the base model
    keeps mistaking for a specific neighbor.
    """
    rng = np.random.default_rng(seed)
    matrix = channel.matrix.copy()
    pool = [r for r in (candidates if candidates is not None else range(2, channel.vocab_size))
            if np.count_nonzero(matrix[r]) > 1]
    chosen = rng.choice(len(pool), size=int(round(fraction * len(pool))), replace=False) if pool else []
    for j in sorted(chosen):
        r = pool[j]
        nbrs = [v for v in np.flatnonzero(matrix[r]) if v != r]
        n = nbrs[rng.integers(len(nbrs))]
        moved = min(strength, matrix[r, r])
        matrix[r, r] -= moved
        matrix[r, n] += moved
    return replace(channel, matrix=matrix, correction={})


@dataclass
class PosteriorLattice:
    frames: list[tuple[np.ndarray, np.ndarray]]
    prior: np.ndarray
    truth: tuple[int, ...]
    evidence: list[tuple[np.ndarray, np.ndarray] | None] | None = None

    @property
    def vocab_size(self) -> int:
        return len(self.prior)

    def __len__(self) -> int:
        return len(self.frames)

    def dense(self) -> np.ndarray:
        out = np.zeros((len(self.frames), self.vocab_size))
        for t, (idx, p) in enumerate(self.frames):
            out[t, idx] = p
        return out

    @classmethod
    def from_dense(cls, frames: np.ndarray, prior: np.ndarray, truth: Sequence[int] = ()) -> "PosteriorLattice":
        sparse = []
        for row in np.asarray(frames, dtype=np.float64):
            idx = np.flatnonzero(row)
            sparse.append((idx, row[idx]))
        return cls(sparse, np.asarray(prior, dtype=np.float64), tuple(truth))

    def label_frames(self) -> list[int]:
        """Frames whose mass is mostly on labels."""
        out = []
        for t, (idx, p) in enumerate(self.frames):
            blank = p[idx == BLANK_ID].sum()
            if blank < 0.5:
                out.append(t)
        return out


def prior_hash(prior: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(prior, dtype=np.float64).tobytes()).hexdigest()[:16]


def unigram_prior(sentences: Sequence[Sequence[int]], vocab_size: int, exponent: float = 1.0,
                  add: float = 1.0) -> np.ndarray:
    """Smoothed (optionally flattened) label unigram; index 0 (blank) gets zero."""
    counts = np.full(vocab_size, add, dtype=np.float64)
    for sent in sentences:
        np.add.at(counts, np.asarray(sent, dtype=np.int64), 1.0)
    counts[BLANK_ID] = 0.0
    p = counts**exponent
    p[BLANK_ID] = 0.0
    return p / p.sum()


def _check_prior(prior: np.ndarray, vocab_size: int) -> None:
    if prior.shape != (vocab_size,):
        raise ChannelError(f"prior has shape {prior.shape}, expected ({vocab_size},)")
    if np.any(prior[1:] <= 0):
        raise ChannelError("prior must give positive mass to every label")
    if abs(prior[1:].sum() - 1.0) > 1e-9:
        raise ChannelError("prior must be normalized")


def emit(tokens: Sequence[int], channel: ConfusionChannel, prior: np.ndarray, seed: int) -> PosteriorLattice:
    prior = np.asarray(prior, dtype=np.float64)
    _check_prior(prior, channel.vocab_size)
    rng = np.random.default_rng(seed)
    blank_frame = (np.array([BLANK_ID]), np.array([1.0]))
    frames, evidence = [], []
    delta = channel.deletion_mass
    for r in tokens:
        if not 1 <= r < channel.vocab_size:
            raise ChannelError(f"token id {r} outside the label range")
        if channel.blank_rate and rng.random() < channel.blank_rate:
            frames.append(blank_frame)
            evidence.append(None)
        idx, row = channel.row_support(r)
        if channel.concentration is not None and len(idx) > 1:
            ell = rng.dirichlet(channel.concentration * row)
            keep = ell > 0
            idx, ell = idx[keep], ell[keep]
        else:
            ell = row.copy()
        q = ell * prior[idx]
        q /= q.sum()
        if delta > 0:
            frames.append((np.concatenate(([BLANK_ID], idx)), np.concatenate(([delta], (1 - delta) * q))))
        else:
            frames.append((idx, q))
        evidence.append((idx, ell))
    return PosteriorLattice(frames, prior, tuple(tokens), evidence)


def greedy_tokens(lattice: PosteriorLattice) -> list[int]:
    out = []
    for idx, p in lattice.frames:
        best = int(idx[np.argmax(p)])
        if best != BLANK_ID:
            out.append(best)
    return out


# --- speech personalization analog ---------------------------------------------------

def adapt_channel(channel: ConfusionChannel,
                  adaptation_pairs: Sequence[tuple[PosteriorLattice, Sequence[int]]],
                  weight: float = 1.0, shrinkage: float = 2.0) -> ConfusionChannel:
    """Re-estimate confusions from one user's labelled lattices.

    Label frames are aligned one-to-one with the reference pieces (pairs
    whose label-frame count differs from the reference length are
    skipped).  Counts of (true piece, recognized piece) update the channel
    rows and define a recognized-to-true correction, each interpolated
    with the base by ``weight * n / (n + shrinkage)``.
    """
    if not adaptation_pairs:
        raise ChannelError("adaptation needs at least one (lattice, reference) pair")
    if not 0.0 <= weight <= 1.0:
        raise ChannelError("weight must lie in [0, 1]")
    V = channel.vocab_size
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for lattice, ref in adaptation_pairs:
        frames = lattice.label_frames()
        if len(frames) != len(ref):
            continue
        for t, r in zip(frames, ref):
            idx, p = lattice.frames[t]
            lab = idx != BLANK_ID
            h = int(idx[lab][np.argmax(p[lab])])
            counts[(int(r), h)] += 1
    matrix = channel.matrix.copy()
    by_truth: dict[int, dict[int, int]] = defaultdict(dict)
    by_heard: dict[int, dict[int, int]] = defaultdict(dict)
    for (r, h), n in counts.items():
        by_truth[r][h] = n
        by_heard[h][r] = n
    if weight > 0:
        for r, hs in by_truth.items():
            n = sum(hs.values())
            w = weight * n / (n + shrinkage)
            emp = np.zeros(V)
            for h, c in hs.items():
                emp[h] = c / n
            matrix[r] = (1 - w) * matrix[r] + w * emp
    correction = {}
    if weight > 0:
        for h, rs in sorted(by_heard.items()):
            n = sum(rs.values())
            u = weight * n / (n + shrinkage)
            row = np.zeros(V)
            row[h] = 1 - u
            for r, c in rs.items():
                row[r] += u * c / n
            if row[h] != 1.0:
                correction[h] = row
    return replace(channel, matrix=matrix, correction=correction)


def recalibrate(lattice: PosteriorLattice, channel: ConfusionChannel) -> PosteriorLattice:
    """Apply an adapted channel's correction to every frame's label posterior."""
    if not channel.correction:
        return lattice
    frames = []
    for idx, p in lattice.frames:
        hits = [(h, q) for h, q in zip(idx.tolist(), p.tolist()) if h in channel.correction]
        if not hits:
            frames.append((idx, p))
            continue
        dense = np.zeros(lattice.vocab_size)
        dense[idx] = p
        for h, q in hits:
            dense[h] -= q
            dense += q * channel.correction[h]
        dense[dense < 0] = 0.0
        new_idx = np.flatnonzero(dense)
        frames.append((new_idx, dense[new_idx] / dense.sum()))
    return PosteriorLattice(frames, lattice.prior, lattice.truth, None)


def kfold_split(items: Sequence, k: int = 5, seed: int = 0) -> list[tuple[list, list]]:
    if len(items) < k:
        raise SkipUser(f"{len(items)} items < {k} folds")
    order = np.random.default_rng(seed).permutation(len(items))
    folds = [sorted(f.tolist()) for f in np.array_split(order, k)]
    out = []
    for i, test in enumerate(folds):
        held = set(test)
        train = [items[j] for j in range(len(items)) if j not in held]
        out.append((train, [items[j] for j in test]))
    return out


# --- lattice text format ------------------------------------------------------------

def write_lattice(lattice: PosteriorLattice, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# truth: " + " ".join(map(str, lattice.truth)) + "\n")
        fh.write(f"# vocab_size: {lattice.vocab_size}\n")
        fh.write(f"# prior_hash: {prior_hash(lattice.prior)}\n")
        for idx, p in lattice.frames:
            fh.write(" ".join(f"{i}:{v!r}" for i, v in zip(idx.tolist(), p.tolist())) + "\n")


def read_lattice(path: str | Path, prior: np.ndarray) -> PosteriorLattice:
    """Load a lattice written by :func:`write_lattice` or produced externally."""
    header, frames = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh.read().splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(":")
                header[key.strip()] = value.strip()
                continue
            pairs = [tok.split(":") for tok in line.split()]
            idx = np.array([int(i) for i, _ in pairs], dtype=np.int64)
            p = np.array([float(v) for _, v in pairs])
            if abs(p.sum() - 1.0) > 1e-6:
                raise ChannelError(f"{path}: frame {len(frames)} sums to {p.sum()}")
            frames.append((idx, p))
    prior = np.asarray(prior, dtype=np.float64)
    if "prior_hash" in header and header["prior_hash"] != prior_hash(prior):
        raise ChannelError(f"{path}: lattice was built with a different prior")
    if "vocab_size" in header and int(header["vocab_size"]) != len(prior):
        raise ChannelError(f"{path}: vocabulary size mismatch")
    truth = tuple(int(t) for t in header.get("truth", "").split())
    return PosteriorLattice(frames, prior, truth)


def write_prior(prior: np.ndarray, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, v in enumerate(np.asarray(prior).tolist()):
            fh.write(f"{i}\t{v!r}\n")


def read_prior(path: str | Path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = [line.split("\t") for line in fh.read().splitlines() if line]
    return np.array([float(v) for _, v in rows])
