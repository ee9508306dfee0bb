"""Time-synchronous beam search with HAT-style shallow fusion.

Label expansions are scored as::

    log p_asr(t) + ext_weight * log P_ext(t | history) - ilm_weight * log p_ilm(t)

where ``p_asr`` is the frame posterior sharpened or flattened by
``post_temperature`` and ``p_ilm`` is the internal-LM prior smoothed by
``ilm_temperature`` (both renormalized).  Blank expansions only carry the
acoustic term.  At most one label is emitted per frame; hypotheses with
identical label sequences are merged by keeping the best-scoring path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .acoustic import PosteriorLattice
from .wordpiece import BLANK_ID


class DecoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    beam_width: int = 4
    top_k: int = 4
    post_temperature: float = 1.0
    ext_weight: float = 0.15
    ilm_weight: float = 0.0
    ilm_temperature: float = 1.0

    def __post_init__(self):
        if self.beam_width < 1 or self.top_k < 1:
            raise DecoderConfigError("beam_width and top_k must be >= 1")
        if self.post_temperature <= 0 or self.ilm_temperature <= 0:
            raise DecoderConfigError("temperatures must be positive")
        if self.ext_weight < 0 or self.ilm_weight < 0:
            raise DecoderConfigError("fusion weights must be non-negative")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    total_score: float
    acoustic_score: float = 0.0
    ext_lm_score: float = 0.0
    ilm_score: float = 0.0

    @property
    def breakdown(self) -> tuple[float, float, float]:
        return self.acoustic_score, self.ext_lm_score, self.ilm_score


def smooth(p: np.ndarray, temperature: float) -> np.ndarray:
    """``p ** (1/temperature)``, renormalized; identity at temperature 1."""
    if temperature == 1.0:
        return p
    with np.errstate(divide="ignore"):
        q = np.power(p, 1.0 / temperature)
    return q / q.sum()


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def smoothed_ilm_log(prior: np.ndarray, temperature: float) -> np.ndarray:
    q = np.asarray(prior, dtype=np.float64).copy()
    q[BLANK_ID] = 0.0
    q = smooth(q / q.sum(), temperature) if temperature != 1.0 else q
    return _log(q)


def fusion_score(frame_posterior: np.ndarray, candidate: int, ext_dist: np.ndarray | None,
                 ilm_dist: np.ndarray | None, config: DecoderConfig) -> float:
    """Score of expanding one frame with ``candidate`` (0 for blank).

    ``frame_posterior`` is a dense vector over blank plus labels;
    ``ext_dist`` is the external LM's next-token distribution for the
    hypothesis history and ``ilm_dist`` the internal-LM prior.
    """
    p = smooth(np.asarray(frame_posterior, dtype=np.float64), config.post_temperature)
    ac = float(_log(p[candidate]))
    if candidate == BLANK_ID:
        return ac
    score = ac
    if ext_dist is not None:
        score += config.ext_weight * math.log(ext_dist[candidate])
    if ilm_dist is not None:
        score -= config.ilm_weight * float(smoothed_ilm_log(ilm_dist, config.ilm_temperature)[candidate])
    return score


def _frame_logs(idx: np.ndarray, p: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    if temperature != 1.0:
        p = smooth(p, temperature)
    return idx, _log(p)


def _rank(items):
    # best first; ties resolved by token sequence
    return sorted(items, key=lambda h: (-h.total_score, h.tokens))


def decode(lattice: PosteriorLattice, config: DecoderConfig, ext_lm=None,
           ilm: np.ndarray | None = None) -> list[Hypothesis]:
    V = lattice.vocab_size
    if ext_lm is not None and ext_lm.vocab_size != V:
        raise DecoderConfigError(f"LM vocabulary {ext_lm.vocab_size} != lattice vocabulary {V}")
    use_ilm = ilm is not None or config.ilm_weight > 0
    log_ilm = smoothed_ilm_log(lattice.prior if ilm is None else ilm, config.ilm_temperature) if use_ilm else None
    if log_ilm is not None and len(log_ilm) != V:
        raise DecoderConfigError("internal LM vocabulary does not match the lattice")
    lam_e, lam_i = config.ext_weight, config.ilm_weight

    beam = [Hypothesis((), 0.0)]
    for idx, p in lattice.frames:
        idx, lp = _frame_logs(idx, p, config.post_temperature)
        is_blank = idx == BLANK_ID
        blank_lp = lp[is_blank][0] if is_blank.any() else -math.inf
        lab_idx, lab_lp = idx[~is_blank], lp[~is_blank]
        finite = np.isfinite(lab_lp)
        lab_idx, lab_lp = lab_idx[finite], lab_lp[finite]
        ilm_part = log_ilm[lab_idx] if log_ilm is not None else None

        merged: dict[tuple[int, ...], Hypothesis] = {}

        def offer(h: Hypothesis):
            cur = merged.get(h.tokens)
            if cur is None or h.total_score > cur.total_score:
                merged[h.tokens] = h

        for hyp in beam:
            if blank_lp > -math.inf:
                offer(Hypothesis(hyp.tokens, hyp.total_score + blank_lp, hyp.acoustic_score + blank_lp,
                                 hyp.ext_lm_score, hyp.ilm_score))
            if not len(lab_idx):
                continue
            step = lab_lp
            ext_part = None
            if ext_lm is not None:
                ext_part = _log(ext_lm.probs(hyp.tokens, lab_idx))
                step = step + lam_e * ext_part
            if ilm_part is not None:
                step = step - lam_i * ilm_part
            if len(step) > config.top_k:
                order = np.lexsort((lab_idx, -step))[: config.top_k]
            else:
                order = range(len(step))
            for j in order:
                tok = int(lab_idx[j])
                offer(Hypothesis(
                    hyp.tokens + (tok,),
                    hyp.total_score + float(step[j]),
                    hyp.acoustic_score + float(lab_lp[j]),
                    hyp.ext_lm_score + (float(ext_part[j]) if ext_part is not None else 0.0),
                    hyp.ilm_score + (float(ilm_part[j]) if ilm_part is not None else 0.0),
                ))
        beam = [h for h in _rank(merged.values()) if h.total_score > -math.inf][: config.beam_width]
        if not beam:
            return []

    if ext_lm is not None:
        final = []
        for h in beam:
            e = math.log(ext_lm.probs(h.tokens, [ext_lm.eos])[0])
            final.append(Hypothesis(h.tokens, h.total_score + lam_e * e, h.acoustic_score,
                                    h.ext_lm_score + e, h.ilm_score))
        beam = final
    return _rank(beam)


def posterior_beam_search(lattice: PosteriorLattice, beam_width: int, top_k: int) -> list[tuple[tuple[int, ...], float]]:
    """Plain beam search on frame posteriors, with no language models at all."""
    beam: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    for idx, p in lattice.frames:
        lp = _log(p)
        order = [j for j in np.lexsort((idx, -lp)) if lp[j] > -math.inf]
        blank = [j for j in order if idx[j] == BLANK_ID]
        labels = [j for j in order if idx[j] != BLANK_ID][:top_k]
        best: dict[tuple[int, ...], float] = {}
        for tokens, score in beam:
            for j in blank:
                best[tokens] = max(best.get(tokens, -math.inf), score + lp[j])
            for j in labels:
                key, s = tokens + (int(idx[j]),), score + lp[j]
                if s > best.get(key, -math.inf):
                    best[key] = s
        beam = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:beam_width]
    return [(tokens, float(s)) for tokens, s in beam]


# --- n-best output -----------------------------------------------------------------

NBEST_COLUMNS = ("utterance_id", "rank", "total_score", "acoustic", "ext", "ilm", "hypothesis")


def write_nbest(path, results: Mapping[str, Sequence[Hypothesis]], detokenize) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(NBEST_COLUMNS) + "\n")
        for uid in results:
            for rank, h in enumerate(results[uid], 1):
                fh.write(f"{uid}\t{rank}\t{h.total_score:.6f}\t{h.acoustic_score:.6f}\t"
                         f"{h.ext_lm_score:.6f}\t{h.ilm_score:.6f}\t{detokenize(h.tokens)}\n")


def read_nbest(path) -> dict[str, list[tuple[int, float, str]]]:
    out: dict[str, list[tuple[int, float, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh.read().splitlines()[1:]:
            uid, rank, total, _, _, _, text = line.split("\t")
            out.setdefault(uid, []).append((int(rank), float(total), text))
    return out


def best_tokens(hyps: Sequence[Hypothesis]) -> tuple[int, ...]:
    return hyps[0].tokens if hyps else ()


@dataclass
class SweepCell:
    lm_name: str
    config: DecoderConfig
    macro_wer: float | None
    error: str | None = None
    per_user: dict[str, float] = field(default_factory=dict)


def sweep(lattices: Mapping[str, Sequence[tuple[str, PosteriorLattice, Sequence[str]]]],
          configs: Sequence[DecoderConfig], lm_registry: Mapping[str, object], detokenize) -> list[SweepCell]:
    """Decode every (LM, config) cell and report per-cell macro WER.

    ``lattices`` maps user id to ``(utterance_id, lattice, reference words)``.
    ``lm_registry`` values are either one LM shared by all users or a
    mapping from user id to that user's LM.  Decode failures are recorded
    in the cell instead of aborting the sweep.
    """
    from .metrics import UserReport, wer, macro_average

    if not configs:
        raise DecoderConfigError("empty configuration grid")
    cells = []
    for name in sorted(lm_registry):
        lms = lm_registry[name]
        for cfg in configs:
            try:
                reports = []
                for uid in sorted(lattices):
                    lm = lms.get(uid) if isinstance(lms, Mapping) else lms
                    per_utt = []
                    for _, lat, ref in lattices[uid]:
                        hyp = detokenize(best_tokens(decode(lat, cfg, lm))).split()
                        per_utt.append(wer(ref, hyp))
                    reports.append(UserReport(uid, per_utt))
                macro, _ = macro_average(reports, resamples=0)
                cells.append(SweepCell(name, cfg, macro, None, {r.user_id: r.wer for r in reports}))
            except Exception as err:  # recorded per cell
                cells.append(SweepCell(name, cfg, None, f"{type(err).__name__}: {err}"))
    return cells
