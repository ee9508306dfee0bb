"""End-to-end experiment pipeline: tokenizer, LMs, simulated lattices, decoding, reports.

An :class:`Experiment` wraps one forged dataset plus a general LM text
file.  Stages are built lazily and cached, so a preset only pays for what
it uses.  Personalization text is read through :meth:`Experiment.user_text`,
which logs every file touched; baselines that must not see user text can
be audited through that log.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import acoustic, lm as lmlib, metrics, wordpiece
from .corpus import DatasetUser, load_dataset
from .decoder import DecoderConfig, decode, sweep as sweep_grid

PRESETS = ("BL1", "BL2", "BL3", "P13N", "LIMITED", "ADAPT")
WORKERS_ENV = "USERLIBRI_WORKERS"
GENERAL_TEXT = "general_lm.txt"
PAPER_WEIGHTS = (0.15, 0.22, 0.36, 0.45, 0.55)


class PipelineError(RuntimeError):
    """A prerequisite artifact or stage input is missing."""


@dataclass(frozen=True)
class PipelineConfig:
    vocab_size: int = 1024
    capacity: str = "M"
    capacities: tuple[str, ...] = ("S", "M", "L")
    discount: float = 0.75
    mix_weight: float = 0.5
    # acoustic simulator
    prior_exponent: float = 0.5
    blank_rate: float = 0.2
    concentration: float = 8.0
    deletion_mass: float = 0.12
    max_neighbors: int = 3
    bias_fraction: float = 0.5
    bias_strength: float = 0.6
    # speech personalization analog
    adapt_weight: float = 1.0
    adapt_shrinkage: float = 2.0
    folds: int = 5
    min_adapt_utterances: int = 10
    # limited data and sweeps
    limited_sizes: tuple[int, ...] = lmlib.NESTED_SIZES
    sweep_weights: tuple[float, ...] = (0.0,) + PAPER_WEIGHTS
    # evaluation
    resamples: int = 10_000
    hist_bin_width: float = 0.02

    def __post_init__(self):
        for cap in (self.capacity, *self.capacities):
            if cap not in lmlib.CAPACITY_ORDERS:
                raise ValueError(f"unknown capacity class {cap!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    pipeline: PipelineConfig = PipelineConfig()
    decoder: DecoderConfig = DecoderConfig()


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    capacity: str
    decoder: DecoderConfig
    seed: int

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ValueError(f"unknown preset {self.name!r}; choose from {', '.join(PRESETS)}")


# --- INI config -----------------------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(t) for t in items)
    if isinstance(default, float) or default is None:
        return float(text)
    return type(default)(text)


def config_to_ini(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(config.seed)}
    parser["pipeline"] = {f.name: _format_value(getattr(config.pipeline, f.name)) for f in fields(PipelineConfig)}
    parser["decoder"] = {f.name: _format_value(getattr(config.decoder, f.name)) for f in fields(DecoderConfig)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _section(parser, name, cls, default):
    if not parser.has_section(name):
        return default
    known = {f.name for f in fields(cls)}
    unknown = set(parser[name]) - known
    if unknown:
        raise ValueError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    values = {key: _parse_value(parser[name][key], getattr(default, key)) for key in parser[name]}
    return replace(default, **values)


def load_config(path: str | Path | None = None, seed: int | None = None) -> ExperimentConfig:
    config = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(f"config file {path} not found")
        run_seed = parser.getint("run", "seed", fallback=config.seed)
        config = ExperimentConfig(
            run_seed,
            _section(parser, "pipeline", PipelineConfig, config.pipeline),
            _section(parser, "decoder", DecoderConfig, config.decoder),
        )
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels (independent of hash randomization)."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


def workers_from_env() -> int:
    value = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {value!r}") from None
    return max(1, n)


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --- results -----------------------------------------------------------------------------

@dataclass
class ConditionResult:
    name: str
    user_wer: dict[str, float]
    reports: dict[str, metrics.UserReport]
    hyps: dict[str, list[str]] = field(default_factory=dict)

    def subset(self, uids: Sequence[str]) -> "ConditionResult":
        keep = set(uids)
        return ConditionResult(
            self.name,
            {u: w for u, w in self.user_wer.items() if u in keep},
            {u: r for u, r in self.reports.items() if u in keep},
            {k: v for k, v in self.hyps.items() if k.split("/", 1)[0] in keep},
        )


@dataclass(frozen=True)
class SummaryRow:
    condition: str
    split: str
    users: int
    macro_wer: float
    ci: metrics.ConfidenceInterval | None
    pooled_wer: float


Lattice = tuple[str, acoustic.PosteriorLattice, list[str]]


class Experiment:
    def __init__(self, dataset_root: str | Path, config: ExperimentConfig = ExperimentConfig(),
                 general_text: str | Path | None = None, workers: int | None = None):
        self.root = Path(dataset_root)
        self.config = config
        self.pipe = config.pipeline
        self.general_text = Path(general_text) if general_text else self.root / GENERAL_TEXT
        if not self.general_text.exists():
            raise PipelineError(
                f"general LM text {self.general_text} is missing; pass --general-text or create the dataset with `synth`"
            )
        self.users: list[DatasetUser] = load_dataset(self.root)
        if not self.users:
            raise PipelineError(f"dataset {self.root} has no users")
        self.workers = workers or workers_from_env()
        self.lm_reads: list[str] = []
        self.timings: dict[str, float] = {}
        self._cache: dict = {}

    # -- helpers --

    def _stage(self, key, build: Callable):
        if key not in self._cache:
            # per-user stages are summed under one label
            label = key if isinstance(key, str) else ":".join(str(k) for k in key[:2] if not isinstance(k, tuple))
            if isinstance(key, tuple) and key[0] in ("user_channel", "lattices", "user_text"):
                label = key[0]
            start = time.perf_counter()
            self._cache[key] = build()
            self.timings[label] = self.timings.get(label, 0.0) + time.perf_counter() - start
        return self._cache[key]

    def _fan_out(self, fn: Callable, items: Sequence) -> list:
        """``[fn(x) for x in items]``, spread over forked workers when more than one is configured.

        Results come back in input order.  Personalization-text reads made
        inside workers are merged back into :attr:`lm_reads`.
        """
        if self.workers <= 1 or len(items) < 2 or "fork" not in mp.get_all_start_methods():
            return [fn(x) for x in items]
        global _TASK
        _TASK = (self, fn, list(items))
        try:
            with mp.get_context("fork").Pool(min(self.workers, len(items))) as pool:
                out = pool.map(_run_task, range(len(items)))
        finally:
            _TASK = None
        results = []
        for value, reads in out:
            for path in reads:
                if path not in self.lm_reads:
                    self.lm_reads.append(path)
            results.append(value)
        return results

    @property
    def splits(self) -> list[str]:
        return sorted({u.split for u in self.users})

    def user(self, uid: str) -> DatasetUser:
        return next(u for u in self.users if u.user_id == uid)

    # -- text side --

    def general_sentences(self) -> list[str]:
        def build():
            with open(self.general_text, encoding="utf-8") as fh:
                lines = [line for line in fh.read().splitlines() if line]
            if not lines:
                raise PipelineError(f"{self.general_text} is empty")
            return lines
        return self._stage("general_text", build)

    def wpm(self) -> wordpiece.WordPieceModel:
        return self._stage("wpm", lambda: wordpiece.train_wpm(self.general_sentences(), self.pipe.vocab_size))

    def encode(self, text: str) -> list[int]:
        return wordpiece.encode(text, self.wpm())

    def detokenize(self, tokens: Sequence[int]) -> str:
        return wordpiece.decode(tokens, self.wpm())

    def general_tokens(self) -> list[list[int]]:
        return self._stage("general_tokens", lambda: [self.encode(s) for s in self.general_sentences()])

    @property
    def vocab(self) -> int:
        return len(self.wpm())

    def general_lm(self, capacity: str | None = None) -> lmlib.BackoffLanguageModel:
        order = lmlib.CAPACITY_ORDERS[capacity or self.pipe.capacity]
        return self._stage(("general_lm", order), lambda: lmlib.train_general(
            self.general_tokens(), self.vocab, order, self.pipe.discount))

    def user_text(self, uid: str) -> list[list[int]]:
        """Tokenized personalization sentences of one user (logged for the isolation audit)."""
        def build():
            path = self.user(uid).lm_path
            if not path.exists():
                raise PipelineError(f"personalization text {path} is missing; re-run `forge`")
            if str(path) not in self.lm_reads:
                self.lm_reads.append(str(path))
            with open(path, encoding="utf-8") as fh:
                return [self.encode(line) for line in fh.read().splitlines() if line]
        return self._stage(("user_text", uid), build)

    def p13n_lm(self, uid: str, capacity: str | None = None, sentences=None) -> lmlib.PersonalizedLM:
        text = self.user_text(uid) if sentences is None else sentences
        cfg = lmlib.PersonalizationConfig(mix_weight=self.pipe.mix_weight)
        return lmlib.personalize(self.general_lm(capacity), text, cfg)

    def union_lm(self, capacity: str | None = None) -> lmlib.BackoffLanguageModel:
        """General LM trained only on the union of user text, each book once."""
        def build():
            seen, text = set(), []
            for u in self.users:
                if u.book_id not in seen:
                    seen.add(u.book_id)
                    text.extend(self.user_text(u.user_id))
            return lmlib.train_general(text, self.vocab, lmlib.CAPACITY_ORDERS[capacity or self.pipe.capacity],
                                       self.pipe.discount)
        return self._stage(("union_lm", capacity or self.pipe.capacity), build)

    # -- acoustic side --

    def prior(self) -> np.ndarray:
        return self._stage("prior", lambda: acoustic.unigram_prior(
            self.general_tokens(), self.vocab, self.pipe.prior_exponent))

    def base_channel(self, split: str) -> acoustic.ConfusionChannel:
        profile = "other" if "other" in split else "clean"
        p = self.pipe
        return self._stage(("channel", profile), lambda: acoustic.build_channel(
            self.wpm().pieces, profile, blank_rate=p.blank_rate, concentration=p.concentration,
            deletion_mass=p.deletion_mass, max_neighbors=p.max_neighbors))

    def user_channel(self, user: DatasetUser) -> acoustic.ConfusionChannel:
        """The base channel with this speaker's systematic confusions on the pieces they use."""
        def build():
            used = sorted({t for utt in user.utterances for t in self.encode(utt.text)} - {wordpiece.UNK_ID})
            return acoustic.bias_channel(self.base_channel(user.split), derive_seed(self.config.seed, "bias", user.user_id),
                                         self.pipe.bias_fraction, self.pipe.bias_strength, candidates=used)
        return self._stage(("user_channel", user.user_id), build)

    def lattices(self, uid: str) -> list[Lattice]:
        def build():
            user = self.user(uid)
            ch = self.user_channel(user)
            out = []
            for utt in user.utterances:
                seed = derive_seed(self.config.seed, "emit", utt.utterance_id)
                out.append((utt.utterance_id, acoustic.emit(self.encode(utt.text), ch, self.prior(), seed),
                            list(utt.transcript)))
            return out
        return self._stage(("lattices", uid), build)

    # -- decoding --

    def _decode_user(self, uid, lm, config: DecoderConfig, items: Sequence[Lattice], transform=None):
        per_utt, hyps = [], {}
        for utt_id, lat, ref in items:
            if transform is not None:
                lat = transform(lat)
            best = decode(lat, config, lm)
            words = self.detokenize(best[0].tokens).split() if best else []
            per_utt.append(metrics.wer(ref, words))
            hyps[f"{uid}/{utt_id}"] = words
        return per_utt, hyps

    def condition(self, name: str, lm_for: Callable[[str], object] | None, config: DecoderConfig | None = None,
                  uids: Sequence[str] | None = None) -> ConditionResult:
        """Decode every user's lattices with ``lm_for(uid)`` fused (or no LM)."""
        config = config or self.config.decoder
        if lm_for is None:
            config = replace(config, ext_weight=0.0, ilm_weight=0.0)
        uids = list(uids) if uids is not None else [u.user_id for u in self.users]

        def one(uid):
            lm = lm_for(uid) if lm_for is not None else None
            per_utt, h = self._decode_user(uid, lm, config, self.lattices(uid))
            report = metrics.UserReport(uid, per_utt)
            return report.wer, report, h

        def build():
            return _collect(name, uids, self._fan_out(one, uids))
        return self._stage(("condition", name, tuple(uids)), build)

    # named conditions

    def bl1(self, uids=None) -> ConditionResult:
        return self.condition("BL1", None, uids=uids)

    def bl2(self, capacity=None, uids=None) -> ConditionResult:
        cap = capacity or self.pipe.capacity
        return self.condition(f"GEN-{cap}", lambda uid: self.general_lm(cap), uids=uids)

    def bl3(self, uids=None) -> ConditionResult:
        return self.condition("BL3", lambda uid: self.union_lm(), uids=uids)

    def p13n(self, capacity=None, uids=None) -> ConditionResult:
        cap = capacity or self.pipe.capacity
        return self.condition(f"P13N-{cap}", lambda uid: self.p13n_lm(uid, cap), uids=uids)

    # -- limited data --

    def limited_users(self) -> list[str]:
        need = max(self.pipe.limited_sizes)
        return [u.user_id for u in self.users if len(self.user_text(u.user_id)) >= need]

    def limited(self) -> dict[str, ConditionResult]:
        uids = self.limited_users()
        if not uids:
            raise PipelineError(f"no user has at least {max(self.pipe.limited_sizes)} personalization sentences")
        sizes = list(self.pipe.limited_sizes)
        subsets = {uid: lmlib.subset_nested(self.user_text(uid), sizes, derive_seed(self.config.seed, "nested", uid))
                   for uid in uids}
        out = {}
        for n in sizes:
            out[str(n)] = self.condition(f"P13N-{n}", lambda uid, n=n: self.p13n_lm(uid, sentences=subsets[uid][n]),
                                         uids=uids)
        out["all"] = self.p13n(uids=uids)
        return out

    # -- speech personalization analog --

    def adapt_users(self) -> list[str]:
        return [u.user_id for u in self.users if len(u.utterances) >= self.pipe.min_adapt_utterances]

    def adapted(self, with_lm: bool) -> ConditionResult:
        """k-fold channel adaptation per user; user WER is the mean of per-fold WERs."""
        name = "ADAPT+P13N" if with_lm else "ADAPT"
        return self._folds(name, adapt=True, lm_for=(lambda uid: self.p13n_lm(uid)) if with_lm else None)

    def folded(self, name: str, lm_for) -> ConditionResult:
        """The same folds without adaptation, for like-for-like comparison."""
        return self._folds(name, adapt=False, lm_for=lm_for)

    def _folds(self, name: str, adapt: bool, lm_for) -> ConditionResult:
        uids = self.adapt_users()
        config = self.config.decoder if lm_for is not None else replace(self.config.decoder, ext_weight=0.0, ilm_weight=0.0)
        p = self.pipe

        def one(uid):
            user = self.user(uid)
            items = self.lattices(uid)
            lm = lm_for(uid) if lm_for is not None else None
            folds = acoustic.kfold_split(items, p.folds, derive_seed(self.config.seed, "folds", uid))
            fold_wers, all_utts, hyps = [], [], {}
            for train, test in folds:
                transform = None
                if adapt:
                    ch = acoustic.adapt_channel(self.base_channel(user.split), [(lat, lat.truth) for _, lat, _ in train],
                                                p.adapt_weight, p.adapt_shrinkage)
                    transform = lambda lat, ch=ch: acoustic.recalibrate(lat, ch)  # noqa: E731
                per_utt, h = self._decode_user(uid, lm, config, test, transform)
                fold_wers.append(metrics.UserReport(uid, per_utt).wer)
                all_utts.extend(per_utt)
                hyps.update(h)
            return float(np.mean(fold_wers)), metrics.UserReport(uid, all_utts), hyps

        def build():
            return _collect(name, uids, self._fan_out(one, uids))
        return self._stage(("folds", name), build)

    # -- sweeps --

    def sweep(self, weights: Sequence[float] | None = None) -> list:
        weights = list(self.pipe.sweep_weights if weights is None else weights)
        if not weights:
            raise PipelineError("empty weight list")
        base = self.config.decoder
        # the ILM correction only applies alongside an external LM
        configs = [replace(base, ext_weight=w, ilm_weight=base.ilm_weight if w > 0 else 0.0) for w in weights]
        uids = [u.user_id for u in self.users]
        lattice_sets = {uid: self.lattices(uid) for uid in uids}
        cap = self.pipe.capacity
        registry = {
            f"GEN-{cap}": self.general_lm(cap),
            f"P13N-{cap}": _LazyUserLMs(self, uids, cap),
        }
        start = time.perf_counter()
        cells = sweep_grid(lattice_sets, configs, registry, self.detokenize)
        self.timings["sweep"] = time.perf_counter() - start
        return cells

    # -- summaries --

    def summarize(self, result: ConditionResult, split: str | None = None) -> SummaryRow:
        uids = [u.user_id for u in self.users if (split is None or u.split == split) and u.user_id in result.user_wer]
        if not uids:
            raise PipelineError(f"condition {result.name} has no users in split {split}")
        vals = [result.user_wer[u] for u in uids]
        seed = derive_seed(self.config.seed, "bootstrap", result.name, split)
        mean, ci = metrics.macro_average(vals, self.pipe.resamples, seed=seed)
        pooled = metrics.pooled_wer([result.reports[u] for u in uids])
        return SummaryRow(result.name, split or "all", len(uids), mean, ci, pooled)


_TASK = None


def _run_task(i: int):
    exp, fn, items = _TASK
    before = len(exp.lm_reads)
    value = fn(items[i])
    return value, exp.lm_reads[before:]


def _collect(name: str, uids: Sequence[str], rows: Sequence) -> ConditionResult:
    user_wer, reports, hyps = {}, {}, {}
    for uid, (value, report, h) in zip(uids, rows):
        user_wer[uid] = value
        reports[uid] = report
        hyps.update(h)
    return ConditionResult(name, user_wer, reports, hyps)


class _LazyUserLMs(Mapping):
    """uid -> personalized LM, built on access and not retained."""

    def __init__(self, exp: Experiment, uids, capacity):
        self.exp, self.uids, self.capacity = exp, list(uids), capacity

    def __getitem__(self, uid):
        return self.exp.p13n_lm(uid, self.capacity)

    def __iter__(self):
        return iter(self.uids)

    def __len__(self):
        return len(self.uids)


# --- report writing ---------------------------------------------------------------------

REPORT_COLUMNS = ("preset", "condition", "split", "users", "macro_wer", "ci_lower", "ci_upper", "pooled_wer")


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def write_report(path: Path, preset: str, rows: Sequence[SummaryRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join([preset, r.condition, r.split, str(r.users), _fmt(r.macro_wer),
                                _fmt(r.ci.lower if r.ci else None), _fmt(r.ci.upper if r.ci else None),
                                _fmt(r.pooled_wer)]) + "\n")


def read_report(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def render_table(rows: Sequence[SummaryRow]) -> str:
    """Conditions down, splits across: ``full-set WER | per-user WER [95% CI]`` with one decimal."""
    splits = sorted({r.split for r in rows})
    conds = list(dict.fromkeys(r.condition for r in rows))
    cell = {(r.condition, r.split): r for r in rows}
    head = ["condition"] + [f"{s} full | per-user [CI]" for s in splits]
    body = []
    for c in conds:
        line = [c]
        for s in splits:
            r = cell.get((c, s))
            line.append("" if r is None else f"{100 * r.pooled_wer:.1f} | {metrics.format_wer(r.macro_wer, r.ci)}")
        body.append(line)
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]) + "\n"


def write_hyps(path: Path, exp: Experiment, result: ConditionResult) -> None:
    refs = {f"{u.user_id}/{utt.utterance_id}": utt.text for u in exp.users for utt in u.utterances}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id\tutterance_id\treference\thypothesis\n")
        for key in sorted(result.hyps):
            uid, utt = key.split("/", 1)
            fh.write(f"{uid}\t{utt}\t{refs[key]}\t{' '.join(result.hyps[key])}\n")


def write_histograms(out: Path, exp: Experiment, results: Sequence[ConditionResult]) -> list[Path]:
    paths = []
    for split in exp.splits:
        markers = []
        for res in results:
            vals = [res.user_wer[u.user_id] for u in exp.users if u.split == split and u.user_id in res.user_wer]
            if not vals:
                continue
            path = out / f"hist_{split}_{res.name}.csv"
            metrics.write_histogram(path, metrics.histogram(vals, exp.pipe.hist_bin_width))
            paths.append(path)
            markers.append((res.name, exp.summarize(res, split).pooled_wer))
        mpath = out / f"hist_{split}_markers.csv"
        with open(mpath, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("condition,pooled_wer\n")
            for name, value in markers:
                fh.write(f"{name},{value:.6f}\n")
        paths.append(mpath)
    return paths


def write_winloss(path: Path, exp: Experiment, a: ConditionResult, b: ConditionResult) -> None:
    records = []
    for u in exp.users:
        if u.user_id not in a.user_wer or u.user_id not in b.user_wer:
            continue
        keys = [f"{u.user_id}/{utt.utterance_id}" for utt in u.utterances]
        refs = {k: list(utt.transcript) for k, utt in zip(keys, u.utterances)}
        with open(u.lm_path, encoding="utf-8") as fh:
            user_lines = fh.read().splitlines()
        if str(u.lm_path) not in exp.lm_reads:
            exp.lm_reads.append(str(u.lm_path))
        records.extend(metrics.win_loss_diff(refs, {k: a.hyps[k] for k in keys}, {k: b.hyps[k] for k in keys}, user_lines))
    metrics.write_diffs(path, records)


@dataclass
class RunManifest:
    preset: str
    config_hash: str
    seed: int
    inputs: dict[str, str]
    timings: dict[str, float]
    outputs: dict[str, str]
    lm_files_read: list[str]

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _input_hashes(exp: Experiment) -> dict[str, str]:
    files = [exp.root / "metadata.tsv", exp.general_text] + sorted({Path(p) for p in exp.lm_reads})
    return {str(p): file_hash(p) for p in files}


def finish_run(out: Path, exp: Experiment, preset: str, outputs: Sequence[Path]) -> RunManifest:
    ini = out / "config.ini"
    ini.write_text(config_to_ini(exp.config), encoding="utf-8")
    manifest = RunManifest(
        preset=preset,
        config_hash=file_hash(ini),
        seed=exp.config.seed,
        inputs=_input_hashes(exp),
        timings={k: round(v, 3) for k, v in sorted(exp.timings.items())},
        outputs={p.name: file_hash(p) for p in sorted([*outputs, ini])},
        lm_files_read=sorted(set(exp.lm_reads)),
    )
    manifest.write(out / "manifest.json")
    return manifest


def run_preset(preset: str, exp: Experiment, out_dir: str | Path) -> RunManifest:
    """Run one preset and write its reports; returns the manifest."""
    ExperimentPreset(preset, exp.pipe.capacity, exp.config.decoder, exp.config.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: list[ConditionResult] = []
    winloss = None
    if preset == "BL1":
        results = [exp.bl1()]
    elif preset == "BL2":
        results = [exp.bl1(), exp.bl2()]
    elif preset == "BL3":
        results = [exp.bl1(), exp.bl2(), exp.bl3()]
    elif preset == "P13N":
        results = [exp.bl1()]
        for cap in exp.pipe.capacities:
            results += [exp.bl2(cap), exp.p13n(cap)]
        winloss = (exp.bl2(), exp.p13n())
    elif preset == "LIMITED":
        uids = exp.limited_users()
        results = [exp.bl1(uids=uids), exp.bl2(uids=uids)] + list(exp.limited().values())
    elif preset == "ADAPT":
        results = [
            exp.folded("BL1-CV", None),
            exp.folded("P13N-CV", lambda uid: exp.p13n_lm(uid)),
            exp.adapted(with_lm=False),
            exp.adapted(with_lm=True),
        ]
    rows = [exp.summarize(r, s) for r in results for s in exp.splits if any(
        u.split == s and u.user_id in r.user_wer for u in exp.users)]
    outputs = []
    path = out / "report.tsv"
    write_report(path, preset, rows)
    outputs.append(path)
    path = out / "report.txt"
    path.write_text(render_table(rows), encoding="utf-8")
    outputs.append(path)
    outputs += write_histograms(out, exp, results)
    for res in results:
        path = out / f"hyps_{res.name}.tsv"
        write_hyps(path, exp, res)
        outputs.append(path)
    if winloss is not None:
        path = out / "winloss.tsv"
        write_winloss(path, exp, *winloss)
        outputs.append(path)
    return finish_run(out, exp, preset, outputs)


def run_limited(exp: Experiment, out_dir: str | Path) -> RunManifest:
    """Trend table over nested personalization sizes with baseline reference rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    uids = exp.limited_users()
    trend = exp.limited()
    base = {"BL1": exp.bl1(uids=uids), "BL2": exp.bl2(uids=uids)}
    path = out / "limited.tsv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("split\tsize\tusers\tmacro_wer\tci_lower\tci_upper\tbaseline_bl1\tbaseline_bl2\n")
        for split in exp.splits:
            b1 = exp.summarize(base["BL1"], split).macro_wer
            b2 = exp.summarize(base["BL2"], split).macro_wer
            for size, res in trend.items():
                r = exp.summarize(res, split)
                fh.write(f"{split}\t{size}\t{r.users}\t{_fmt(r.macro_wer)}\t{_fmt(r.ci.lower)}\t{_fmt(r.ci.upper)}\t"
                         f"{_fmt(b1)}\t{_fmt(b2)}\n")
    return finish_run(out, exp, "LIMITED", [path])


def run_sweep(exp: Experiment, out_dir: str | Path, weights: Sequence[float] | None = None) -> RunManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = list(exp.pipe.sweep_weights if weights is None else weights)
    cells = exp.sweep(weights)
    path = out / "sweep.tsv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("lm\t" + "\t".join(f"w={w:g}" for w in weights) + "\tbest_weight\n")
        for name in sorted({c.lm_name for c in cells}):
            row = [c for c in cells if c.lm_name == name]
            vals = [c.macro_wer for c in row]
            ok = [(v, c.config.ext_weight) for v, c in zip(vals, row) if v is not None]
            best = min(ok)[1] if ok else None
            fh.write(name + "\t" + "\t".join("error" if v is None else f"{v:.6f}" for v in vals)
                     + f"\t{'' if best is None else f'{best:g}'}\n")
    return finish_run(out, exp, "SWEEP", [path])


def read_sweep(path: str | Path) -> dict[str, dict[float, float]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    weights = [float(h[2:]) for h in lines[0].split("\t")[1:-1]]
    out = {}
    for line in lines[1:]:
        cols = line.split("\t")
        out[cols[0]] = {w: float(v) for w, v in zip(weights, cols[1:-1]) if v != "error"}
    return out
