"""Command-line entry point: ``userlibri <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
The worker count for user-level fan-out comes from ``USERLIBRI_WORKERS``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import acoustic, corpus, experiment as xp, lm as lmlib, metrics, wordpiece
from .decoder import DecoderConfig, DecoderConfigError, decode, read_nbest, write_nbest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (
    OSError, corpus.CorpusError, wordpiece.WordPieceError, lmlib.LMError, acoustic.ChannelError,
    metrics.MetricsError, xp.PipelineError, DecoderConfigError, ValueError,
)

log = logging.getLogger("userlibri")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- subcommands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthetic import SyntheticConfig, generate

    cfg = SyntheticConfig(seed=args.seed, users_per_split=args.users_per_split,
                          utterances_per_user=args.utterances_per_user,
                          lm_sentences_per_user=args.lm_sentences_per_user,
                          general_sentences=args.general_sentences)
    ds = generate(args.out, cfg)
    if ds.forge_result.errors:
        for err in ds.forge_result.errors:
            log.error(err)
        return EXIT_DATA
    print(f"wrote {len(ds.forge_result.users)} users to {ds.root}")
    return EXIT_OK


def cmd_forge(args) -> int:
    result = corpus.forge(args.books, args.metadata, args.out)
    if result.errors:
        for err in result.errors:
            log.error(err)
        return EXIT_DATA
    _print_stats(result.stats)
    return EXIT_OK


def _print_stats(stats) -> None:
    splits = sorted(stats)
    cols = [dict(stats[s].rows()) for s in splits]
    keys = [k for k, _ in stats[splits[0]].rows()]
    width = max(len(k) for k in keys)
    print(" " * width + "  " + "  ".join(f"{s:>12}" for s in splits))
    for k in keys:
        print(k.ljust(width) + "  " + "  ".join(f"{c[k]:>12}" for c in cols))


def cmd_stats(args) -> int:
    users = []
    for u in corpus.load_dataset(args.dataset):
        with open(u.lm_path, encoding="utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line]
        users.append(corpus.UserDataset(u.user_id, u.utterances, lines))
    stats = corpus.stats_by_split(users)
    if args.out:
        corpus.write_stats(Path(args.out), stats)
    _print_stats(stats)
    return EXIT_OK


def _read_text(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line]
    if not lines:
        raise ValueError(f"{path} has no sentences")
    return lines


def _order(args) -> int:
    return args.order if args.order else lmlib.CAPACITY_ORDERS[args.capacity]


def cmd_train_lm(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = _read_text(args.text)
    if args.wpm:
        wpm = wordpiece.WordPieceModel.load(args.wpm)
    else:
        wpm = wordpiece.train_wpm(text, args.vocab_size)
        wpm.save(out / "wpm.tsv")
    model = lmlib.train_general([wordpiece.encode(s, wpm) for s in text], len(wpm), _order(args), args.discount)
    lmlib.save_lm(model, out / "general_lm.txt", wpm.pieces)
    print(f"order-{model.order} LM over {len(wpm)} pieces from {len(text)} sentences -> {out}")
    return EXIT_OK


def cmd_personalize(args) -> int:
    wpm = wordpiece.WordPieceModel.load(args.wpm)
    general = lmlib.load_lm(args.general_lm, wpm.pieces)
    text = _read_text(args.user_text)
    sents = [wordpiece.encode(s, wpm) for s in text]
    if args.size:
        sents = lmlib.subset_nested(sents, [args.size], args.seed)[args.size]
    p = lmlib.personalize(general, sents, lmlib.PersonalizationConfig(mix_weight=args.mix_weight))
    lmlib.save_lm(p.user, args.out, wpm.pieces, mix_weight=p.mix_weight, parent=general.fingerprint())
    print(f"user LM from {len(sents)} sentences (alpha={p.mix_weight}) -> {args.out}")
    return EXIT_OK


def _load_fusion_lm(args, wpm):
    if not args.lm:
        if args.user_lm:
            raise UsageError("--user-lm needs --lm (the general model it was mixed with)")
        return None
    general = lmlib.load_lm(args.lm, wpm.pieces)
    if not args.user_lm:
        return general
    header = lmlib.read_lm_header(args.user_lm)
    if header.get("parent_hash") not in (None, general.fingerprint()):
        raise ValueError(f"{args.user_lm} was personalized from a different general LM")
    alpha = float(header.get("alpha", 0.5))
    return lmlib.PersonalizedLM(general, lmlib.load_lm(args.user_lm, wpm.pieces), alpha)


def cmd_simulate(args) -> int:
    config = xp.load_config(args.config, args.seed)
    exp = xp.Experiment(args.dataset, config, args.general_text)
    out = Path(args.out)
    (out / "lattices").mkdir(parents=True, exist_ok=True)
    exp.wpm().save(out / "wpm.tsv")
    acoustic.write_prior(exp.prior(), out / "prior.tsv")
    n = 0
    for u in exp.users:
        udir = out / "lattices" / u.user_id
        udir.mkdir(exist_ok=True)
        for utt_id, lat, _ in exp.lattices(u.user_id):
            acoustic.write_lattice(lat, udir / f"{utt_id}.lat")
            n += 1
    (out / "config.ini").write_text(xp.config_to_ini(config), encoding="utf-8")
    print(f"wrote {n} lattices for {len(exp.users)} users -> {out}")
    return EXIT_OK


def _decoder_config(args) -> DecoderConfig:
    base = xp.load_config(args.config).decoder if getattr(args, "config", None) else DecoderConfig()
    overrides = {k: getattr(args, k) for k in ("beam_width", "top_k", "post_temperature", "ext_weight",
                                              "ilm_weight", "ilm_temperature") if getattr(args, k) is not None}
    return replace(base, **overrides)


def cmd_decode(args) -> int:
    wpm = wordpiece.WordPieceModel.load(args.wpm)
    prior = acoustic.read_prior(args.prior)
    lm = _load_fusion_lm(args, wpm)
    config = _decoder_config(args)
    if lm is None:
        config = replace(config, ext_weight=0.0)
    paths = sorted(Path(args.lattices).rglob("*.lat"))
    if not paths:
        raise ValueError(f"no .lat files under {args.lattices}")
    results = {}
    for path in paths:
        hyps = decode(acoustic.read_lattice(path, prior), config, lm)
        results[path.stem] = hyps[: args.nbest]
    write_nbest(args.out, results, lambda toks: wordpiece.decode(toks, wpm))
    print(f"decoded {len(results)} lattices -> {args.out}")
    return EXIT_OK


def _read_hyps(path) -> dict[str, list[str]]:
    """Top hypothesis per utterance from an n-best TSV or a run's hyps TSV."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
    if header[0] == "utterance_id" and "rank" in header:
        return {utt: next(t for r, _, t in rows if r == 1).split() for utt, rows in read_nbest(path).items()}
    if header[:2] == ["user_id", "utterance_id"]:
        with open(path, encoding="utf-8") as fh:
            rows = [line.split("\t") for line in fh.read().splitlines()[1:]]
        return {r[1]: r[3].split() for r in rows}
    raise ValueError(f"{path}: unrecognized hypothesis file header")


def cmd_eval(args) -> int:
    users = corpus.load_dataset(args.dataset)
    hyps = _read_hyps(args.hyps)
    reports: dict[str, list[metrics.UserReport]] = {}
    missing = 0
    for u in users:
        per_utt = []
        for utt in u.utterances:
            if utt.utterance_id not in hyps:
                missing += 1
                continue
            per_utt.append(metrics.wer(list(utt.transcript), hyps[utt.utterance_id]))
        if per_utt:
            reports.setdefault(u.split, []).append(metrics.UserReport(u.user_id, per_utt))
    if not reports:
        raise ValueError("no hypothesis matches any dataset utterance")
    if missing:
        log.warning("%d utterances have no hypothesis and were skipped", missing)
    rows = []
    for split in sorted(reports):
        seed = xp.derive_seed(args.seed, "bootstrap", args.name, split)
        mean, ci = metrics.macro_average(reports[split], args.resamples, seed=seed)
        rows.append(xp.SummaryRow(args.name, split, len(reports[split]), mean, ci, metrics.pooled_wer(reports[split])))
    if args.out:
        xp.write_report(Path(args.out), "EVAL", rows)
    print(xp.render_table(rows), end="")
    return EXIT_OK


def _experiment(args, **pipeline) -> xp.Experiment:
    config = xp.load_config(args.config, args.seed)
    if pipeline:
        config = replace(config, pipeline=replace(config.pipeline, **pipeline))
    return xp.Experiment(args.dataset, config, args.general_text)


def cmd_run(args) -> int:
    exp = _experiment(args)
    xp.run_preset(args.preset, exp, args.out)
    print((Path(args.out) / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_limited(args) -> int:
    exp = _experiment(args, **({"limited_sizes": tuple(args.sizes)} if args.sizes else {}))
    xp.run_limited(exp, args.out)
    print((Path(args.out) / "limited.tsv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = _experiment(args)
    if args.weights is not None and not args.weights:
        raise UsageError("empty weight list")
    xp.run_sweep(exp, args.out, args.weights)
    print((Path(args.out) / "sweep.tsv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------

def _add_decoder_flags(p) -> None:
    g = p.add_argument_group("decoder")
    g.add_argument("--beam-width", type=int)
    g.add_argument("--top-k", type=int)
    g.add_argument("--post-temperature", type=float)
    g.add_argument("--ext-weight", type=float)
    g.add_argument("--ilm-weight", type=float)
    g.add_argument("--ilm-temperature", type=float)


def _add_experiment_flags(p, seed=True) -> None:
    p.add_argument("--dataset", required=True, help="forged dataset root")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="INI config with [run], [pipeline] and [decoder] sections")
    p.add_argument("--general-text", help="general LM text (default: <dataset>/general_lm.txt)")
    if seed:
        p.add_argument("--seed", type=int, help="overrides [run] seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="userlibri", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate and forge the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users-per-split", type=int, default=20)
    p.add_argument("--utterances-per-user", type=int, default=40)
    p.add_argument("--lm-sentences-per-user", type=int, default=4000)
    p.add_argument("--general-sentences", type=int, default=30_000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("forge", help="build the per-user dataset from raw books and metadata")
    p.add_argument("--books", required=True, help="directory of <book_id>.txt files")
    p.add_argument("--metadata", required=True, help="utterance TSV (utterance_id, speaker_id, book_id, transcript[, split])")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("stats", help="per-split dataset statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="also write the TSV here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-lm", help="train the word-piece model and a general n-gram LM")
    p.add_argument("--text", required=True, help="one sentence per line")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--wpm", help="reuse an existing word-piece model")
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--capacity", choices=sorted(lmlib.CAPACITY_ORDERS), default="M")
    p.add_argument("--order", type=int, help="n-gram order (overrides --capacity)")
    p.add_argument("--discount", type=float, default=0.75)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("personalize", help="train a user LM to interpolate with a general LM")
    p.add_argument("--wpm", required=True)
    p.add_argument("--general-lm", required=True)
    p.add_argument("--user-text", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mix-weight", type=float, default=0.5)
    p.add_argument("--size", type=int, help="use a random subset of this many sentences")
    p.add_argument("--seed", type=int, default=0, help="subset draw seed")
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("simulate", help="write simulated posterior lattices for every utterance")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--general-text")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decode", help="beam-search lattices with optional shallow fusion")
    p.add_argument("--lattices", required=True, help="directory searched recursively for *.lat")
    p.add_argument("--prior", required=True)
    p.add_argument("--wpm", required=True)
    p.add_argument("--lm", help="general LM file")
    p.add_argument("--user-lm", help="personalized user LM file (mixed with --lm)")
    p.add_argument("--config", help="INI config; its [decoder] section gives defaults")
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_decoder_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="per-user WER with bootstrap CIs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hyps", required=True, help="n-best TSV from decode or hyps TSV from run")
    p.add_argument("--name", default="EVAL")
    p.add_argument("--resamples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run one experiment preset end to end")
    p.add_argument("--preset", required=True, choices=xp.PRESETS)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("limited", help="limited-data trend over nested personalization subsets")
    _add_experiment_flags(p)
    p.add_argument("--sizes", type=int, nargs="+")
    p.set_defaults(func=cmd_limited)

    p = sub.add_parser("sweep", help="external LM weight sweep")
    _add_experiment_flags(p)
    p.add_argument("--weights", type=float, nargs="*")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"userlibri: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as err:
        print(f"userlibri: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:
        log.exception("internal error")
        print(f"userlibri: internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
