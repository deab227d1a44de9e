"""Command-line entry point: prepare, synth, stats, train, eval, recommend.

Exit codes are 0 on success, 2 for usage errors, 3 for data errors and 4
for numeric failures. Every command that writes files also writes its
resolved settings as ``key=value`` lines next to them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data import (
    DatasetSplit,
    Vocabulary,
    encode_session,
    ingest,
    load_dataset,
    parse_ratios,
    repeat_ratio,
    save_dataset,
    split_sessions,
    synthesize,
    unroll,
    write_csv,
)
from .errors import CheckpointError, DataError, EmptyDatasetError, RepeatNetError, UsageError
from .evaluation import ModelScorer, PopScorer, SPopScorer, evaluate, popularity
from .model import ABLATIONS, predict
from .training import TrainConfig, load_checkpoint, read_config_file, save_checkpoint, train, write_config_file

logger = logging.getLogger("repeatnet")

TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
# flags that are settings of the run but not part of what gets echoed
NOT_ECHOED = {"command", "func", "config", "log_level"}


# -- helpers ----------------------------------------------------------------


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, []):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _resolved(args, extra=None):
    values = {k: v for k, v in vars(args).items() if k not in NOT_ECHOED and v is not None}
    values.update(extra or {})
    return {k: ",".join(map(str, v)) if isinstance(v, (list, tuple)) else v for k, v in values.items()}


def _parse_ks(text):
    try:
        ks = tuple(int(k) for k in str(text).split(","))
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be at least 1")
    return ks


def _load_dataset(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"--dataset {path} does not exist") from None


def _load_checkpoint(path):
    if not Path(path).exists():
        raise CheckpointError(f"--checkpoint {path} does not exist")
    return load_checkpoint(path)


def _ratio_cell(sessions):
    try:
        return f"{100 * repeat_ratio(unroll(sessions)):.2f}"
    except EmptyDatasetError:
        return "-"


def stats_table(named_sessions, num_items):
    """Sessions, examples and repeat ratio (%) per split, plus item count."""
    rows = [("split", "sessions", "examples", "repeat_ratio_pct")]
    for name, sessions in named_sessions:
        examples = sum(len(s) - 1 for s in sessions)
        rows.append((name, str(len(sessions)), str(examples), _ratio_cell(sessions)))
    width = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, width))) for r in rows]
    lines.append(f"items={num_items}")
    return lines


# -- commands ---------------------------------------------------------------


def cmd_prepare(args):
    _require(args, "input", "output")
    ratios = parse_ratios(args.split)
    sessions, vocab = ingest(args.input, args.min_item_count, args.min_session_len, args.max_session_len)
    train_s, val_s, test_s = split_sessions(sessions, ratios, by=args.split_by, seed=args.seed)
    split = DatasetSplit(train_s, val_s, test_s, vocab)
    resolved = _resolved(args)
    save_dataset(split, args.output, meta=resolved)
    write_config_file(resolved, f"{args.output}.config")
    for line in stats_table(split.splits().items(), len(vocab)):
        print(line)
    return 0


def cmd_synth(args):
    _require(args, "output")
    sessions = synthesize(args.items, args.sessions, (args.min_len, args.max_len), args.repeat_prob, args.seed, args.zipf)
    write_csv(sessions, Vocabulary.identity(args.items), args.output)
    write_config_file(_resolved(args), f"{args.output}.config")
    print(f"wrote {len(sessions)} sessions over {args.items} items to {args.output}")
    return 0


def cmd_stats(args):
    if (args.dataset is None) == (args.input is None):
        raise UsageError("give exactly one of --dataset or --input")
    if args.dataset is not None:
        split, _ = _load_dataset(args.dataset)
        named, n = list(split.splits().items()), len(split.vocabulary)
    else:
        sessions, vocab = ingest(args.input, args.min_item_count, args.min_session_len, args.max_session_len)
        named, n = [("all", sessions)], len(vocab)
    for line in stats_table(named, n):
        print(line)
    return 0


def cmd_train(args):
    _require(args, "dataset", "output_dir")
    split, _ = _load_dataset(args.dataset)
    config = TrainConfig.from_dict({k: getattr(args, k) for k in TRAIN_KEYS if getattr(args, k) is not None})
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(_resolved(args, config.to_dict()), out / "config.cfg")

    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:

        def on_epoch(record):
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            print(
                f"epoch={record['epoch']} lr={record['lr']:g} train_loss={record['train_loss']:.6f} "
                f"val_mrr@20={record['val_mrr20']} val_recall@20={record['val_recall20']}"
            )

        result = train(split, config, on_epoch=on_epoch)

    extra = {"ablation": config.ablation, "best_epoch": result.best_epoch}
    dtype = args.checkpoint_dtype
    save_checkpoint(out / "best.ckpt", result.params, None, config, split.vocabulary, dtype, extra)
    save_checkpoint(out / "last.ckpt", result.last_params, result.state, config, split.vocabulary, dtype, extra)
    print(f"best_epoch={result.best_epoch}")
    print(f"checkpoint={out / 'best.ckpt'}")
    return 0


def _check_compatible(ck, path, split, dataset_path):
    want = split.vocabulary.digest()
    have = ck.header.get("vocab_hash")
    if (have is not None and have != want) or ck.params.num_items != len(split.vocabulary):
        raise CheckpointError(
            f"--checkpoint {path} was trained on a different vocabulary than --dataset {dataset_path}"
        )


def _unique(label, taken):
    name, n = label, 2
    while name in taken:
        name, n = f"{label}#{n}", n + 1
    taken.add(name)
    return name


def cmd_eval(args):
    _require(args, "checkpoint", "dataset")
    ks = _parse_ks(args.k)
    split, _ = _load_dataset(args.dataset)
    sessions = split.splits().get(args.split)
    if not sessions:
        raise EmptyDatasetError(f"--split {args.split} of {args.dataset} has no sessions")
    examples = unroll(sessions)
    ablations = args.ablation or []
    if len(ablations) not in (0, 1, len(args.checkpoint)):
        raise UsageError("--ablation must be given once or once per --checkpoint")
    breakdown = args.breakdown == "repeat"

    reports, taken = [], set()
    for i, path in enumerate(args.checkpoint):
        ck = _load_checkpoint(path)
        _check_compatible(ck, path, split, args.dataset)
        if ablations:
            ablation = ablations[0] if len(ablations) == 1 else ablations[i]
        else:
            ablation = ck.config.ablation if ck.config is not None else "full"
        label = _unique(ablation, taken)
        reports.append(evaluate(ModelScorer(ck.params, ablation), examples, ks, breakdown, label))
    if args.baselines:
        counts = popularity(split.train, len(split.vocabulary))
        reports.append(evaluate(PopScorer(counts), examples, ks, breakdown, _unique("pop", taken)))
        reports.append(evaluate(SPopScorer(counts), examples, ks, breakdown, _unique("s-pop", taken)))

    for report in reports:
        for line in report.lines(args.split):
            print(line)
    if args.report_dir is not None:
        out = Path(args.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
            for report in reports:
                for record in report.records(args.split):
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        write_config_file(_resolved(args), out / "config.cfg")
    return 0


def cmd_recommend(args):
    _require(args, "checkpoint", "session")
    if args.top < 1:
        raise UsageError("--top must be at least 1")
    ck = _load_checkpoint(args.checkpoint)
    if not ck.vocab:
        raise CheckpointError(f"--checkpoint {args.checkpoint} carries no vocabulary; retrain with this version")
    vocab = Vocabulary(ck.vocab, [0] * len(ck.vocab))
    raw = [x.strip() for x in args.session.split(",") if x.strip()]
    prefix, unknown = encode_session(raw, vocab)
    for item in unknown:
        logger.warning("dropping unknown item id %r", item)
    if not prefix:
        raise UsageError("--session has no items known to the checkpoint")
    ablation = args.ablation or (ck.config.ablation if ck.config is not None else "full")
    pred = predict(ck.params, prefix, ablation)

    print(f"p_repeat={pred.p_repeat:.6f} p_explore={pred.p_explore:.6f}")
    order = sorted(range(len(pred.final)), key=lambda i: (-pred.final[i], i))[: args.top]
    for pos, i in enumerate(order, 1):
        print(f"{pos}\t{vocab.decode(i)}\t{pred.final[i]:.6f}\t{pred.branch(i)}")
    return 0


# -- parser -----------------------------------------------------------------


def _train_flags(p):
    g = p.add_argument_group("training settings (override --config)")
    g.add_argument("--lr", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--clip", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--lr-halve-every", type=int)
    g.add_argument("--max-epochs", type=int)
    g.add_argument("--joint-mode-loss", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--ablation", choices=ABLATIONS)
    g.add_argument("--d-emb", type=int)
    g.add_argument("--d-hid", type=int)


def _filter_flags(p):
    p.add_argument("--min-item-count", type=int, default=5)
    p.add_argument("--min-session-len", type=int, default=2)
    p.add_argument("--max-session-len", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="repeatnet", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--log-level", type=str.upper, choices=("DEBUG", "INFO", "WARNING", "ERROR"), default="WARNING"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key=value file; flags given on the command line win")
        p.set_defaults(func=func)
        return p

    p = command("prepare", cmd_prepare, "filter, index and split a click CSV")
    p.add_argument("--input")
    p.add_argument("--output")
    _filter_flags(p)
    p.add_argument("--split", default="8:1:1")
    p.add_argument("--split-by", choices=("chrono", "random"), default="chrono")
    p.add_argument("--seed", type=int, default=0)

    p = command("synth", cmd_synth, "write a synthetic click CSV")
    p.add_argument("--items", type=int, default=50)
    p.add_argument("--sessions", type=int, default=1000)
    p.add_argument("--repeat-prob", type=float, default=0.5)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--zipf", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")

    p = command("stats", cmd_stats, "print dataset statistics")
    p.add_argument("--dataset", help="prepared dataset file")
    p.add_argument("--input", help="raw click CSV, filtered with the flags below")
    _filter_flags(p)

    p = command("train", cmd_train, "train a model on a prepared dataset")
    p.add_argument("--dataset")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-dtype", choices=("float64", "float32"), default="float64")
    _train_flags(p)

    p = command("eval", cmd_eval, "report MRR@k and Recall@k")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--k", default="10,20")
    p.add_argument("--breakdown", choices=("repeat",))
    p.add_argument("--ablation", action="append", choices=ABLATIONS)
    p.add_argument("--baselines", action="store_true", help="also report POP and S-POP")
    p.add_argument("--report-dir")

    p = command("recommend", cmd_recommend, "rank next items for one session")
    p.add_argument("--checkpoint")
    p.add_argument("--session", help="comma-separated item ids")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--ablation", choices=ABLATIONS)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with values from ``--config`` as defaults, so flags still win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = read_config_file(args.config)
    except FileNotFoundError:
        raise DataError(f"--config {args.config} does not exist") from None
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in NOT_ECHOED:
            raise UsageError(f"--config {args.config}: unknown key {key!r} for {args.command}")
        action = actions[dest]
        if isinstance(action, (argparse.BooleanOptionalAction, argparse._StoreTrueAction)):
            defaults[dest] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[dest] = action.type(value)
            except ValueError:
                raise UsageError(f"--config {args.config}: bad value for {key}: {value!r}") from None
        elif isinstance(action, argparse._AppendAction):
            defaults[dest] = value.split(",")
        else:
            defaults[dest] = value
        if action.choices is not None:
            for v in defaults[dest] if isinstance(defaults[dest], list) else [defaults[dest]]:
                if v not in action.choices:
                    raise UsageError(f"--config {args.config}: {key} must be one of {list(action.choices)}")
    subparser.set_defaults(**defaults)
    args = parser.parse_args(argv)
    # append actions extend their default instead of replacing it
    for dest, value in defaults.items():
        if isinstance(actions[dest], argparse._AppendAction) and getattr(args, dest) != value:
            setattr(args, dest, getattr(args, dest)[len(value):])
    return args


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except RepeatNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
