"""Command-line pipeline: gen-data, train, eval, stream and report.

Every command that writes files also writes ``manifest.json`` next to them,
recording the resolved configuration, input/output paths and seeds.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .corpus import (
    CorpusFormatError,
    GeneratorConfig,
    Vocabulary,
    generate_corpus,
    parse_corpus_file,
    split_corpus,
    write_corpus_file,
)
from .decoder import (
    decode_corpus,
    fixed_lookahead_decode,
    parse_decoder_name,
    parse_log_file,
    render_log,
    stream_decode,
    write_log_file,
)
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .metrics import (
    REPORT_COLUMNS,
    evaluate_logs,
    read_report_json,
    role_table,
    write_report_csv,
    write_report_json,
    write_role_csv,
    write_role_json,
)
from .trainer import TrainingDiverged, make_train_config, read_config_file, train, write_config_file

log = logging.getLogger("streamdisfl")

MASK_FLAGS = {"soft": "soft_relaxation", "hard": "hard_stop_gradient", "off": "off"}
SPLIT_NAMES = ("train", "dev", "test")


class CommandError(Exception):
    """A failure reported to the user as a one-line diagnostic."""


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seeds: dict
    version: str = __version__
    started: str = ""
    finished: str = ""

    def write(self, path) -> None:
        self.finished = _now()
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# argparse value types
# ---------------------------------------------------------------------------


def probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must not be negative, got {value}")
    return value


def non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def decoder_name(text: str) -> str:
    try:
        parse_decoder_name(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def int_pair(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}") from None
    return lo, hi


def ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TRAIN,DEV,TEST, got {text!r}") from None
    if len(parts) != 3 or any(p <= 0 for p in parts) or abs(sum(parts) - 1) > 1e-9:
        raise argparse.ArgumentTypeError(f"need three positive ratios summing to 1, got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, parser) -> None:
    started = _now()
    overrides = {
        "base_vocab_size": args.base_vocab_size,
        "utterance_length_range": args.length_range,
        "disfluency_rate": args.disfluency_rate,
        "repetition_fraction": args.repetition_fraction,
        "substitution_fraction": args.substitution_fraction,
        "deletion_fraction": args.deletion_fraction,
        "interregnum_probability": args.interregnum_probability,
        "edit_rate": args.edit_rate,
        "reparandum_length_range": args.reparandum_range,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        config = GeneratorConfig(seed=args.seed, **overrides)
    except ValueError as exc:
        parser.error(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(config, args.n)
    parts = split_corpus(corpus, args.split, seed=args.seed) if args.n else ([], [], [])
    outputs = {}
    for name, part in zip(SPLIT_NAMES, parts):
        path = out / f"{name}.tsv"
        write_corpus_file(part, path)
        outputs[name] = str(path)
    RunManifest("gen-data", {"generator": dataclasses.asdict(config), "n": args.n, "split": list(args.split)},
                {}, outputs, {"seed": args.seed}, started=started).write(out / "manifest.json")
    print(f"wrote {', '.join(f'{len(p)} {n}' for n, p in zip(SPLIT_NAMES, parts))} utterances to {out}")


def _read_corpus(path, what):
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"{what} file not found: {path}")
    try:
        corpus = parse_corpus_file(path)
    except CorpusFormatError as exc:
        raise CommandError(str(exc)) from None
    if not corpus:
        raise CommandError(f"{what} file is empty: {path}")
    return corpus


def cmd_train(args, parser) -> None:
    started = _now()
    data = Path(args.data) if args.data else None
    train_path = Path(args.train) if args.train else (data / "train.tsv" if data else None)
    dev_path = Path(args.dev) if args.dev else (data / "dev.tsv" if data else None)
    if train_path is None or dev_path is None:
        parser.error("give --data DIR or both --train and --dev")
    train_corpus = _read_corpus(train_path, "training")
    dev_corpus = _read_corpus(dev_path, "dev")

    enc_over, train_over, loss_over = {}, {}, {}
    if args.config:
        if not Path(args.config).is_file():
            raise CommandError(f"config file not found: {args.config}")
        try:
            enc_over, train_over, loss_over = read_config_file(args.config)
        except ValueError as exc:
            raise CommandError(str(exc)) from None
    flags = {"gamma": args.gamma, "lambda_": args.lambda_, "learning_rate": args.lr,
             "epochs": args.epochs, "batch_size": args.batch_size, "warmup_epochs": args.warmup_epochs,
             "lambda_start": args.lambda_start, "lambda_ramp_epochs": args.ramp_epochs}
    if args.mask_mode is not None:
        flags["mask_mode"] = MASK_FLAGS[args.mask_mode]
    if args.seed is not None:
        enc_over["seed"] = args.seed
        flags["shuffle_seed"] = args.seed
        flags["dropout_seed"] = args.seed
    overrides = {**train_over, **loss_over, **{k: v for k, v in flags.items() if v is not None}}
    if args.no_ramp:
        overrides.update(lambda_start=None, lambda_ramp_epochs=0)

    vocab = Vocabulary.build(train_corpus)
    enc_over.setdefault("vocab_size", len(vocab))
    try:
        train_config = make_train_config(args.preset, **overrides)
        encoder_config = EncoderConfig(**enc_over)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"bad configuration: {exc}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path, cfg_path = out / "model.ckpt", out / "train_log.csv", out / "train.cfg"
    write_config_file(cfg_path, encoder_config, train_config)
    try:
        model, report = train(train_corpus, dev_corpus, encoder_config, train_config,
                              vocab=vocab, log_path=log_path)
    except TrainingDiverged as exc:
        raise CommandError(f"training diverged: {exc}") from None
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    meta = {"vocab": vocab.words, "best_epoch": report.best_epoch,
            "best_dev_streaming_f1": report.best_dev_streaming_f1,
            "train_config": _jsonable(dataclasses.asdict(train_config))}
    save_checkpoint(model, ckpt, meta)
    config = {"preset": args.preset, "encoder": dataclasses.asdict(encoder_config),
              "train": _jsonable(dataclasses.asdict(train_config))}
    RunManifest("train", config, {"train": str(train_path), "dev": str(dev_path), "config": args.config},
                {"checkpoint": str(ckpt), "log": str(log_path), "config": str(cfg_path)},
                {"encoder": encoder_config.seed, "shuffle": train_config.shuffle_seed,
                 "dropout": train_config.dropout_seed},
                started=started).write(out / "manifest.json")
    print(f"best epoch {report.best_epoch} (dev streaming F1 {report.best_dev_streaming_f1:.4f}); "
          f"checkpoint {ckpt}")


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"checkpoint not found: {path}")
    try:
        model, meta = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CommandError(f"cannot read checkpoint {path}: {exc}") from None
    if "vocab" not in meta:
        raise CommandError(f"checkpoint {path} has no vocabulary")
    return model, Vocabulary(list(meta["vocab"]))


def _write_reports(out: Path, logs, roles, name: str) -> dict:
    report = evaluate_logs(logs, roles, name)
    rows = role_table(logs, roles)
    paths = {"metrics_csv": out / "metrics.csv", "metrics_json": out / "metrics.json",
             "roles_csv": out / "roles.csv", "roles_json": out / "roles.json"}
    write_report_csv([report], paths["metrics_csv"])
    write_report_json(report, paths["metrics_json"])
    write_role_csv(rows, paths["roles_csv"])
    write_role_json(rows, paths["roles_json"])
    return {k: str(v) for k, v in paths.items()}


def cmd_eval(args, parser) -> None:
    started = _now()
    model, vocab = _load_model(args.checkpoint)
    corpus = _read_corpus(args.corpus, "evaluation")
    too_long = [u.id for u in corpus if len(u) > model.config.max_tokens]
    if too_long:
        raise CommandError(f"{len(too_long)} utterances exceed {model.config.max_tokens} tokens "
                           f"(first: {too_long[0]})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs = decode_corpus(model, corpus, vocab, args.decoder, args.threshold)
    log_path = out / "predictions.log"
    write_log_file(logs, log_path)
    if parse_log_file(log_path) != logs:
        raise CommandError(f"prediction log {log_path} did not read back identically")
    name = args.name or args.decoder
    outputs = {"log": str(log_path), **_write_reports(out, logs, [u.roles for u in corpus], name)}
    RunManifest("eval", {"decoder": args.decoder, "threshold": args.threshold, "name": name},
                {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus)}, outputs, {},
                started=started).write(out / "manifest.json")
    print(f"wrote {len(logs)} logs and reports to {out}")


def cmd_stream(args, parser) -> None:
    if args.file:
        path = Path(args.file)
        if not path.is_file():
            raise CommandError(f"input file not found: {path}")
        text = path.read_text(encoding="utf-8")
    else:
        text = args.text or ""
    tokens = text.split()
    if not tokens:
        parser.error("input utterance is empty")
    model, vocab = _load_model(args.checkpoint)
    if len(tokens) > model.config.max_tokens:
        raise CommandError(f"input has {len(tokens)} tokens; the model accepts at most {model.config.max_tokens}")
    ids = vocab.encode(tokens)
    la = parse_decoder_name(args.decoder)
    if la is None:
        result = stream_decode(model, ids, args.threshold)
    else:
        result = fixed_lookahead_decode(model, ids, la)
    for line in render_log(result, tokens):
        print(line)


def _report_from_json(d: dict) -> dict:
    return {c: d.get(c) for c in REPORT_COLUMNS}


def cmd_report(args, parser) -> None:
    started = _now()
    out = Path(args.out)
    if args.log:
        if not args.corpus:
            parser.error("--log needs --corpus for the gold roles")
        log_path = Path(args.log)
        if not log_path.is_file():
            raise CommandError(f"log file not found: {log_path}")
        try:
            logs = parse_log_file(log_path)
        except ValueError as exc:
            raise CommandError(f"{log_path}: {exc}") from None
        corpus = {u.id: u for u in _read_corpus(args.corpus, "gold")}
        missing = [lg.utterance_id for lg in logs if lg.utterance_id not in corpus]
        if missing:
            raise CommandError(f"log utterance {missing[0]!r} is not in {args.corpus}")
        roles = [corpus[lg.utterance_id].roles for lg in logs]
        out.mkdir(parents=True, exist_ok=True)
        outputs = _write_reports(out, logs, roles, args.name or log_path.parent.name)
        RunManifest("report", {"name": args.name}, {"log": str(log_path), "corpus": str(args.corpus)},
                    outputs, {}, started=started).write(out / "manifest.json")
        print(f"regenerated reports in {out}")
        return
    if not args.metrics:
        parser.error("give --metrics FILE... or --log FILE --corpus FILE")
    reports = []
    for path in args.metrics:
        if not Path(path).is_file():
            raise CommandError(f"metrics file not found: {path}")
        d = read_report_json(path)
        reports.append(_TableRow(_report_from_json(d)))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out)
    RunManifest("report", {}, {"metrics": list(args.metrics)}, {"table": str(out)}, {},
                started=started).write(out.with_name(out.stem + ".manifest.json"))
    for rep in reports:
        row = rep.row()
        print("  ".join(f"{c}={_short(row[c])}" for c in REPORT_COLUMNS[:9]))


class _TableRow:
    """A stored report row, accepted by ``write_report_csv`` like a MetricReport."""

    def __init__(self, row: dict):
        self._row = {k: (float("nan") if v is None and k not in ("Model",) else v) for k, v in row.items()}

    def row(self) -> dict:
        return self._row


def _short(v) -> str:
    return f"{v:.3f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamdisfl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/dev/test corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=2500, help="number of utterances (default 2500)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=ratios, default=(0.8, 0.1, 0.1), help="TRAIN,DEV,TEST ratios")
    p.add_argument("--base-vocab-size", type=positive_int)
    p.add_argument("--length-range", type=int_pair, help="MIN,MAX fluent words per utterance")
    p.add_argument("--reparandum-range", type=int_pair, help="MIN,MAX reparandum length")
    for flag in ("disfluency-rate", "repetition-fraction", "substitution-fraction", "deletion-fraction",
                 "interregnum-probability", "edit-rate"):
        p.add_argument(f"--{flag}", type=probability)
    p.set_defaults(func=cmd_gen_data, subparser=p)

    p = sub.add_parser("train", help="train a tagger and keep the best dev epoch")
    p.add_argument("--data", help="directory holding train.tsv and dev.tsv")
    p.add_argument("--train", help="training corpus file")
    p.add_argument("--dev", help="dev corpus file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", help="key = value file of encoder/training/loss fields")
    p.add_argument("--gamma", type=non_negative_float)
    p.add_argument("--lambda", dest="lambda_", type=non_negative_float)
    p.add_argument("--lr", type=non_negative_float)
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--warmup-epochs", type=non_negative_int, help="leading epochs on the full-sequence loss only")
    p.add_argument("--lambda-start", type=non_negative_float, help="latency weight before the ramp")
    p.add_argument("--ramp-epochs", type=non_negative_int, help="final epochs over which lambda moves to --lambda")
    p.add_argument("--no-ramp", action="store_true", help="keep the latency weight fixed")
    p.add_argument("--mask-mode", choices=sorted(MASK_FLAGS))
    p.add_argument("--seed", type=int, help="seed for initialisation, shuffling and dropout")
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("eval", help="decode a corpus and write logs and metric reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--decoder", type=decoder_name, default="dynamic", help="dynamic or la:K")
    p.add_argument("--threshold", type=probability, default=0.5, help="wait threshold")
    p.add_argument("--name", help="model name in the report (default: the decoder)")
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("stream", help="replay one utterance prefix by prefix")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="whitespace-separated utterance")
    src.add_argument("--file", help="file holding the utterance")
    p.add_argument("--decoder", type=decoder_name, default="dynamic")
    p.add_argument("--threshold", type=probability, default=0.5)
    p.set_defaults(func=cmd_stream, subparser=p)

    p = sub.add_parser("report", help="join metric files or regenerate reports from a log")
    p.add_argument("--metrics", nargs="+", help="metrics.json files to join into one table")
    p.add_argument("--log", help="predictions.log to re-score")
    p.add_argument("--corpus", help="gold corpus for --log")
    p.add_argument("--name", help="model name for --log")
    p.add_argument("--out", required=True, help="table CSV path, or output directory with --log")
    p.set_defaults(func=cmd_report, subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args, args.subparser)
    except CommandError as exc:
        print(f"streamdisfl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
