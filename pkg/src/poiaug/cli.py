"""Command-line entry point: ingest, train, augment, evaluate, export-geojson.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .baselines import impute_linear
from .config import ConfigError, RunConfig
from .data import (DatasetSplit, FeatureStats, GriddedSequence, Vocabulary, build_vocabulary, parse_checkin_file,
                   read_gridded, split_dataset, write_checkins, write_gridded)
from .decoder import impute_sequence
from .errors import ContractViolation, DataFormatError, NumericalError
from .evaluation import augmentation_benchmark
from .geojson import dumps, feature_collection
from .model import Seq2SeqModel
from .numerics import load_checkpoint, save_checkpoint
from .training import LOG_HEADER, train_three_stage

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "validation", "test")

log = logging.getLogger("poiaug")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (default: built-in defaults)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poiaug", description="Impute missing check-ins in LBSN trajectories.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse a SNAP check-in file into a dataset bundle")
    p.add_argument("input", help="SNAP check-in file, plain or gzip")
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.add_argument("--max-users", type=int, help="keep only the first N users (default: all)")
    p.add_argument("--max-records", type=int, help="stop after N valid records (default: all)")
    p.add_argument("--force", action="store_true", help="overwrite an existing bundle")
    _common(p)

    p = sub.add_parser("train", help="three-stage training of the imputer")
    p.add_argument("bundle")
    p.add_argument("--out", required=True, help="directory for checkpoint.txt, train_log.tsv, config.txt")
    p.add_argument("--stages", help="epochs per stage as a,b,c (default 5,10,50)")
    _common(p)

    p = sub.add_parser("augment", help="fill the missing slots of the training split")
    p.add_argument("bundle")
    p.add_argument("--method", required=True, choices=("nn", "pop", "model"))
    p.add_argument("--checkpoint", help="trained imputer (required for --method model)")
    p.add_argument("--out", required=True, help="augmented SNAP file; a .count sidecar is written next to it")
    p.add_argument("--marker", help="append a sixth column carrying this text on imputed rows")
    _common(p)

    p = sub.add_parser("evaluate", help="augmentation benchmark with downstream recommenders")
    p.add_argument("bundle")
    p.add_argument("--out", required=True, help="directory for report.tsv, report.json, config.txt")
    p.add_argument("--methods", help="comma list from original,li-nn,li-pop,pa-seq2seq (default all)")
    p.add_argument("--checkpoint", help="trained imputer for pa-seq2seq")
    _common(p)

    p = sub.add_parser("export-geojson", help="write selected sequences as GeoJSON points")
    p.add_argument("bundle")
    p.add_argument("--sequence", action="append", default=[], help="sequence id; repeatable")
    p.add_argument("--method", default="none", choices=("none", "nn", "pop", "model"),
                   help="fill missing slots before export (default none)")
    p.add_argument("--checkpoint", help="trained imputer (required for --method model)")
    p.add_argument("--out", required=True)
    _common(p)
    return parser


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    for flag, key in (("seed", "seed"), ("max_users", "max_users"), ("max_records", "max_records"),
                      ("stages", "stage_epochs"), ("methods", "methods"), ("checkpoint", "checkpoint"),
                      ("marker", "marker"), ("out", "output")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs[key] = str(value)
    return pairs


# bundle layout


def _bundle_split(bundle: Path, cfg: RunConfig) -> DatasetSplit:
    if not (bundle / "vocab.tsv").exists():
        raise FileNotFoundError(f"{bundle} is not a dataset bundle (no vocab.tsv)")
    grids = {name: read_gridded(bundle / f"{name}.grid.tsv", cfg.interval) for name in SPLITS}
    raw = {name: parse_checkin_file(bundle / f"{name}.snap.tsv").records for name in SPLITS}
    return DatasetSplit(grids["train"], grids["validation"], grids["test"], raw, (cfg.train_frac, cfg.val_frac))


def _bundle_config(bundle: Path, args) -> RunConfig:
    """Bundle defaults, then an explicit config file, then command-line overrides."""
    base = RunConfig.load(bundle / "config.txt") if (bundle / "config.txt").exists() else RunConfig()
    if args.config:
        base = RunConfig.from_text(Path(args.config).read_text(encoding="utf-8"), base)
    cfg = base.with_overrides(_overrides(args))
    cfg.validate()
    return cfg


def _load_model(path: str, cfg: RunConfig, vocab: Vocabulary) -> Seq2SeqModel:
    store, _ = load_checkpoint(path)
    model = Seq2SeqModel.from_store(store, window=cfg.window, zoneout_h=cfg.zoneout_h, zoneout_c=cfg.zoneout_c)
    if model.cfg.vocab_size != vocab.size:
        raise DataFormatError(f"checkpoint {path} has {model.cfg.vocab_size} POIs, bundle has {vocab.size}")
    return model


def _fill(seqs: list[GriddedSequence], method: str, bundle: Path, cfg: RunConfig, vocab: Vocabulary,
          checkpoint: str | None) -> list[GriddedSequence]:
    if method == "none":
        return seqs
    if method in ("nn", "pop"):
        return [impute_linear(s, vocab, method, cfg.pop_k) for s in seqs]
    if not checkpoint:
        raise UsageError("--method model requires --checkpoint")
    model = _load_model(checkpoint, cfg, vocab)
    stats = FeatureStats.from_text((bundle / "stats.txt").read_text(encoding="utf-8"))
    return [impute_sequence(s, model, vocab, stats) for s in seqs]


def cmd_ingest(args) -> int:
    pairs = _overrides(args)
    cfg = (RunConfig.load(args.config, pairs) if args.config else RunConfig().with_overrides(pairs))
    cfg.validate()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} already exists; pass --force to overwrite")
        shutil.rmtree(out)
    parsed = parse_checkin_file(args.input, cfg.max_users or None, cfg.max_records or None)
    split = split_dataset(parsed.records, cfg.interval, cfg.train_frac, cfg.val_frac, cfg.min_checkins,
                          cfg.max_gap, cfg.max_len)
    if not split.train:
        raise DataFormatError(f"{args.input}: no user has enough check-ins to train on")
    vocab = build_vocabulary(split.training_checkins())
    stats = FeatureStats.fit(split.train)
    out.mkdir(parents=True, exist_ok=True)
    cfg.input = str(args.input)
    cfg.output = str(out)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    vocab.save(out / "vocab.tsv")
    (out / "stats.txt").write_text(stats.to_text(), encoding="utf-8")
    for name in SPLITS:
        write_gridded(getattr(split, name), out / f"{name}.grid.tsv")
        write_checkins(split.raw[name], out / f"{name}.snap.tsv")
    kept = [c for name in SPLITS for c in split.raw[name]]
    users = len({c.user_id for c in kept})
    pois = len({c.poi_id for c in kept})
    density = len(kept) / (users * pois) if users and pois else 0.0
    summary = (f"users\t{users}\ncheckins\t{len(kept)}\npois\t{pois}\ndensity\t{density:.6g}\n"
               f"dropped_users\t{split.dropped_users}\nskipped_lines\t{parsed.skipped}\n"
               f"train_sequences\t{len(split.train)}\nvocabulary\t{vocab.size}\n")
    (out / "summary.tsv").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = Path(args.bundle)
    cfg = _bundle_config(bundle, args)
    split = _bundle_split(bundle, cfg)
    vocab = Vocabulary.load(bundle / "vocab.tsv")
    stats = FeatureStats.from_text((bundle / "stats.txt").read_text(encoding="utf-8"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    with open(out / "train_log.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LOG_HEADER + "\n")

        def emit(rec):
            fh.write(rec.to_tsv() + "\n")
            fh.flush()

        try:
            result = train_three_stage(split, vocab, stats, cfg.train_config(), log_fn=emit)
        except NumericalError as exc:
            if exc.store is not None:
                save_checkpoint(exc.store, out / "checkpoint.txt", cfg.seed)
            raise
    save_checkpoint(result.model.store, out / "checkpoint.txt", cfg.seed)
    print(f"checkpoint\t{out / 'checkpoint.txt'}\nbest_epoch\t{result.best_epoch}\nbest_val\t{result.best_val!r}")
    return EXIT_OK


def cmd_augment(args) -> int:
    bundle = Path(args.bundle)
    cfg = _bundle_config(bundle, args)
    if args.method == "model" and not cfg.checkpoint:
        raise UsageError("--method model requires --checkpoint")
    vocab = Vocabulary.load(bundle / "vocab.tsv")
    train = read_gridded(bundle / "train.grid.tsv", cfg.interval)
    filled = _fill(train, args.method, bundle, cfg, vocab, cfg.checkpoint)
    rows = [(s.checkin, s.imputed) for seq in filled for s in seq.slots if s.checkin is not None]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_checkins([c for c, _ in rows], out, cfg.marker or None, [f for _, f in rows])
    n_imputed = sum(f for _, f in rows)
    Path(str(out) + ".count").write_text(f"{n_imputed}\n", encoding="utf-8")
    print(f"rows\t{len(rows)}\nimputed\t{n_imputed}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = Path(args.bundle)
    cfg = _bundle_config(bundle, args)
    split = _bundle_split(bundle, cfg)
    vocab = Vocabulary.load(bundle / "vocab.tsv")
    stats = FeatureStats.from_text((bundle / "stats.txt").read_text(encoding="utf-8"))
    imputer = _load_model(cfg.checkpoint, cfg, vocab) if cfg.checkpoint else None
    report = augmentation_benchmark(split, vocab, cfg.methods, cfg.recommenders, cfg.recommender_config(),
                                    stats, imputer, cfg.pop_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def cmd_export_geojson(args) -> int:
    bundle = Path(args.bundle)
    cfg = _bundle_config(bundle, args)
    vocab = Vocabulary.load(bundle / "vocab.tsv")
    by_id = {}
    for name in SPLITS:
        for seq in read_gridded(bundle / f"{name}.grid.tsv", cfg.interval):
            by_id[seq.seq_id] = seq
    unknown = [s for s in args.sequence if s not in by_id]
    if unknown:
        raise LookupError(f"unknown sequence id(s): {', '.join(unknown)}")
    chosen = _fill([by_id[s] for s in args.sequence], args.method, bundle, cfg, vocab, cfg.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(feature_collection(chosen)), encoding="utf-8")
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "augment": cmd_augment, "evaluate": cmd_evaluate,
            "export-geojson": cmd_export_geojson}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"poiaug: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"poiaug: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, ContractViolation, LookupError, OSError, ValueError) as exc:
        print(f"poiaug: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
