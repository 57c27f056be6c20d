"""Command line entry point: ``vgse gen-synth | train | eval | embed``.

Exit codes: 0 success, 1 validation error, 2 runtime error. Diagnostics go to
stderr; stdout only carries paths and digests.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence, Union

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Corpus,
    Vocab,
    build_vocab,
    gen_synthetic,
    gen_synthetic_sts,
    load_corpus,
    load_sts_pairs,
    save_corpus,
    save_sts_pairs,
    write_features,
)
from .errors import ConfigError, DataValidationError, DimensionError, FormatError
from .evaluation import RetrievalResult, StsReport, eval_retrieval, eval_sts, write_json, write_report_csv
from .model import Encoder, Ensemble
from .nn import EncoderConfig
from .objective import LossConfig
from .seeding import derive_seed
from .train import METRIC_COLUMNS, ScheduleConfig, Snapshot, TrainConfig, fit

logger = logging.getLogger("vgse")

VALIDATION_ERRORS = (ConfigError, DataValidationError, DimensionError, FormatError)

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {"captions": None, "features": None, "splits": None, "sts": None},
    "encoder": {
        "char_embed_dim": 20,
        "hidden_size": 64,
        "rnn_kind": "gru",
        "pooling": "attention",
        "attention_hidden": 128,
    },
    "train": {
        "epochs": 32,
        "snapshot_every": 4,
        "batch_size": 32,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "ensemble_size": 2,
    },
    "schedule": {"lr_min": 1e-6, "lr_max": 1e-3, "cycle_epochs": 4, "cycle_len": None},
    "loss": {"margin": 0.2, "reduction": "sum"},
}


# -- run config ---------------------------------------------------------------------


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(defaults[key], value, where + ".")
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def resolve_config(given: Optional[dict] = None, overrides: Sequence[str] = ()) -> dict:
    """Merge a partial run config over the defaults and apply ``key=value`` overrides."""
    cfg = _merge(DEFAULT_CONFIG, given or {})
    for o in overrides:
        _apply_override(cfg, o)
    for key in ("captions", "features", "splits"):
        if not cfg["data"][key]:
            raise ConfigError(f"data.{key} is required")
    try:
        TrainConfig(**{k: v for k, v in cfg["train"].items() if k != "ensemble_size"}, seed=int(cfg["seed"]))
        LossConfig(**cfg["loss"])
        EncoderConfig(char_vocab_size=1, image_feature_dim=1, **cfg["encoder"])
        s = cfg["schedule"]
        ScheduleConfig(s["lr_min"], s["lr_max"], int(s["cycle_len"] or 1))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["schedule"]["cycle_len"] is None and not cfg["schedule"]["cycle_epochs"] > 0:
        raise ConfigError("schedule needs cycle_len or a positive cycle_epochs")
    return cfg


def load_config_file(path) -> dict:
    try:
        given = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return given


# -- model files --------------------------------------------------------------------


def load_encoder(path) -> Encoder:
    params, config, meta = load_checkpoint(path)
    if "vocab" not in meta:
        raise FormatError(f"{path}: checkpoint metadata carries no vocabulary")
    return Encoder(config, params, Vocab.from_list(meta["vocab"]))


def load_model(path) -> Union[Encoder, Ensemble]:
    """A ``.gcpt`` checkpoint gives one encoder; a manifest gives the selected ensemble."""
    path = Path(path)
    head = path.read_bytes()[:4]
    if head == b"GCPT":
        return load_encoder(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        members = manifest["selected"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: neither a checkpoint nor a snapshot manifest") from exc
    return Ensemble([load_encoder(path.parent / m) for m in members])


def _file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# -- commands ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = gen_synthetic(
        args.images,
        args.concepts_per_image,
        args.concepts,
        args.feature_dim,
        args.noise,
        args.seed,
        dev_images=args.dev_images,
        test_images=args.test_images,
        captions_per_image=args.captions_per_image,
    )
    files = [out / "captions.tsv", out / "features.ifv", out / "splits.tsv"]
    save_corpus(corpus, *files)
    if args.sts_pairs:
        sts_path = out / "sts.tsv"
        pairs = gen_synthetic_sts(args.sts_pairs, args.concepts_per_image, args.concepts, derive_seed(args.seed, "sts"))
        save_sts_pairs(sts_path, pairs)
        files.append(sts_path)
    for f in files:
        print(f)
    print(f"sha256 {_file_digest(files)}")
    return 0


def run_training(cfg: dict) -> dict:
    """Train from a resolved run config; returns the paths written."""
    data = cfg["data"]
    corpus = load_corpus(data["captions"], data["features"], data["splits"])
    sts_pairs = load_sts_pairs(data["sts"]) if data.get("sts") else None
    vocab = build_vocab(corpus)
    enc = EncoderConfig(char_vocab_size=len(vocab), image_feature_dim=corpus.feature_dim, **cfg["encoder"])
    tr = dict(cfg["train"])
    ensemble_size = tr.pop("ensemble_size")
    train_config = TrainConfig(**tr, seed=int(cfg["seed"]))
    n_batches = math.ceil(len(corpus.split_captions("train")) / train_config.batch_size)
    sched = cfg["schedule"]
    cycle_len = int(sched["cycle_len"] or max(1, round(sched["cycle_epochs"] * n_batches)))
    resolved = copy.deepcopy(cfg)
    resolved["schedule"]["cycle_len"] = cycle_len
    schedule = ScheduleConfig(sched["lr_min"], sched["lr_max"], cycle_len)
    loss = LossConfig(**cfg["loss"])

    out = Path(cfg["output_dir"])
    snap_dir = out / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", resolved)

    def checkpoint_meta(epoch: int, score: Optional[float]) -> dict:
        return {"epoch": epoch, "dev_recall_at_10": score, "vocab": vocab.to_list(), "seed": int(cfg["seed"])}

    def on_snapshot(snap: Snapshot) -> None:
        save_checkpoint(snap.params, enc, checkpoint_meta(snap.epoch, snap.dev_recall_at_10), snap_dir / f"epoch_{snap.epoch:03d}.gcpt")

    metrics_path = out / "metrics.csv"
    columns = METRIC_COLUMNS + (["dev_sts_r"] if sts_pairs else [])
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)

        def on_epoch(row: dict) -> None:
            writer.writerow([_fmt(row[c]) for c in columns])
            fh.flush()

        result = fit(corpus, vocab, enc, train_config, schedule, loss, sts_pairs, ensemble_size, on_snapshot, on_epoch)

    save_checkpoint(result.trainer.params, enc, checkpoint_meta(train_config.epochs, None), out / "final.gcpt")
    manifest = {
        "snapshots": [
            {"epoch": s.epoch, "dev_recall_at_10": s.dev_recall_at_10, "path": f"snapshots/epoch_{s.epoch:03d}.gcpt"}
            for s in result.snapshots
        ],
        "selected": [f"snapshots/epoch_{s.epoch:03d}.gcpt" for s in result.selected],
    }
    if not manifest["selected"]:
        manifest["selected"] = ["final.gcpt"]
    write_json(out / "manifest.json", manifest)
    return {
        "config": out / "config.json",
        "metrics": metrics_path,
        "manifest": out / "manifest.json",
        "final": out / "final.gcpt",
        "result": result,
    }


def cmd_train(args) -> int:
    given = load_config_file(args.config) if args.config else {}
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(str(args.output_dir))}")
    cfg = resolve_config(given, overrides)
    paths = run_training(cfg)
    for key in ("config", "metrics", "manifest", "final"):
        print(paths[key])
    return 0


def evaluate_model(
    model: Union[Encoder, Ensemble],
    corpus: Optional[Corpus],
    split: str = "test",
    folds: Optional[int] = None,
    sts_pairs=None,
    sts_name: str = "sts",
) -> tuple[Optional[RetrievalResult], Optional[StsReport]]:
    retrieval = sts = None
    if corpus is not None:
        if corpus.feature_dim != model.config.image_feature_dim:
            raise DimensionError(
                f"corpus has {corpus.feature_dim}-dim features, model expects {model.config.image_feature_dim}"
            )
        retrieval = eval_retrieval(model, corpus, split, folds)
    if sts_pairs is not None:
        sts = eval_sts(model, sts_pairs, sts_name)
    return retrieval, sts


def cmd_eval(args) -> int:
    model = load_model(args.model)
    corpus_args = [args.captions, args.features, args.splits]
    if any(corpus_args) and not all(corpus_args):
        raise ConfigError("--captions, --features and --splits must be given together")
    corpus = load_corpus(*corpus_args) if all(corpus_args) else None
    sts_pairs = load_sts_pairs(args.sts) if args.sts else None
    if corpus is None and sts_pairs is None:
        raise ConfigError("nothing to evaluate: give a corpus and/or --sts")
    sts_name = Path(args.sts).stem if args.sts else "sts"
    retrieval, sts = evaluate_model(model, corpus, args.split, args.folds, sts_pairs, sts_name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if retrieval is not None:
        write_json(out / "retrieval.json", retrieval.to_dict())
        write_report_csv(out / "retrieval.csv", retrieval.to_rows())
        print(out / "retrieval.json")
        print(out / "retrieval.csv")
    if sts is not None:
        write_json(out / "sts.json", sts.to_dict())
        write_report_csv(out / "sts.csv", sts.to_rows())
        print(out / "sts.json")
        print(out / "sts.csv")
    return 0


def cmd_embed(args) -> int:
    model = load_model(args.model)
    lines = Path(args.sentences).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for k, line in enumerate(lines, start=1):
        if not line.strip():
            raise DataValidationError(f"{args.sentences}:{k}: empty line")
    if not lines:
        raise DataValidationError(f"{args.sentences}: no sentences")
    emb = model.encode_captions(lines)
    write_features(args.out, [str(k) for k in range(1, len(lines) + 1)], emb)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vgse", description="Visually grounded character-level sentence embeddings.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic corpus (captions, features, splits, STS pairs)")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, default=700, help="total images over all splits")
    g.add_argument("--dev-images", type=int, default=100)
    g.add_argument("--test-images", type=int, default=100)
    g.add_argument("--captions-per-image", type=int, default=5)
    g.add_argument("--concepts-per-image", type=int, default=3)
    g.add_argument("--concepts", type=int, default=32)
    g.add_argument("--feature-dim", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--sts-pairs", type=int, default=300)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config", nargs="?", help="run config JSON (defaults fill missing keys)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=8")
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or snapshot manifest")
    e.add_argument("model", help=".gcpt checkpoint or manifest.json")
    e.add_argument("--captions")
    e.add_argument("--features")
    e.add_argument("--splits")
    e.add_argument("--split", default="test", choices=["train", "dev", "test"])
    e.add_argument("--folds", type=int)
    e.add_argument("--sts")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="embed one sentence per line into an IFV1 file")
    m.add_argument("model")
    m.add_argument("sentences")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_embed)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
