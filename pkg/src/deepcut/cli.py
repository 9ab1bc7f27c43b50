"""``deepcut`` command line: gen-data, train, unlearn, eval, bench.

Errors go to stderr as one line, ``deepcut: error: <kind>: <message>``, with
exit status 2 for usage problems, 3 for configuration, 4 for data, 5 for
checkpoint or report files and 6 for training failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .bench import BenchmarkError, emit_reports, run_benchmark, score_outcome
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (PRESETS, DataError, TokenDataset, build_vocab_and_encode, generate_synthetic,
                   load_conll_dataset, select_forget, write_conll)
from .engines import (METHODS, TrainConfig, TrainingError, sisa_train, sisa_unlearn, train_model,
                      unlearn_deepcut, unlearn_finetune, unlearn_retrain, unlearn_reverse_gradient)
from .evaluation import evaluate_split
from .model import PersistenceError, checkpoint_load, checkpoint_save

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_TRAIN = 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (default $DEEPCUT_OUT or ./runs)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--data-seed", dest="data_seed")
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--dev-file", dest="dev_file")
    p.add_argument("--test-file", dest="test_file")
    for f in fields(TrainConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepcut", description="Contrastive unlearning benchmark for token classification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic corpus as CoNLL files")
    g.add_argument("--preset", choices=sorted(PRESETS), default="wnut16-scale")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", dest="out_dir")

    t = sub.add_parser("train", help="train the original model")
    _add_common(t)
    t.add_argument("--output", help="checkpoint path (default OUT_DIR/model.dcut)")

    u = sub.add_parser("unlearn", help="apply one unlearning method to a trained model")
    _add_common(u)
    u.add_argument("--model", help="checkpoint of the original model")
    u.add_argument("--method", choices=METHODS, required=True)
    u.add_argument("--fraction", type=float, default=0.10)

    e = sub.add_parser("eval", help="score a checkpoint")
    _add_common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("train", "dev", "test"), default="test")

    b = sub.add_parser("bench", help="run the method x fraction x seed grid and write reports")
    _add_common(b)
    b.add_argument("--methods")
    b.add_argument("--fractions")
    b.add_argument("--seeds")
    b.add_argument("--no-figures", action="store_true")
    return parser


_RUN_FLAGS = ("out_dir", "preset", "data_seed", "train_file", "dev_file", "test_file",
              "methods", "fractions", "seeds")


def resolve(args: argparse.Namespace) -> RunConfig:
    keys = [f.name for f in fields(TrainConfig)] + list(_RUN_FLAGS)
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return load_config(args.config, overrides)


def load_dataset(run: RunConfig) -> TokenDataset:
    if run.train_file:
        raw = load_conll_dataset(run.train_file, run.dev_file, run.test_file, name=Path(run.train_file).stem)
    else:
        if run.preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {run.preset!r}; choose from {', '.join(sorted(PRESETS))}")
        raw = generate_synthetic(PRESETS[run.preset], run.data_seed, name=run.preset)
    return build_vocab_and_encode(raw)


def _load_model(path, ds: TokenDataset):
    if path is None:
        raise UsageError("--model is required: train a checkpoint first with 'deepcut train'")
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return checkpoint_load(path, expect={"num_classes": ds.num_classes, "vocab_size": ds.vocab_size})


def _out(run: RunConfig) -> Path:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    spec = PRESETS[args.preset]
    ds = generate_synthetic(spec, args.seed, name=args.preset)
    out = Path(args.out_dir or load_config().out_dir) / args.preset
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "dev", "test"):
        write_conll(ds.split(split), out / f"{split}.conll")
        print(f"{split}\t{len(ds.split(split))}\t{out / f'{split}.conll'}")
    return 0


def cmd_train(args) -> int:
    run = resolve(args)
    ds = load_dataset(run)
    out = _out(run)
    model = train_model(ds, run.train, progress=sys.stdout)
    path = Path(args.output) if args.output else out / "model.dcut"
    checkpoint_save(model, path)
    (out / "run.conf").write_text(dump_config(run), encoding="utf-8")
    print(f"saved\t{path}")
    return 0


_ENGINES = {"retrain": unlearn_retrain, "finetune": unlearn_finetune,
            "revgrad": unlearn_reverse_gradient, "deepcut": unlearn_deepcut}


def cmd_unlearn(args) -> int:
    run = resolve(args)
    ds = load_dataset(run)
    cfg = run.train
    if args.method == "sisa":
        original = None
    else:
        original = _load_model(args.model, ds)
    request = select_forget(ds, args.fraction, cfg.seed)
    out = _out(run)
    exact = unlearn_retrain(ds, request, cfg)
    if args.method == "retrain":
        outcome = exact
    elif args.method == "sisa":
        ensemble = sisa_train(ds, cfg.sisa_shards, cfg)
        outcome = sisa_unlearn(ensemble, ds, request, cfg, progress=sys.stdout)
    else:
        outcome = _ENGINES[args.method](original, ds, request, cfg, progress=sys.stdout)

    if args.method == "sisa":
        saved = [out / f"sisa-shard{k}.dcut" for k in range(outcome.model.k)]
        for m, p in zip(outcome.model.members, saved):
            checkpoint_save(m, p)
    else:
        saved = [out / f"{args.method}.dcut"]
        checkpoint_save(outcome.model, saved[0])
    report = score_outcome(ds, request, outcome, exact.model, cfg.seed)
    doc = {"config": run.as_dict(), "report": report.as_dict(), "checkpoints": [str(p) for p in saved],
           "steps": outcome.steps, "retrained_shards": list(outcome.retrained_shards)}
    (out / f"{args.method}-report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"forget_f1\t{report.forget.f1:.6f}\nretained_f1\t{report.retained.f1:.6f}\n"
          f"test_f1\t{report.test.f1:.6f}\ntv\t{report.tv:.6f}\nseconds\t{report.seconds:.3f}")
    return 0


def cmd_eval(args) -> int:
    run = resolve(args)
    ds = load_dataset(run)
    model = _load_model(args.model, ds)
    score = evaluate_split(model, ds.split(args.split), ds.label_names)
    print(json.dumps({"split": args.split, **score.as_dict()}, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    run = resolve(args)
    ds = load_dataset(run)
    result = run_benchmark(ds, run.fractions, run.methods, run.seeds, run.train)
    out = _out(run)
    paths = emit_reports(result, out, run.as_dict(), figures=not args.no_figures)
    (out / "run.conf").write_text(dump_config(run), encoding="utf-8")
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")
    for f in result.failures:
        print(f"failed\t{f.method}\t{f.fraction}\t{f.seed}\t{f.error}", file=sys.stderr)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "unlearn": cmd_unlearn,
            "eval": cmd_eval, "bench": cmd_bench}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"deepcut: error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataError, FileNotFoundError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except PersistenceError as exc:
        return _fail("io", exc, EXIT_IO)
    except (TrainingError, BenchmarkError) as exc:
        return _fail("training", exc, EXIT_TRAIN)
    except ValueError as exc:
        return _fail("value", exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
