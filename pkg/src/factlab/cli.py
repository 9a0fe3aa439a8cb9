"""Command-line interface.

Exit codes: 0 success, 2 spec/argument validation failure, 3 experiment
finished with failed cells.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import factgen
from .errors import ConfigurationError, FactlabError
from .evaluator import dump_predictions, generalization_eval, memorization_rate, predict_all
from .harness import ExperimentSpec, compare_groups, run_experiment, validate_spec
from .model import ModelConfig, count_params, init_model, load_checkpoint, save_checkpoint
from .scaling import find_capacity, fit_linear, fit_negexp, fit_powerlaw, write_points_csv
from .trainer import EncodedDataset, TrainConfig, sweep_lr, train


def _schema_arg(value: str):
    if value in ("paper", "compact"):
        return factgen.default_schema(value)
    return factgen.schema_from_json(value)


def _model_args(p: argparse.ArgumentParser):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=96)
    p.add_argument("--intermediate", type=int, default=0, help="0 = 8/3*hidden rounded up to 128")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-seq-len", type=int, default=256)


def _model_from_args(args) -> ModelConfig:
    import math
    inter = args.intermediate or 128 * math.ceil(8 * args.hidden / (3 * 128))
    return ModelConfig(num_layers=args.layers, hidden=args.hidden, intermediate=inter,
                       heads=args.heads, max_seq_len=args.max_seq_len)


def cmd_synth(args) -> int:
    schema = _schema_arg(args.schema)
    if args.attributes:
        schema = factgen.schema_subset(schema, args.attributes.split(","))
    ds = factgen.synth_corpus(schema, args.num_keys, args.seed)
    factgen.write_corpus(ds, args.out)
    if args.schema_out:
        factgen.schema_to_json(schema, args.schema_out)
    print(f"wrote {len(ds)} triples over {len(ds.keys())} keys to {args.out}")
    return 0


def cmd_train(args) -> int:
    schema = _schema_arg(args.schema)
    ds = factgen.read_corpus(args.corpus, schema)
    data = EncodedDataset.from_facts(ds)
    cfg = _model_from_args(args)
    state = init_model(cfg, seed=args.seed)
    tcfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed, eval_every=args.eval_every)
    report = train(state, data, tcfg, run_dir=args.out, resume=args.resume)
    print(f"final loss {report.final_loss():.4f} after {report.steps} steps "
          f"({report.wall_clock:.0f}s); run dir: {args.out}")
    return 0


def cmd_eval(args) -> int:
    state, _, _ = load_checkpoint(args.checkpoint)
    schema = _schema_arg(args.schema)
    ds = factgen.read_corpus(args.corpus, schema)
    data = EncodedDataset.from_facts(ds)
    rep = memorization_rate(state, data)
    print(f"MR {rep.overall_mr:.4f}")
    for attr, mr in sorted(rep.per_attribute_mr.items()):
        print(f"  {attr}: {mr:.4f} (n={rep.per_attribute_counts[attr]})")
    if args.dump:
        dump_predictions(predict_all(state, data), args.dump)
        print(f"predictions dumped to {args.dump}")
    return 0


def cmd_capacity(args) -> int:
    schema = _schema_arg(args.schema)
    if args.attributes:
        schema = factgen.schema_subset(schema, args.attributes.split(","))
    corpus = factgen.synth_corpus(schema, args.corpus_keys, args.seed)
    cfg = _model_from_args(args)
    tcfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs,
                       batch_size=args.batch_size, seed=args.seed)
    point = find_capacity(cfg, args.epochs, args.phi, corpus, search_budget=args.budget,
                          train_cfg=tcfg, seed=args.seed, initial_guess=args.initial_guess)
    print(json.dumps(point.as_row(), indent=2))
    if args.out:
        write_points_csv([point], args.out)
    return 0


def cmd_fit(args) -> int:
    rows = np.loadtxt(args.points, delimiter=",", skiprows=args.skip_header)
    pts = [(float(x), float(y)) for x, y in rows[:, :2]]
    fit = {"linear": fit_linear, "negexp": fit_negexp, "powerlaw": fit_powerlaw}[args.law](pts)
    print(json.dumps({"law": fit.law, "parameters": fit.parameters,
                      "residual": fit.residual, "r_squared": fit.r_squared}, indent=2))
    if args.out:
        fit.to_json(args.out)
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_json(args.spec)
    errors = validate_spec(spec)
    if errors:
        for e in errors:
            print(f"spec error: {e}", file=sys.stderr)
        return 2
    records = run_experiment(spec, resume=(args.action == "resume"))
    failed = [r for r in records if r.status != "done"]
    print(f"{len(records)} cells, {len(failed)} failed; outputs in {spec.output_dir}")
    try:
        table = compare_groups(records, kind=spec.kind)
        print(table.text())
    except (ConfigurationError, FactlabError):
        pass
    return 3 if failed else 0


def cmd_report(args) -> int:
    from .reporting import read_records_csv, report
    records = read_records_csv(args.records)
    written = report(records, args.out, formats=args.formats.split(","))
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_sweep(args) -> int:
    schema = _schema_arg(args.schema)
    ds = factgen.read_corpus(args.corpus, schema)
    data = EncodedDataset.from_facts(ds)
    cfg = _model_from_args(args)
    lrs = [float(v) for v in args.lrs.split(",")]
    results = sweep_lr(cfg, data, lrs, epochs=args.epochs, seed=args.seed,
                       batch_size=args.batch_size)
    for lr, loss, mr in results:
        print(f"lr {lr:.2e}: loss {loss:.4f} MR {mr:.4f}")
    best = max(results, key=lambda r: (r[2], -r[1]))
    print(f"best lr: {best[0]:.2e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factlab",
                                 description="fact-memorization measurement lab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fact corpus")
    p.add_argument("--schema", default="paper", help="'paper', 'compact', or a schema JSON file")
    p.add_argument("--attributes", default="", help="comma-separated attribute subset")
    p.add_argument("--num-keys", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out", default="")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", default="paper")
    _model_args(p)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="measure memorization rate of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", default="paper")
    p.add_argument("--dump", default="", help="JSONL predictions path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("capacity", help="band-search the fact capacity of one model")
    p.add_argument("--schema", default="compact")
    p.add_argument("--attributes", default="")
    p.add_argument("--corpus-keys", type=int, required=True)
    _model_args(p)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--phi", type=float, default=95.0)
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--initial-guess", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_capacity)

    p = sub.add_parser("fit", help="fit a scaling law to (x, y) CSV points")
    p.add_argument("--law", choices=["linear", "negexp", "powerlaw"], required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--skip-header", type=int, default=1)
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("experiment", help="run or resume a declarative experiment")
    p.add_argument("action", choices=["run", "resume"])
    p.add_argument("spec", help="experiment spec JSON")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("report", help="render tables and SVG plots from records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--formats", default="csv,svg")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("sweep", help="learning-rate grid sweep")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", default="compact")
    _model_args(p)
    p.add_argument("--lrs", default="1e-3,3e-3,6e-3")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FactlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
