"""Declarative experiment runner: protocol builders, manifests, comparisons.

An ExperimentSpec names a protocol kind plus its grids; the runner expands it
into (group x seed) cells, executes them with per-cell determinism, and
persists a manifest so interrupted runs resume without re-running finished
cells. Compared groups always carry equal effective example counts; the
builders construct them that way and the validator re-checks.
"""

from __future__ import annotations

import hashlib
import json
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from threading import Lock

import numpy as np

from . import abilities, factgen
from .errors import ConfigurationError, FactlabError
from .evaluator import generalization_eval, memorization_rate
from .model import ModelConfig, count_params, init_model, reference_config
from .scaling import (
    CapacityPoint,
    capacity_by_first_epoch,
    find_capacity,
    fit_linear,
    fit_negexp,
    fit_powerlaw,
)
from .trainer import EncodedDataset, TrainConfig, train, train_phased

KINDS = (
    "capacity_size", "capacity_epochs", "direction", "correlated", "two_hop",
    "ability_mix", "frequency", "difficulty", "order", "generalization",
    "template_count",
)

# per-kind required spec fields (beyond model/train/seeds)
_REQUIRED: dict[str, list[str]] = {
    "capacity_size": ["model_grid", "epochs", "data.corpus_keys", "data.phi"],
    "capacity_epochs": ["model", "epoch_grid", "data.corpus_keys", "data.phi"],
    "direction": ["model", "epochs", "data.num_facts", "data.attribute"],
    "correlated": ["model", "epochs", "data.num_facts", "data.pair", "data.unrelated"],
    "two_hop": ["model", "epochs", "data.num_facts", "data.attribute"],
    "ability_mix": ["model", "epochs", "data.num_facts"],
    "frequency": ["model", "epochs", "data.num_facts", "data.attribute",
                  "data.other_attribute", "data.factor_grid"],
    "difficulty": ["model", "model_double", "epochs", "data.num_facts",
                   "data.easy_attribute", "data.hard_attribute"],
    "order": ["model", "epochs", "data.num_facts", "data.attribute",
              "data.other_attribute"],
    "generalization": ["model", "epochs", "data.dataset_sizes", "data.heldout_fraction"],
    "template_count": ["model", "epochs", "data.num_facts", "data.attribute",
                       "data.count_grid"],
}


@dataclass
class ExperimentSpec:
    kind: str
    seeds: list[int]
    output_dir: str
    epochs: int = 0
    model: dict | None = None
    model_double: dict | None = None
    model_grid: list[dict] | None = None
    epoch_grid: list[int] | None = None
    data: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    name: str = ""
    parallelism: int = 1
    notes: str = ""

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


def validate_spec(spec: ExperimentSpec) -> list[str]:
    errors = []
    if spec.kind not in KINDS:
        errors.append(f"unknown kind {spec.kind!r}")
        return errors
    if not spec.seeds:
        errors.append("need >= 1 seed")
    if len(set(spec.seeds)) != len(spec.seeds):
        errors.append("seeds must be distinct")
    for req in _REQUIRED[spec.kind]:
        if req.startswith("data."):
            if spec.data.get(req[5:]) is None:
                errors.append(f"missing data field {req[5:]!r}")
        elif getattr(spec, req, None) in (None, 0, []):
            errors.append(f"missing spec field {req!r}")
    if spec.kind != "capacity_size" and spec.model is None:
        errors.append("missing model")
    if "learning_rate" not in spec.train:
        errors.append("train.learning_rate is required")
    return errors


@dataclass
class ResultRecord:
    spec_hash: str
    kind: str
    group: str
    seed: int
    cell_id: str
    metrics: dict
    wall_clock: float
    status: str = "done"

    def as_row(self) -> dict:
        return {
            "spec_hash": self.spec_hash, "kind": self.kind, "group": self.group,
            "seed": self.seed, "cell_id": self.cell_id,
            "metrics": json.dumps(self.metrics, sort_keys=True),
            "wall_clock": self.wall_clock, "status": self.status,
        }

    @classmethod
    def from_row(cls, row: dict) -> "ResultRecord":
        return cls(
            spec_hash=row["spec_hash"], kind=row["kind"], group=row["group"],
            seed=int(row["seed"]), cell_id=row["cell_id"],
            metrics=json.loads(row["metrics"]), wall_clock=float(row["wall_clock"]),
            status=row["status"],
        )


def _model_cfg(d: dict) -> ModelConfig:
    if "size_id" in d:
        return reference_config(d["size_id"], **{k: v for k, v in d.items() if k != "size_id"})
    return ModelConfig(**d)


def _train_cfg(spec: ExperimentSpec, epochs: int, seed: int, **overrides) -> TrainConfig:
    kw = dict(spec.train)
    kw.update(overrides)
    kw.setdefault("batch_size", 32)
    return TrainConfig(epochs=epochs, seed=seed, **kw)


def _schema(spec: ExperimentSpec) -> tuple[factgen.AttributeSpec, ...]:
    style = spec.data.get("schema_style", "compact")
    schema = factgen.default_schema(style)
    attrs = spec.data.get("attributes")
    return factgen.schema_subset(schema, attrs) if attrs else schema


def _facts_for_keys(corpus: factgen.FactDataset, keys: list[str],
                    attribute: str) -> factgen.FactDataset:
    keep = set(keys)
    triples = tuple(t for t in corpus.triples if t.key in keep and t.attribute == attribute)
    return factgen.FactDataset(triples=triples, schema=corpus.schema, split=corpus.split,
                               seed=corpus.seed)


def _mr_metrics(state, data: EncodedDataset) -> dict:
    rep = memorization_rate(state, data)
    return {"mr": rep.overall_mr, "per_attribute": rep.per_attribute_mr}


# --------------------------------------------------------------------------
# cell builders, one per kind; each returns [(group, cell_fn(seed) -> metrics)]

def _cells_capacity_size(spec: ExperimentSpec):
    cells = []
    for mdl in spec.model_grid:
        cfg = _model_cfg(mdl)
        non_embed = count_params(cfg)[1]
        group = mdl.get("label", f"N={non_embed}")

        def fn(seed, cfg=cfg):
            corpus = factgen.synth_corpus(_schema(spec), spec.data["corpus_keys"], seed=seed)
            point = find_capacity(
                cfg, spec.epochs, spec.data["phi"], corpus,
                search_budget=spec.data.get("search_budget", 10),
                train_cfg=_train_cfg(spec, spec.epochs, seed), seed=seed,
                initial_guess=spec.data.get("initial_guess"),
            )
            return point.as_row()

        cells.append((group, fn))
    return cells


def _cells_capacity_epochs(spec: ExperimentSpec):
    cfg = _model_cfg(spec.model)
    mode = spec.data.get("mode", "band")
    cells = []
    if mode == "first_epoch":
        def fn(seed):
            corpus = factgen.synth_corpus(_schema(spec), spec.data["corpus_keys"], seed=seed)
            points = capacity_by_first_epoch(
                cfg, spec.data["dataset_sizes"], max(spec.epoch_grid), spec.data["phi"],
                corpus, _train_cfg(spec, max(spec.epoch_grid), seed), seed=seed,
                eval_every=spec.data.get("eval_every", 10),
            )
            return {"points": [p.as_row() for p in points]}
        cells.append(("first_epoch_sweep", fn))
        return cells
    for epochs in spec.epoch_grid:
        def fn(seed, epochs=epochs):
            corpus = factgen.synth_corpus(_schema(spec), spec.data["corpus_keys"], seed=seed)
            point = find_capacity(
                cfg, epochs, spec.data["phi"], corpus,
                search_budget=spec.data.get("search_budget", 10),
                train_cfg=_train_cfg(spec, epochs, seed), seed=seed,
                initial_guess=spec.data.get("initial_guess"),
            )
            return point.as_row()
        cells.append((f"E={epochs}", fn))
    return cells


def _direction_datasets(spec: ExperimentSpec, seed: int):
    attr = spec.data["attribute"]
    n = spec.data["num_facts"]
    corpus = factgen.synth_corpus(_schema(spec), 2 * n, seed=seed)
    keys = corpus.keys()
    k1, k2 = keys[:n], keys[n:2 * n]
    fwd1 = _facts_for_keys(corpus, k1, attr)
    fwd2 = _facts_for_keys(corpus, k2, attr)
    rev1 = factgen.derive_reverse(fwd1, attr)
    rev2 = factgen.derive_reverse(fwd2, attr)
    return fwd1, rev1, rev2


def _cells_direction(spec: ExperimentSpec):
    def run(seed, build):
        fwd1, rev1, rev2 = _direction_datasets(spec, seed)
        data, eval_sets = build(fwd1, rev1, rev2)
        cfg = _model_cfg(spec.model)
        state = init_model(cfg, seed=seed)
        train(state, data, _train_cfg(spec, spec.epochs, seed))
        out = {}
        for name, ds in eval_sets.items():
            out[name] = memorization_rate(state, ds).overall_mr
        out["mr"] = memorization_rate(state, data).overall_mr
        return out

    def enc(ds, label=""):
        return EncodedDataset.from_facts(ds, label=label)

    return [
        ("forward_solo", lambda seed: run(seed, lambda f1, r1, r2: (
            enc(f1), {"forward": enc(f1)}))),
        ("reverse_solo", lambda seed: run(seed, lambda f1, r1, r2: (
            enc(r1), {"reverse": enc(r1)}))),
        ("redundant", lambda seed: run(seed, lambda f1, r1, r2: (
            enc(f1).merged_with(enc(r1)), {"forward": enc(f1), "reverse": enc(r1)}))),
        ("non_redundant", lambda seed: run(seed, lambda f1, r1, r2: (
            enc(f1).merged_with(enc(r2)), {"forward": enc(f1), "reverse": enc(r2)}))),
    ]


def _cells_correlated(spec: ExperimentSpec):
    pair = tuple(spec.data["pair"])
    unrelated = tuple(spec.data["unrelated"])
    n = spec.data["num_facts"]

    def datasets(seed):
        corpus = factgen.synth_corpus(_schema(spec), 2 * n, seed=seed)
        keys = corpus.keys()
        return corpus, keys[:n], keys[n:2 * n]

    def run(seed, mix):
        corpus, k1, k2 = datasets(seed)
        parts = [_facts_for_keys(corpus, k1 if same else k2, attr) for attr, same in mix]
        data = EncodedDataset.from_facts(factgen.merge(parts))
        cfg = _model_cfg(spec.model)
        state = init_model(cfg, seed=seed)
        train(state, data, _train_cfg(spec, spec.epochs, seed))
        probe = EncodedDataset.from_facts(parts[0])  # first mix entry is the probed attribute
        rep = memorization_rate(state, data)
        return {"mr": memorization_rate(state, probe).overall_mr,
                "mix_mr": rep.overall_mr, "per_attribute": rep.per_attribute_mr}

    a, b = pair
    _, c = unrelated if unrelated[0] == a else (unrelated[1], unrelated[0]) if unrelated[1] == a else unrelated
    return [
        ("solo", lambda seed: run(seed, [(a, True)])),
        ("joint_correlated", lambda seed: run(seed, [(a, True), (b, True)])),
        ("split_correlated", lambda seed: run(seed, [(a, True), (b, False)])),
        ("joint_unrelated", lambda seed: run(seed, [(a, True), (c, True)])),
        ("split_unrelated", lambda seed: run(seed, [(a, True), (c, False)])),
    ]


def _cells_two_hop(spec: ExperimentSpec):
    attr = spec.data["attribute"]
    n = spec.data["num_facts"]

    def datasets(seed):
        corpus = factgen.synth_corpus(_schema(spec), 2 * n, seed=seed)
        keys = corpus.keys()
        one1 = _facts_for_keys(corpus, keys[:n], attr)
        one2 = _facts_for_keys(corpus, keys[n:2 * n], attr)
        two1 = factgen.derive_two_hop(one1, attr, num_pairs=n, seed=seed + 1)
        two2 = factgen.derive_two_hop(one2, attr, num_pairs=n, seed=seed + 2)
        return one1, two1, two2

    def run(seed, build):
        one1, two1, two2 = datasets(seed)
        data, evals = build(one1, two1, two2)
        cfg = _model_cfg(spec.model)
        state = init_model(cfg, seed=seed)
        train(state, data, _train_cfg(spec, spec.epochs, seed))
        out = {name: memorization_rate(state, ds).overall_mr for name, ds in evals.items()}
        out["mr"] = memorization_rate(state, data).overall_mr
        return out

    def enc(ds):
        return EncodedDataset.from_facts(ds)

    return [
        ("single_solo", lambda seed: run(seed, lambda o1, t1, t2: (enc(o1), {"one_hop": enc(o1)}))),
        ("twohop_solo", lambda seed: run(seed, lambda o1, t1, t2: (enc(t1), {"two_hop": enc(t1)}))),
        ("redundant", lambda seed: run(seed, lambda o1, t1, t2: (
            enc(o1).merged_with(enc(t1)), {"one_hop": enc(o1), "two_hop": enc(t1)}))),
        ("non_redundant", lambda seed: run(seed, lambda o1, t1, t2: (
            enc(o1).merged_with(enc(t2)), {"one_hop": enc(o1), "two_hop": enc(t2)}))),
    ]


def _cells_ability_mix(spec: ExperimentSpec):
    n = spec.data["num_facts"]
    n_test = spec.data.get("num_task_test", max(30, n // 10))
    attr = spec.data.get("attribute")

    def datasets(seed):
        corpus = factgen.synth_corpus(_schema(spec), n, seed=seed)
        facts = corpus if attr is None else corpus.restrict([attr])
        per_key = max(1, len(facts) // max(1, len(facts.keys())))
        facts = factgen.sample_facts(facts, max(1, n // per_key), seed=seed)
        task_train, task_test = abilities.make_classification_task(len(facts), n_test, seed)
        return EncodedDataset.from_facts(facts), task_train, task_test

    def run(seed, mode):
        facts, task_train, task_test = datasets(seed)
        task = EncodedDataset.from_pairs(task_train, attribute="classification")
        data = {"facts_solo": facts, "task_solo": task,
                "mixed": facts.merged_with(task)}[mode]
        cfg = _model_cfg(spec.model)
        state = init_model(cfg, seed=seed)
        train(state, data, _train_cfg(spec, spec.epochs, seed))
        out = {"mr": float("nan"), "task_accuracy": float("nan")}
        if mode != "task_solo":
            out["mr"] = memorization_rate(state, facts).overall_mr
        if mode != "facts_solo":
            out["task_accuracy"] = abilities.accuracy(state, task_test)
        return out

    return [(mode, lambda seed, mode=mode: run(seed, mode))
            for mode in ("facts_solo", "task_solo", "mixed")]


def _cells_frequency(spec: ExperimentSpec):
    attr_a = spec.data["attribute"]
    attr_b = spec.data["other_attribute"]
    n = spec.data["num_facts"]
    cells = []
    for factor in spec.data["factor_grid"]:
        def fn(seed, factor=factor):
            corpus = factgen.synth_corpus(_schema(spec), n, seed=seed)
            both = corpus.restrict([attr_a, attr_b])
            weighted = factgen.upsample(both, {attr_a: factor})
            data = EncodedDataset.from_facts(weighted)
            cfg = _model_cfg(spec.model)
            state = init_model(cfg, seed=seed)
            train(state, data, _train_cfg(spec, spec.epochs, seed))
            rep = memorization_rate(state, EncodedDataset.from_facts(both))
            return {"factor": factor, "mr": rep.overall_mr,
                    "mr_upsampled": rep.per_attribute_mr[attr_a],
                    "mr_other": rep.per_attribute_mr[attr_b]}
        cells.append((f"x{factor}", fn))
    return cells


def _cells_difficulty(spec: ExperimentSpec):
    easy, hard = spec.data["easy_attribute"], spec.data["hard_attribute"]
    n = spec.data["num_facts"]

    def datasets(seed):
        corpus = factgen.synth_corpus(_schema(spec), n, seed=seed)
        return corpus.restrict([easy]), corpus.restrict([hard])

    def run(seed, mode):
        de, dh = datasets(seed)
        if mode == "joint_2N":
            cfg = _model_cfg(spec.model_double)
            data = EncodedDataset.from_facts(factgen.merge([de, dh]))
        else:
            cfg = _model_cfg(spec.model)
            data = EncodedDataset.from_facts(de if mode == "solo_N_easy" else dh)
        state = init_model(cfg, seed=seed)
        train(state, data, _train_cfg(spec, spec.epochs, seed))
        rep = memorization_rate(state, data)
        return {"mr": rep.overall_mr, "per_attribute": rep.per_attribute_mr}

    return [(mode, lambda seed, mode=mode: run(seed, mode))
            for mode in ("joint_2N", "solo_N_easy", "solo_N_hard")]


def _cells_order(spec: ExperimentSpec):
    attr_a = spec.data["attribute"]
    attr_b = spec.data["other_attribute"]
    n = spec.data["num_facts"]

    def datasets(seed):
        corpus = factgen.synth_corpus(_schema(spec), 2 * n, seed=seed)
        keys = corpus.keys()
        da = _facts_for_keys(corpus, keys[:n], attr_a)
        db = _facts_for_keys(corpus, keys[n:2 * n], attr_b)
        return EncodedDataset.from_facts(da, label="A"), EncodedDataset.from_facts(db, label="B")

    def run(seed, mode):
        da, db = datasets(seed)
        cfg = _model_cfg(spec.model)
        state = init_model(cfg, seed=seed)
        tcfg = _train_cfg(spec, spec.epochs, seed)
        if mode in ("solo_a", "solo_b"):
            data = da if mode == "solo_a" else db
            train(state, data, tcfg)
            rep = {"A": memorization_rate(state, da).overall_mr if mode == "solo_a" else float("nan"),
                   "B": memorization_rate(state, db).overall_mr if mode == "solo_b" else float("nan")}
            boundaries = []
        else:
            phases = [(da, tcfg), (db, tcfg)] if mode == "a_then_b" else [(db, tcfg), (da, tcfg)]
            report = train_phased(state, phases)
            rep = {"A": memorization_rate(state, da).overall_mr,
                   "B": memorization_rate(state, db).overall_mr}
            order = ("A", "B") if mode == "a_then_b" else ("B", "A")
            boundaries = [dict(zip(order, snap)) for snap in report.phase_snapshots]
        return {"mr_a": rep["A"], "mr_b": rep["B"], "phase_mr": boundaries}

    return [(mode, lambda seed, mode=mode: run(seed, mode))
            for mode in ("solo_a", "solo_b", "a_then_b", "b_then_a")]


def _cells_generalization(spec: ExperimentSpec):
    fraction = spec.data["heldout_fraction"]
    cells = []
    for size in spec.data["dataset_sizes"]:
        def fn(seed, size=size):
            schema = _schema(spec)
            per_key = len(schema)
            total_keys = int(round(size / per_key / (1 - fraction))) + 1
            corpus = factgen.synth_corpus(schema, total_keys, seed=seed)
            tr, held = factgen.split_heldout(corpus, fraction, seed=seed)
            tr = factgen.sample_facts(tr, min(len(tr.keys()), max(1, round(size / per_key))), seed=seed)
            data = EncodedDataset.from_facts(tr)
            cfg = _model_cfg(spec.model)
            state = init_model(cfg, seed=seed)
            train(state, data, _train_cfg(spec, spec.epochs, seed))
            rep = generalization_eval(state, held, train_keys=tr)
            return {"dataset_size": len(data), "heldout_loss": rep.mean_heldout_loss,
                    "heldout_accuracy": rep.overall_mr,
                    "per_attribute": rep.per_attribute_mr,
                    "train_mr": memorization_rate(state, data).overall_mr}
        cells.append((f"D={size}", fn))
    return cells


def _cells_template_count(spec: ExperimentSpec):
    attr = spec.data["attribute"]
    n = spec.data["num_facts"]
    cells = []
    for count in spec.data["count_grid"]:
        def fn(seed, count=count):
            schema = _schema(spec)
            schema = tuple(
                factgen.make_template_variants(a, count) if a.id == attr else a
                for a in schema
            )
            corpus = factgen.synth_corpus(schema, n, seed=seed)
            facts = corpus.restrict([attr])
            data = EncodedDataset.from_facts(facts, template_mode=spec.data.get("assignment", "hash"))
            cfg = _model_cfg(spec.model)
            state = init_model(cfg, seed=seed)
            train(state, data, _train_cfg(spec, spec.epochs, seed))
            return {"templates": count, "mr": memorization_rate(state, data).overall_mr}
        cells.append((f"T={count}", fn))
    return cells


_BUILDERS = {
    "capacity_size": _cells_capacity_size,
    "capacity_epochs": _cells_capacity_epochs,
    "direction": _cells_direction,
    "correlated": _cells_correlated,
    "two_hop": _cells_two_hop,
    "ability_mix": _cells_ability_mix,
    "frequency": _cells_frequency,
    "difficulty": _cells_difficulty,
    "order": _cells_order,
    "generalization": _cells_generalization,
    "template_count": _cells_template_count,
}


# --------------------------------------------------------------------------
# runner with manifest + resume

def _code_version() -> str:
    pkg = Path(__file__).parent
    digest = hashlib.sha256()
    for f in sorted(pkg.glob("*.py")):
        digest.update(f.read_bytes())
    return digest.hexdigest()[:12]


def run_experiment(spec: ExperimentSpec, resume: bool = False) -> list[ResultRecord]:
    """Run all (group x seed) cells; failures are recorded and skipped over."""
    errors = validate_spec(spec)
    if errors:
        raise ConfigurationError("; ".join(errors))
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    records_path = out_dir / "records.csv"

    manifest = {
        "spec": asdict(spec), "spec_hash": spec.spec_hash(),
        "code_version": _code_version(), "cells": {},
        "scale_notes": {"epochs": spec.epochs or spec.epoch_grid,
                        "note": "desk-scale budgets; saturation runs scaled down"},
    }
    done_records: list[ResultRecord] = []
    if resume and manifest_path.exists():
        previous = json.loads(manifest_path.read_text())
        if previous.get("spec_hash") == spec.spec_hash():
            manifest["cells"] = {
                cid: info for cid, info in previous.get("cells", {}).items()
                if info.get("status") == "done"
            }
            if records_path.exists():
                from .reporting import read_records_csv
                done_records = [r for r in read_records_csv(records_path)
                                if r.cell_id in manifest["cells"]]

    lock = Lock()

    def flush():
        with lock:
            manifest_path.write_text(json.dumps(manifest, indent=2))

    cells = _BUILDERS[spec.kind](spec)
    jobs = []
    for group, fn in cells:
        for seed in spec.seeds:
            cell_id = f"{group}/seed{seed}"
            if cell_id in manifest["cells"]:
                continue
            jobs.append((cell_id, group, seed, fn))

    records: list[ResultRecord] = list(done_records)

    def execute(job):
        cell_id, group, seed, fn = job
        t0 = time.perf_counter()
        try:
            metrics = fn(seed)
            rec = ResultRecord(
                spec_hash=spec.spec_hash(), kind=spec.kind, group=group, seed=seed,
                cell_id=cell_id, metrics=metrics, wall_clock=time.perf_counter() - t0,
            )
        except FactlabError as exc:
            rec = ResultRecord(
                spec_hash=spec.spec_hash(), kind=spec.kind, group=group, seed=seed,
                cell_id=cell_id, metrics={"error": str(exc)},
                wall_clock=time.perf_counter() - t0, status="failed",
            )
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            rec = ResultRecord(
                spec_hash=spec.spec_hash(), kind=spec.kind, group=group, seed=seed,
                cell_id=cell_id,
                metrics={"error": f"{exc}", "traceback": traceback.format_exc()[-2000:]},
                wall_clock=time.perf_counter() - t0, status="failed",
            )
        with lock:
            manifest["cells"][rec.cell_id] = {
                "status": rec.status, "wall_clock": rec.wall_clock,
            }
            records.append(rec)
        flush()
        return rec

    if spec.parallelism > 1:
        with ThreadPoolExecutor(max_workers=spec.parallelism) as pool:
            list(pool.map(execute, jobs))
    else:
        for job in jobs:
            execute(job)

    from .reporting import write_records_csv
    records.sort(key=lambda r: r.cell_id)
    write_records_csv(records, records_path)
    flush()
    return records


# --------------------------------------------------------------------------
# group comparison

@dataclass
class ComparisonTable:
    rows: dict[str, dict]          # group -> {mean, spread, n}
    deltas: dict[str, float]       # "a-b" -> mean difference
    predicates: dict[str, bool]

    def text(self) -> str:
        lines = [f"{'group':24s} {'mean':>8s} {'spread':>8s} {'n':>3s}"]
        for g, r in self.rows.items():
            lines.append(f"{g:24s} {r['mean']:8.3f} {r['spread']:8.3f} {r['n']:3d}")
        for name, value in self.predicates.items():
            lines.append(f"predicate {name}: {'PASS' if value else 'FAIL'}")
        return "\n".join(lines)


def compare_groups(records: list[ResultRecord], metric: str = "mr",
                   kind: str | None = None, tolerance: float = 0.05) -> ComparisonTable:
    """Per-group mean and seed spread plus the protocol's qualitative predicates."""
    groups: dict[str, list[float]] = {}
    for r in records:
        if r.status != "done":
            continue
        value = r.metrics.get(metric)
        if value is None or (isinstance(value, float) and np.isnan(value)):
            continue
        groups.setdefault(r.group, []).append(float(value))
    if len(groups) < 2:
        raise ConfigurationError("need >= 2 groups with scored cells")
    rows = {
        g: {"mean": float(np.mean(vs)), "spread": float(np.max(vs) - np.min(vs)), "n": len(vs)}
        for g, vs in groups.items()
    }
    deltas = {}
    names = list(rows)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            deltas[f"{a}-{b}"] = rows[a]["mean"] - rows[b]["mean"]

    predicates: dict[str, bool] = {}
    kind = kind or (records[0].kind if records else None)
    if kind == "direction" and {"redundant", "non_redundant", "forward_solo"} <= rows.keys():
        red, nred = rows["redundant"]["mean"], rows["non_redundant"]["mean"]
        solo = rows["forward_solo"]["mean"]
        predicates["redundant_similar_to_non_redundant"] = abs(red - nred) <= tolerance
        predicates["mixing_hurts"] = max(red, nred) <= solo - 2 * tolerance
    if kind == "correlated" and {"solo", "joint_correlated", "joint_unrelated"} <= rows.keys():
        predicates["correlated_helps"] = rows["joint_correlated"]["mean"] > rows["solo"]["mean"]
        predicates["unrelated_hurts"] = rows["joint_unrelated"]["mean"] < rows["solo"]["mean"]
    if kind == "two_hop" and {"redundant", "non_redundant", "single_solo"} <= rows.keys():
        predicates["redundant_similar_to_non_redundant"] = (
            abs(rows["redundant"]["mean"] - rows["non_redundant"]["mean"]) <= tolerance
        )
    return ComparisonTable(rows=rows, deltas=deltas, predicates=predicates)


# --------------------------------------------------------------------------
# law fitting over records

def fit_capacity_records(records: list[ResultRecord], law: str):
    """Seed-averaged law fit over capacity records."""
    pts: dict[float, list[float]] = {}
    for r in records:
        if r.status != "done" or "effective_capacity" not in r.metrics:
            continue
        x = float(r.metrics["non_embed" if law == "linear" else "epochs"])
        pts.setdefault(x, []).append(float(r.metrics["effective_capacity"]))
    data = [(x, float(np.mean(v))) for x, v in sorted(pts.items())]
    return fit_linear(data) if law == "linear" else fit_negexp(data)


def fit_generalization_records(records: list[ResultRecord]):
    pts: dict[float, list[float]] = {}
    for r in records:
        if r.status != "done" or "heldout_loss" not in r.metrics:
            continue
        pts.setdefault(float(r.metrics["dataset_size"]), []).append(float(r.metrics["heldout_loss"]))
    data = [(x, float(np.mean(v))) for x, v in sorted(pts.items())]
    return fit_powerlaw(data)
