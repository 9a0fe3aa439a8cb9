"""Deterministic AdamW training loop with cosine decay and phased runs.

One epoch is one pass over the weight-expanded example stream, shuffled by a
per-epoch seeded RNG. A triple with weight w contributes w copies to the
stream, which makes integer-weight upsampling bit-identical to physically
duplicating examples.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import factgen, tokenizer
from .errors import ConfigurationError, DegenerateInputError, DivergenceError, RangeError
from .model import ModelState, forward, init_model, loss_and_grads, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int = 128  # the reference recipe uses 512; desk runs shrink it
    lr_floor: float = 0.0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float | None = None
    seed: int = 0
    eval_every: int = 0          # epochs between MR snapshots; 0 disables
    stop_at_mr: float | None = None  # early stop once a snapshot reaches this MR
    full_sequence_loss: bool = False  # ablation: score prompt tokens too
    checkpoint_every: int = 0    # epochs between checkpoints when run_dir is set

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")


@dataclass
class EncodedExample:
    tokens: np.ndarray      # BOS + prompt + target + EOS
    target_start: int       # index of the first target token
    weight: int
    attribute: str
    key: str
    gold: str
    prompt_text: str


class EncodedDataset:
    """Rendered, tokenized examples ready for batching and snapshot evaluation."""

    def __init__(self, examples: list[EncodedExample], label: str = ""):
        if not examples:
            raise DegenerateInputError("no examples to encode")
        self.examples = examples
        self.label = label

    @classmethod
    def from_facts(cls, dataset: factgen.FactDataset, template_mode: str = "hash",
                   epoch: int = 0, label: str = "") -> "EncodedDataset":
        specs = {a.id: a for a in dataset.schema}
        out = []
        for t in dataset.triples:
            spec = specs[t.attribute]
            idx = factgen.template_index_for(t, spec, mode=template_mode, epoch=epoch)
            r = factgen.render(t, spec, idx)
            out.append(_encode_pair(r.prompt_text, r.target_text, t.weight, t.attribute, t.key))
        return cls(out, label=label or dataset.split)

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]], weights: list[int] | None = None,
                   attribute: str = "task", label: str = "") -> "EncodedDataset":
        weights = weights or [1] * len(pairs)
        out = [
            _encode_pair(p, t, w, attribute, p)
            for (p, t), w in zip(pairs, weights)
        ]
        return cls(out, label=label)

    def __len__(self) -> int:
        return len(self.examples)

    def total_weight(self) -> int:
        return sum(e.weight for e in self.examples)

    def expanded_indices(self) -> np.ndarray:
        reps = np.array([e.weight for e in self.examples], dtype=np.int64)
        return np.repeat(np.arange(len(self.examples), dtype=np.int64), reps)

    def merged_with(self, other: "EncodedDataset", label: str = "") -> "EncodedDataset":
        return EncodedDataset(self.examples + other.examples, label=label or self.label)

    def max_target_len(self) -> int:
        return max(len(e.tokens) - e.target_start for e in self.examples)


def _encode_pair(prompt: str, target: str, weight: int, attribute: str, key: str) -> EncodedExample:
    p = tokenizer.encode(prompt)
    t = tokenizer.encode(target)
    toks = np.array([tokenizer.BOS] + p + t + [tokenizer.EOS], dtype=np.int32)
    return EncodedExample(
        tokens=toks,
        target_start=1 + len(p),
        weight=weight,
        attribute=attribute,
        key=key,
        gold=target,
        prompt_text=prompt,
    )


def epoch_stream(data: EncodedDataset, seed: int, epoch: int) -> np.ndarray:
    """Example indices for one epoch: weight-expanded, then seeded shuffle."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE60C, epoch]))
    stream = data.expanded_indices()
    rng.shuffle(stream)
    return stream


def make_batch(examples: list[EncodedExample], full_sequence_loss: bool = False):
    """Right-padded token matrix and target mask for a list of examples."""
    B = len(examples)
    T = max(len(e.tokens) for e in examples)
    tokens = np.full((B, T), tokenizer.PAD, dtype=np.int32)
    mask = np.zeros((B, T), dtype=bool)
    for i, e in enumerate(examples):
        L = len(e.tokens)
        tokens[i, :L] = e.tokens
        start = 1 if full_sequence_loss else e.target_start
        mask[i, start:L] = True
    return tokens, mask


def cosine_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Step 0 is the full rate; the final step is the floor; optional linear warmup."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    lo, hi = cfg.lr_floor, cfg.learning_rate
    span = total_steps - 1 - cfg.warmup_steps
    if span <= 0:
        return hi
    progress = (step - cfg.warmup_steps) / span
    return lo + (hi - lo) * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Decoupled weight decay; decay applies to matrices, not gains or biases."""

    def __init__(self, state: ModelState, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in state.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in state.params.items()}

    def update(self, state: ModelState, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        if c.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
            if total > c.clip_norm:
                scale = c.clip_norm / (total + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        for name in sorted(state.params):
            g = grads[name]
            p = state.params[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * np.square(g)
            step = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay and p.ndim >= 2:
                step = step + c.weight_decay * p
            p -= np.asarray(lr, dtype=p.dtype) * step.astype(p.dtype)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"adam_t": np.array([self.t], dtype=np.int64)}
        for k, arr in self.m.items():
            out["m." + k] = arr
        for k, arr in self.v.items():
            out["v." + k] = arr
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["adam_t"][0])
        for k in self.m:
            self.m[k] = tensors["m." + k].copy()
            self.v[k] = tensors["v." + k].copy()


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    mr_snapshots: list[tuple[int, float]] = field(default_factory=list)
    phase_snapshots: list[list[float]] = field(default_factory=list)
    effective_examples_per_epoch: int = 0
    steps: int = 0
    wall_clock: float = 0.0
    stopped_early_at: int | None = None

    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan


def steps_per_epoch(data: EncodedDataset, batch_size: int) -> int:
    return math.ceil(data.total_weight() / batch_size)


def train(
    state: ModelState,
    data: EncodedDataset,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    eval_data: EncodedDataset | None = None,
    resume: bool = False,
) -> TrainReport:
    """Train in place; deterministic for a fixed (seed, thread count)."""
    t0 = time.perf_counter()
    per_epoch = steps_per_epoch(data, cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    report = TrainReport(effective_examples_per_epoch=data.total_weight())
    opt = AdamW(state, cfg)
    start_epoch = 0

    rd = Path(run_dir) if run_dir is not None else None
    if rd is not None:
        rd.mkdir(parents=True, exist_ok=True)
        (rd / "checkpoints").mkdir(exist_ok=True)
        (rd / "config.json").write_text(json.dumps(
            {"train": asdict(cfg), "model": asdict(state.config)}, indent=2))
        if resume:
            start_epoch = _load_latest(rd, state, opt)

    metrics_rows: list[dict] = []
    step = start_epoch * per_epoch
    snapshot_target = eval_data if eval_data is not None else data

    for epoch in range(start_epoch, cfg.epochs):
        stream = epoch_stream(data, cfg.seed, epoch)
        loss_sum, tok_sum = 0.0, 0
        for b0 in range(0, len(stream), cfg.batch_size):
            batch_idx = stream[b0:b0 + cfg.batch_size]
            examples = [data.examples[i] for i in batch_idx]
            tokens, mask = make_batch(examples, cfg.full_sequence_loss)
            lr = cosine_lr(cfg, step, total_steps)
            loss, grads = loss_and_grads(state, tokens, mask)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}",
                    snapshot={"epoch": epoch, "step": step, "lr": lr,
                              "recent_losses": report.epoch_losses[-5:]},
                )
            opt.update(state, grads, lr)
            n = int(mask.sum())
            loss_sum += loss * n
            tok_sum += n
            step += 1
        epoch_loss = loss_sum / max(tok_sum, 1)
        report.epoch_losses.append(epoch_loss)
        report.lr_trace.append(cosine_lr(cfg, step - 1, total_steps))

        mr = None
        last = epoch == cfg.epochs - 1
        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
            from .evaluator import memorization_rate
            mr = memorization_rate(state, snapshot_target).overall_mr
            report.mr_snapshots.append((epoch + 1, mr))
        metrics_rows.append({"epoch": epoch + 1, "loss": epoch_loss,
                             "lr": report.lr_trace[-1], "mr": "" if mr is None else mr})
        if rd is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save_epoch(rd, state, opt, epoch + 1)
        if cfg.stop_at_mr is not None and mr is not None and mr >= cfg.stop_at_mr:
            report.stopped_early_at = epoch + 1
            break

    report.steps = step
    report.wall_clock = time.perf_counter() - t0
    if rd is not None:
        _write_metrics(rd / "metrics.csv", metrics_rows, resume=resume and start_epoch > 0)
        _save_epoch(rd, state, opt, len(report.epoch_losses) + start_epoch, final=True)
    return report


def _save_epoch(rd: Path, state: ModelState, opt: AdamW, epoch: int, final: bool = False) -> None:
    name = "final.ckpt" if final else f"epoch_{epoch:05d}.ckpt"
    save_checkpoint(state, rd / "checkpoints" / name, extra_tensors=opt.tensors(),
                    meta={"epoch": epoch})


def _load_latest(rd: Path, state: ModelState, opt: AdamW) -> int:
    ckpts = sorted((rd / "checkpoints").glob("epoch_*.ckpt"))
    if not ckpts:
        return 0
    loaded, extra, meta = load_checkpoint(ckpts[-1])
    state.params = loaded.params
    opt.load_tensors(extra)
    return int(meta.get("epoch", 0))


def _write_metrics(path: Path, rows: list[dict], resume: bool = False) -> None:
    mode = "a" if resume and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr", "mr"])
        if mode == "w":
            w.writeheader()
        w.writerows(rows)


def train_phased(
    state: ModelState,
    phases: list[tuple[EncodedDataset, TrainConfig]],
    run_dir: str | Path | None = None,
) -> TrainReport:
    """Sequential phases over one model; records every phase's MR after each boundary."""
    if not phases:
        raise ConfigurationError("need >= 1 phase")
    from .evaluator import memorization_rate

    combined = TrainReport()
    for i, (data, cfg) in enumerate(phases):
        sub_dir = None if run_dir is None else Path(run_dir) / f"phase_{i}"
        rep = train(state, data, cfg, run_dir=sub_dir)
        combined.epoch_losses.extend(rep.epoch_losses)
        combined.lr_trace.extend(rep.lr_trace)
        combined.steps += rep.steps
        combined.wall_clock += rep.wall_clock
        combined.effective_examples_per_epoch = rep.effective_examples_per_epoch
        boundary = [memorization_rate(state, d).overall_mr for d, _ in phases]
        combined.phase_snapshots.append(boundary)
    return combined


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: dict[str, float]
    worst_group: str


def grad_check(config, batch=None, coords_per_group: int = 4, seed: int = 0,
               step: float = 1e-5) -> GradCheckResult:
    """Central finite differences vs analytic gradients, at 64-bit precision.

    Samples coordinates from every parameter group; the difference step is
    scaled by the parameter's magnitude. Relative error uses a 1e-6 floor so
    that FD cancellation noise on near-zero gradients does not register.
    """
    state = init_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C4D]))
    if batch is None:
        B, T = 2, 12
        tokens = rng.integers(0, config.vocab, size=(B, T))
        mask = np.zeros((B, T), dtype=bool)
        mask[:, T // 2:] = True
    else:
        tokens, mask = batch

    _, grads = loss_and_grads(state, tokens, mask)
    per_group: dict[str, float] = {}
    for group, names in state.param_groups().items():
        worst = 0.0
        for name in names:
            p = state.params[name]
            for _ in range(coords_per_group):
                idx = int(rng.integers(p.size))
                old = p.flat[idx]
                h = step * max(1.0, abs(old))
                p.flat[idx] = old + h
                lp, _ = loss_and_grads(state, tokens, mask)
                p.flat[idx] = old - h
                lm, _ = loss_and_grads(state, tokens, mask)
                p.flat[idx] = old
                g_num = (lp - lm) / (2 * h)
                g_ana = grads[name].flat[idx]
                rel = abs(g_ana - g_num) / max(abs(g_ana), abs(g_num), 1e-6)
                worst = max(worst, rel)
        per_group[group] = worst
    worst_group = max(per_group, key=per_group.get)
    return GradCheckResult(per_group[worst_group], per_group, worst_group)


def sweep_lr(
    config,
    data: EncodedDataset,
    learning_rates: list[float],
    epochs: int,
    seed: int = 0,
    batch_size: int = 128,
) -> list[tuple[float, float, float]]:
    """Grid sweep: (lr, final loss, final MR) per candidate, fresh model each."""
    from .evaluator import memorization_rate

    out = []
    for lr in learning_rates:
        state = init_model(config, seed=seed)
        cfg = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch_size, seed=seed)
        try:
            rep = train(state, data, cfg)
            mr = memorization_rate(state, data).overall_mr
            out.append((lr, rep.final_loss(), mr))
        except DivergenceError:
            out.append((lr, math.inf, 0.0))
    return out
