"""Mini-batch training with dual-signal early stopping and ablation runs.

Validation loss and validation MRR are measured on a fixed cadence; training
stops when neither has improved for `patience` consecutive measurements, and
the parameters roll back to the best-MRR snapshot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import ConfigError, EvalImpression, ExampleConfig, TrainingExample
from .data import batches
from .evaluate import EvalReport, evaluate_model
from .model import Batch, IntentModel
from .nn import no_grad
from .optim import NoamSchedule, adam_step
from .text import Vocab


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    eval_every: int | None = None  # None: min(10000, one epoch)
    patience: int = 5
    max_steps: int | None = None
    peak_lr: float = 0.001
    warmup_steps: int = 4000
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError("eval_every must be positive")


@dataclass
class TrainState:
    step: int = 0
    best_mrr: float = -math.inf
    best_loss: float = math.inf
    best_step: int = 0
    stale: int = 0  # consecutive measurements with no improvement
    seed: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)
    stopped: str = ""


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; carries the offending batch for diagnosis."""

    def __init__(self, step: int, batch: Batch):
        self.step = step
        self.batch = batch
        groups = np.unique(batch.groups).tolist()
        super().__init__(
            f"non-finite loss at step {step}; batch groups {groups}, "
            f"size {len(batch)}, popularity range "
            f"[{batch.popularity.min():.3f}, {batch.popularity.max():.3f}]"
        )


def _validation_loss(
    model: IntentModel, examples: list[TrainingExample], cfg: ExampleConfig, batch_size: int
) -> float:
    losses = []
    sizes = []
    with no_grad(model.store):
        for batch in batches(examples, cfg, batch_size, shuffle=False):
            losses.append(model.loss(batch).item())
            sizes.append(len(batch))
    return float(np.average(losses, weights=sizes))


def train(
    model: IntentModel,
    vocab: Vocab,
    counts: dict[str, int],
    train_examples: list[TrainingExample],
    valid_examples: list[TrainingExample],
    valid_impressions: list[EvalImpression],
    ex_cfg: ExampleConfig,
    cfg: TrainConfig,
) -> TrainState:
    """Optimize in place; finishes with the best-validation-MRR parameters."""
    cfg.validate()
    if not train_examples:
        raise ConfigError("no training examples")
    state = TrainState(seed=cfg.seed)
    sched = NoamSchedule(
        peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps, model_dim=model.cfg.hidden
    )
    steps_per_epoch = max(1, math.ceil(len(train_examples) / cfg.batch_size))
    eval_every = cfg.eval_every or min(10_000, steps_per_epoch)
    best_params: dict[str, np.ndarray] | None = None
    epoch = 0
    done = False
    while not done:
        for batch in batches(
            train_examples, ex_cfg, cfg.batch_size, seed=cfg.seed + epoch, shuffle=True
        ):
            model.store.zero_grads()
            loss = model.loss(batch)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(state.step, batch)
            loss.backward()
            adam_step(model.store, sched, l2=model.cfg.l2)
            state.step += 1
            if state.step % eval_every == 0:
                val_loss = (
                    _validation_loss(model, valid_examples, ex_cfg, cfg.batch_size)
                    if valid_examples
                    else float("nan")
                )
                if valid_impressions:
                    report, _ = evaluate_model(
                        model, valid_impressions, vocab, counts, ex_cfg
                    )
                    val_mrr = report.overall
                else:
                    val_mrr = float("nan")
                state.history.append((state.step, val_loss, val_mrr))
                improved = False
                if np.isfinite(val_loss) and val_loss < state.best_loss:
                    state.best_loss = val_loss
                    improved = True
                if np.isfinite(val_mrr) and val_mrr > state.best_mrr:
                    state.best_mrr = val_mrr
                    state.best_step = state.step
                    best_params = model.store.snapshot()
                    improved = True
                state.stale = 0 if improved else state.stale + 1
                if state.stale >= cfg.patience:
                    state.stopped = "early"
                    done = True
                    break
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                state.stopped = state.stopped or "max_steps"
                done = True
                break
        epoch += 1
    if best_params is not None:
        model.store.load_arrays(best_params)
    return state


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: EvalReport


def summarize_ablation(rows: list[AblationRow]) -> dict[str, dict[str, tuple[float, float]]]:
    """Per-variant mean and sd of overall plus every slice MRR."""
    out: dict[str, dict[str, tuple[float, float]]] = {}
    variants = sorted({r.variant for r in rows})
    for variant in variants:
        mine = [r.report for r in rows if r.variant == variant]
        metrics: dict[str, tuple[float, float]] = {}
        vals = np.array([r.overall for r in mine])
        metrics["overall"] = (float(vals.mean()), float(vals.std()))
        for name in mine[0].slices:
            vals = np.array([r.slices[name] for r in mine])
            metrics[name] = (float(vals.mean()), float(vals.std()))
        out[variant] = metrics
    return out


def ordering_holds(
    summary: dict[str, dict[str, tuple[float, float]]],
    better: str,
    worse: str,
    metric: str,
) -> bool:
    return summary[better][metric][0] > summary[worse][metric][0]


def format_ablation(summary: dict[str, dict[str, tuple[float, float]]]) -> str:
    metrics = ["overall", "seen", "unseen", "ie", "non-ie", "it", "non-it"]
    lines = ["variant\t" + "\t".join(metrics)]
    for variant, row in summary.items():
        cells = [f"{row[m][0]:.4f}±{row[m][1]:.4f}" for m in metrics]
        lines.append(variant + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"
