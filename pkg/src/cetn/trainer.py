"""Adam training loop with validation-driven learning-rate decay and early stopping."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import losses
from .config import ExperimentConfig
from .data import ConfigurationError, EncodedDataset, PreparedData, batches
from .metrics import Metrics, auc, logloss
from .model import CETN, NumericError

log = logging.getLogger(__name__)

EPOCH_COLUMNS = [
    "epoch", "train_total", "train_ctr", "train_cl", "train_cos1", "train_cos2",
    "val_auc", "val_logloss", "lr", "seconds",
]
STEP_COLUMNS = [
    "epoch", "step", "batch_size", "total", "ctr", "cl", "cos1", "cos2",
    "cl_term", "cos1_term", "cos2_term", "lr",
]


class AdamState:
    """Adam with bias correction.

    Names listed in ``sparse`` are embedding tables: only rows touched by
    the current batch have their moments and values updated.
    """

    def __init__(self, params: Dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, sparse=("embedding",)):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.sparse = set(sparse)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float, touched: Optional[Dict[str, np.ndarray]] = None):
        touched = touched or {}
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, g in grads.items():
            p, m, v = params[name], self.m[name], self.v[name]
            if name in self.sparse and name in touched:
                rows = touched[name]
                g = g[rows]
                m[rows] = b1 * m[rows] + (1 - b1) * g
                v[rows] = b2 * v[rows] + (1 - b2) * g * g
                p[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)
            else:
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: AdamState, lr: float, touched=None) -> None:
    state.step(params, grads, lr, touched)


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_ctr: float
    train_cl: float
    train_cos1: float
    train_cos2: float
    val_auc: float
    val_logloss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: List[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=EPOCH_COLUMNS)
            w.writeheader()
            for rec in self.epochs:
                w.writerow({k: _fmt(v) for k, v in asdict(rec).items() if k != "seconds"} | {"seconds": f"{rec.seconds:.3f}"})
        with open(out / "train_steps.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=STEP_COLUMNS)
            w.writeheader()
            for rec in self.steps:
                w.writerow({k: _fmt(rec[k]) for k in STEP_COLUMNS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


@dataclass
class TrainResult:
    model: CETN
    log: TrainLog
    val: Optional[Metrics] = None


def evaluate(model: CETN, dataset: EncodedDataset, batch_size: int = 20000) -> Metrics:
    """AUC and logloss of the noise-free graph over a full split."""
    if dataset.field_count != model.field_count or list(dataset.vocab_sizes) != model.vocab_sizes:
        raise ConfigurationError(
            f"dataset fields/vocab {dataset.vocab_sizes} do not match the model's {model.vocab_sizes}"
        )
    probs = model.predict(dataset.instances, batch_size)
    return Metrics(auc(probs, dataset.labels), logloss(probs, dataset.labels))


def train_step(model: CETN, batch, rng, cfg: ExperimentConfig, state: AdamState, lr: float) -> dict:
    tape = ad.Tape()
    logit, spaces, pv = model.forward(tape, batch.indices, rng)
    ctr = losses.logloss(ad.sigmoid(logit), batch.labels)
    if model.is_simmhn:
        weights = losses.LossWeights(0.0, 0.0, 0.0, cfg.loss.tau)
        values = (None, None, None)
    else:
        weights = cfg.loss.weights
        attr = "raw" if cfg.loss.use_pre_through_values else "V"
        values = (spaces[0].V, getattr(spaces[1], attr), getattr(spaces[2], attr))
    br = losses.total_loss(ctr, *values, weights, model.variant.ablations, cfg.loss.contrastive)
    ad.backward(tape, br.total)
    grads = {k: v.grad for k, v in pv.items()}
    touched = {}
    if cfg.train.sparse_embedding_updates:
        lookup_node = next(n for n in tape.nodes if n.op == "embedding_lookup")
        touched["embedding"] = lookup_node.touched_rows
    state.step(model.params, grads, lr, touched)
    rec = br.as_dict()
    tape.release()
    return rec


def train(cfg: ExperimentConfig, data: PreparedData, out_dir=None) -> TrainResult:
    """Fit a model on ``data.train`` with early stopping on ``data.val``.

    The returned model holds the parameters of the best validation epoch.
    """
    cfg.validate()
    tc = cfg.train
    if data.train.field_count != data.val.field_count or data.train.vocab_sizes != data.val.vocab_sizes:
        raise ConfigurationError("train and validation splits were encoded with different vocabularies")
    if len(data.train) == 0 or len(data.val) == 0:
        raise ConfigurationError("empty train or validation split")

    model = CETN(cfg.model, data.train.vocab_sizes)
    model.init_params(tc.seed)
    state = AdamState(model.params, sparse=("embedding",) if tc.sparse_embedding_updates else ())
    noise_rng = np.random.default_rng([tc.seed, 1])
    tlog = TrainLog()
    lr = tc.lr
    best_score, best_params, best_metrics = None, None, None
    strikes = 0

    for epoch in range(tc.max_epochs):
        start = time.perf_counter()
        sums = dict.fromkeys(("total", "ctr", "cl", "cos1", "cos2"), 0.0)
        seen = 0
        for step, batch in enumerate(batches(data.train, tc.batch_size, tc.seed, epoch)):
            try:
                rec = train_step(model, batch, noise_rng, cfg, state, lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(rec["total"]):
                raise NumericError(f"epoch {epoch} step {step}: non-finite loss")
            for k in sums:
                sums[k] += rec[k] * batch.size
            seen += batch.size
            tlog.steps.append({"epoch": epoch, "step": step, "batch_size": batch.size, "lr": lr, **rec})
        val = evaluate(model, data.val, tc.eval_batch_size)
        tlog.epochs.append(
            EpochRecord(
                epoch, *(sums[k] / seen for k in ("total", "ctr", "cl", "cos1", "cos2")),
                val.auc, val.logloss, lr, time.perf_counter() - start,
            )
        )
        log.info("epoch %d: loss %.6f val auc %.6f logloss %.6f lr %g", epoch, sums["total"] / seen, val.auc, val.logloss, lr)
        score = val.auc if tc.monitor == "auc" else -val.logloss
        if best_score is None or score > best_score:
            best_score, best_metrics = score, val
            best_params = {k: v.copy() for k, v in model.params.items()}
            tlog.best_epoch = epoch
            strikes = 0
        else:
            strikes += 1
            if strikes >= tc.patience:
                tlog.stopped_early = True
                break
            lr = max(lr * tc.lr_decay, min(tc.min_lr, lr))
    if best_params is not None:
        model.params = best_params
    result = TrainResult(model, tlog, best_metrics)
    if out_dir is not None:
        write_run(result, cfg, out_dir)
    return result


def write_run(result: TrainResult, cfg: ExperimentConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    result.model.save(out / "model.ckpt", {"best_epoch": result.log.best_epoch})
    result.log.write(out)
