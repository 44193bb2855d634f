"""Decompose-then-train fine-tuning with baselines and (rank, scale) sweeps."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from fact import checkpoint as ck
from fact import kernels
from fact import tensor as T
from fact import vit
from fact.data import Split

log = logging.getLogger(__name__)

FACTOR_MODES = {"fact-tt": "tt", "fact-tk": "tk", "fact-mb": "mb"}
MODES = tuple(FACTOR_MODES) + ("linear", "full")
SMALL_DATASET = 640


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    mode: str = "fact-tt"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    schedule: str = "cosine"
    rank: int = 4
    scale_s: float = 1.0
    strategy: str = "all"
    rank_candidates: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    s_candidates: list = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0, 100.0])
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule != "cosine":
            raise ValueError(f"only the cosine schedule is supported, got {self.schedule!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("need lr > 0, batch_size >= 1 and epochs >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} outside [0, {self.epochs}]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @property
    def fmt(self):
        return FACTOR_MODES.get(self.mode)


@dataclass
class TrainReport:
    mode: str
    epochs: list
    final_val_acc: float
    test_acc: float | None
    trainable_param_count: int
    factor_param_count: int
    head_param_count: int
    wall_time: float
    batch_size: int
    steps: int
    selected: tuple | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    report: TrainReport
    model: vit.VisionTransformer
    partition: vit.StagePartition | None
    checkpoint: ck.FactorCheckpoint | None


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def adamw_step(params, grads, state, lr_t, weight_decay):
    """One AdamW update, in place on ``params`` (numpy arrays) and ``state``.

    ``state`` holds ``step`` and per-parameter ``m``/``v`` lists; pass ``{}``
    to start from zeros.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state:
        state.update(step=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["step"] += 1
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        kernels.adamw_update(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                             m.reshape(-1), v.reshape(-1), lr_t, BETAS[0], BETAS[1], ADAM_EPS,
                             weight_decay, state["step"])


class AdamW:
    def __init__(self, params, weight_decay=1e-4):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr_t):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, lr_t, self.weight_decay)


def lr_at(config, step, steps_per_epoch):
    """Linear warmup from 0, then cosine decay reaching 0 at the last step."""
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return config.lr * step / warm
    if total <= warm:
        return config.lr
    progress = min(1.0, (step - warm) / (total - warm))
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def effective_batch_size(config, n_train):
    if n_train < SMALL_DATASET and config.batch_size > 32:
        return 32
    return config.batch_size


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _batches(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def predict_logits(model, x, partition=None, batch_size=128):
    with T.no_grad():
        return np.concatenate([model(x[a:b], partition).data for a, b in _batches(len(x), batch_size)])


def evaluate(model, split, partition=None, batch_size=128):
    """``(mean loss, accuracy)`` over a split."""
    if len(split) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(model, split.x, partition, batch_size).astype(np.float64)
    logp = T.log_softmax_np(logits)
    loss = -logp[np.arange(len(split)), split.y].mean()
    return float(loss), float((logits.argmax(axis=1) == split.y).mean())


def _features(model, x, batch_size=128):
    with T.no_grad():
        return np.concatenate([model.features(x[a:b]).data for a, b in _batches(len(x), batch_size)])


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


class MetricsWriter:
    """Line-delimited JSON records; a no-op without a path."""

    def __init__(self, path=None, append=False):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "a" if append else "w")

    def write(self, **record):
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def read_metrics(path):
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _check_finite(loss, epoch, step):
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at epoch {epoch}, step {step}")


def train(model, dataset, config, metrics=None, train_split=None, eval_split="val", tag=None):
    """Fine-tune per ``config.mode``; the input ``model`` is never modified.

    Factor modes train factors + head. ``linear`` trains the head alone;
    ``full`` trains every backbone weight. ``train_split`` overrides ``dataset.train`` (the
    sweep retrains on train + val).
    """
    t0 = time.perf_counter()
    own_writer = not isinstance(metrics, MetricsWriter)
    writer = MetricsWriter(metrics) if own_writer else metrics
    try:
        return _train(model, dataset, config, writer, train_split, eval_split, tag, t0)
    finally:
        if own_writer:
            writer.close()


def _train(model, dataset, config, writer, train_split, eval_split, tag, t0):
    train_split = train_split or dataset.train
    held_out = getattr(dataset, eval_split) if eval_split else None
    model = model.copy()
    if model.config.num_classes != dataset.num_classes:
        model = model.with_head(dataset.num_classes)
    partition = None
    if config.fmt:
        partition = vit.make_partition(model.config, config.fmt, config.rank, config.scale_s,
                                       config.strategy, seed=config.seed)
        model.set_trainable("head")
    elif config.mode == "linear":
        model.set_trainable("head")
    else:
        model.set_trainable("all")
    params = model.trainable_parameters() + (partition.parameters() if partition else [])
    opt = AdamW(params, config.weight_decay)

    n = len(train_split)
    bs = effective_batch_size(config, n)
    steps_per_epoch = math.ceil(n / bs)
    rng = np.random.default_rng(config.seed)
    # the frozen backbone is a fixed feature map for a linear probe
    cached = _features(model, train_split.x) if config.mode == "linear" else None
    epochs, step = [], 0
    extra = {"tag": tag} if tag else {}

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for a, b in _batches(n, bs):
            idx = order[a:b]
            opt.zero_grad()
            if cached is not None:
                logits = model.head(T.AutoTensor(cached[idx]))
            else:
                logits = model(train_split.x[idx], partition)
            loss = T.cross_entropy(logits, train_split.y[idx])
            _check_finite(loss.item(), epoch, step)
            T.backward(loss)
            opt.step(lr_at(config, step, steps_per_epoch))
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == train_split.y[idx]).sum())
        record = {"epoch": epoch, "train_loss": loss_sum / n, "train_acc": correct / n}
        writer.write(record="epoch", epoch=epoch, split="train", loss=record["train_loss"],
                     acc=record["train_acc"], **extra)
        last = epoch == config.epochs - 1
        if held_out is not None and (last or (epoch + 1) % config.eval_every == 0):
            vloss, vacc = evaluate(model, held_out, partition)
            record.update(val_loss=vloss, val_acc=vacc)
            writer.write(record="epoch", epoch=epoch, split=eval_split, loss=vloss, acc=vacc, **extra)
        epochs.append(record)

    final_val = epochs[-1].get("val_acc", float("nan"))
    test_acc = evaluate(model, dataset.test, partition)[1] if len(dataset.test) else None
    factor_count = partition.trainable_count() if partition else 0
    head_count = model.head_size()
    counted = sum(p.data.size for p in params)
    report = TrainReport(config.mode, epochs, final_val, test_acc, counted, factor_count,
                         head_count, time.perf_counter() - t0, bs, step)
    if test_acc is not None:
        writer.write(record="final", split="test", acc=test_acc, **extra)
    ckpt = None if config.mode == "full" else ck.checkpoint_from_model(model, partition)
    for p in params:
        p.zero_grad()
    return TrainResult(report, model, partition, ckpt)


def sweep(model, dataset, config, metrics=None):
    """Grid over ``(rank, s)``: select on val, retrain the winner on train + val.

    Ties in validation accuracy go to the smaller parameter count, then the
    smaller ``s``.
    """
    if not config.fmt:
        raise ValueError(f"sweep needs a factor mode, got {config.mode!r}")
    if not config.rank_candidates or not config.s_candidates:
        raise ValueError("rank_candidates and s_candidates must be non-empty")
    own_writer = not isinstance(metrics, MetricsWriter)
    writer = MetricsWriter(metrics) if own_writer else metrics
    d_stages = [(s.layers, s.dim) for s in model.config.stages]
    cells = []
    try:
        for r in config.rank_candidates:
            for s in config.s_candidates:
                cell_cfg = replace(config, rank=int(r), scale_s=float(s))
                count = vit.partition_param_count(d_stages, config.fmt, int(r), config.strategy)
                try:
                    res = train(model, dataset, cell_cfg, writer, tag=f"r={r},s={s}")
                except (DivergenceError, ValueError) as exc:
                    log.warning("sweep cell r=%s s=%s failed: %s", r, s, exc)
                    writer.write(record="cell", format=config.fmt, rank=int(r), scale=float(s),
                                 params=count, val_acc=None, error=str(exc))
                    continue
                acc = res.report.final_val_acc
                cells.append((acc, count, float(s), int(r)))
                writer.write(record="cell", format=config.fmt, rank=int(r), scale=float(s),
                             params=count, val_acc=acc, strategy=config.strategy)
        if not cells:
            raise DivergenceError("every sweep cell failed")
        best = min(cells, key=lambda c: (-c[0], c[1], c[2]))
        _, _, s_best, r_best = best
        final_cfg = replace(config, rank=r_best, scale_s=s_best)
        result = train(model, dataset, final_cfg, writer, train_split=dataset.train_plus_val(),
                       eval_split=None, tag="final")
        result.report.selected = (r_best, s_best)
        result.report.final_val_acc = best[0]
        writer.write(record="selected", format=config.fmt, rank=r_best, scale=s_best,
                     val_acc=best[0], test_acc=result.report.test_acc)
        return result, cells
    finally:
        if own_writer:
            writer.close()


def pretrain(config, dataset, train_config, metrics=None, init_seed=0):
    """Train a backbone from random init on a source task (all weights)."""
    model = vit.VisionTransformer.random(config, seed=init_seed)
    return train(model, dataset, replace(train_config, mode="full"), metrics)
