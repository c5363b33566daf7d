"""Loss, Adam with step decay, the epoch loop, and horizon-wise evaluation."""

from __future__ import annotations

import json
import logging
import math
import resource
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, NamedTuple

import numpy as np

from . import kernel as K
from .data import Batch, NormStats, Splits, WindowSet, batches
from .kernel import ParamStore, Tensor

log = logging.getLogger(__name__)

HORIZONS = (3, 6, 12)


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.002
    batch_size: int = 64
    max_epochs: int = 150
    decay_step: int = 30
    decay_gamma: float = 0.5
    patience: int = 30
    seed: int = 0
    mape_mask_threshold: float = 1.0
    mask_zero_targets: bool = True
    clip_norm: float = 5.0          # <= 0 disables clipping
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_gamma <= 1:
            raise ValueError("decay_gamma must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.decay_step < 1:
            raise ValueError("decay_step must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_gamma ** (epoch // cfg.decay_step)


# ------------------------------------------------------------------ loss


def masked_mae_loss(pred_raw, target_raw, mask_zero: bool = True) -> Tensor:
    target = np.asarray(target_raw)
    mask = target != 0 if mask_zero else None
    if mask is not None and not mask.any():
        log.warning("every target entry is masked; loss defined as 0")
    return K.masked_mae(pred_raw, target, mask)


def denormalized(pred: Tensor, stats: NormStats) -> Tensor:
    """``pred * std + mean`` for the flow channel, inside the graph."""
    out = K.scale(pred, float(stats.std[0]))
    shift = np.full(pred.shape[-1], stats.mean[0], dtype=pred.dtype)
    return K.add_bias(out, K.Tensor(shift))


def batch_loss(model, batch: Batch, stats: NormStats, mask_zero: bool = True) -> Tensor:
    pred = denormalized(model.forward(batch.x, batch.tod_idx, batch.dow_idx), stats)
    target = np.swapaxes(batch.y, 1, 2).astype(pred.dtype)     # B x N x F
    return masked_mae_loss(pred, target, mask_zero)


# ------------------------------------------------------------------ adam


def global_grad_norm(store: ParamStore) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in store))


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    norm = global_grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in store:
            p.grad *= p.grad.dtype.type(factor)
    return norm


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of every parameter, then zero the gradients."""
    for p in store:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {p.name}")
    for p in store:
        dt = p.data.dtype.type
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m = dt(beta1) * p.adam_m + dt(1 - beta1) * g
        p.adam_v = dt(beta2) * p.adam_v + dt(1 - beta2) * (g * g)
        m_hat = p.adam_m / dt(1 - beta1 ** t)
        v_hat = p.adam_v / dt(1 - beta2 ** t)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        p.zero_grad()


# ------------------------------------------------------------ evaluation


@dataclass
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float    # percent


@dataclass
class MetricsReport:
    cells: dict                      # "@3", "@6", "@12", "avg" -> HorizonMetrics
    epoch_seconds: float | None = None
    peak_resident_bytes: int | None = None

    @property
    def avg(self) -> HorizonMetrics:
        return self.cells["avg"]

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [(k, v.mae, v.rmse, v.mape) for k, v in self.cells.items()]

    def to_text(self, title: str = "") -> str:
        keys = list(self.cells)
        head = f"{'Metric':<8}" + "".join(f"{('Avg.' if k == 'avg' else k):>10}" for k in keys)
        lines = [title] if title else []
        lines.append(head)
        for metric, unit in (("mae", ""), ("rmse", ""), ("mape", "%")):
            vals = "".join(f"{getattr(self.cells[k], metric):>9.2f}{unit or ' '}" for k in keys)
            lines.append(f"{metric.upper():<8}{vals}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["horizon,mae,rmse,mape"]
        out += [f"{k},{v.mae:.6f},{v.rmse:.6f},{v.mape:.6f}" for k, v in self.cells.items()]
        return "\n".join(out) + "\n"


class MetricAccumulator:
    """Per-horizon error sums; horizon is the last axis of ``pred``/``target``."""

    def __init__(self, F: int, mape_threshold: float = 1.0):
        self.F = F
        self.threshold = mape_threshold
        self.abs = np.zeros(F)
        self.sq = np.zeros(F)
        self.n = np.zeros(F, dtype=np.int64)
        self.ape = np.zeros(F)
        self.n_ape = np.zeros(F, dtype=np.int64)

    def update(self, pred, target) -> None:
        pred = np.asarray(pred, dtype=np.float64).reshape(-1, self.F)
        target = np.asarray(target, dtype=np.float64).reshape(-1, self.F)
        err = pred - target
        self.abs += np.abs(err).sum(axis=0)
        self.sq += (err * err).sum(axis=0)
        self.n += err.shape[0]
        ok = np.abs(target) > self.threshold
        safe = np.where(ok, np.abs(target), 1.0)
        self.ape += np.where(ok, np.abs(err) / safe, 0.0).sum(axis=0)
        self.n_ape += ok.sum(axis=0)

    def _cell(self, sl) -> HorizonMetrics:
        n = self.n[sl].sum()
        n_ape = self.n_ape[sl].sum()
        mape = 100.0 * self.ape[sl].sum() / n_ape if n_ape else float("nan")
        return HorizonMetrics(self.abs[sl].sum() / n, math.sqrt(self.sq[sl].sum() / n), mape)

    def report(self, horizons: Iterable[int] = HORIZONS) -> MetricsReport:
        if not self.n.sum():
            raise EvaluationError("no predictions were evaluated")
        cells = {f"@{h}": self._cell(slice(h - 1, h)) for h in horizons if h <= self.F}
        cells["avg"] = self._cell(slice(None))
        return MetricsReport(cells)


def compute_metrics(pred, target, mape_threshold: float = 1.0,
                    horizons: Iterable[int] = HORIZONS) -> MetricsReport:
    pred = np.asarray(pred)
    acc = MetricAccumulator(pred.shape[-1], mape_threshold)
    acc.update(pred, target)
    return acc.report(horizons)


def evaluate(model, samples: WindowSet, stats: NormStats, mape_threshold: float = 1.0,
             batch_size: int = 64) -> MetricsReport:
    """Raw-scale metrics at horizons 3/6/12 and averaged over all horizons."""
    if len(samples) == 0:
        raise EvaluationError(f"evaluation split {samples.name!r} is empty")
    acc = MetricAccumulator(model.config.F, mape_threshold)
    for batch in batches(samples, batch_size):
        pred = model.predict(batch.x, batch.tod_idx, batch.dow_idx, stats)
        acc.update(pred, np.swapaxes(batch.y, 1, 2))
    return acc.report()


# -------------------------------------------------------------- training


def peak_resident_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float
    val_rmse: float
    val_mape: float
    epoch_seconds: float = 0.0
    peak_bytes: int = 0

    COST_FIELDS = ("epoch_seconds", "peak_bytes")

    def deterministic(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in self.COST_FIELDS}

    def costs(self) -> dict:
        return {"epoch": self.epoch, "epoch_seconds": self.epoch_seconds,
                "peak_bytes": self.peak_bytes}

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def history_lines(history: list[EpochRecord], with_costs: bool = True) -> str:
    """One JSON record per epoch; ``with_costs=False`` gives the run-invariant part."""
    rows = (asdict(r) if with_costs else r.deterministic() for r in history)
    return "".join(json.dumps(r) + "\n" for r in rows)


def read_history(text: str) -> list[EpochRecord]:
    names = {f.name for f in fields(EpochRecord)}
    return [EpochRecord(**{k: v for k, v in json.loads(line).items() if k in names})
            for line in text.splitlines() if line.strip()]


class TrainResult(NamedTuple):
    best_params: dict
    history: list
    best_epoch: int


def train(model, data: Splits, cfg: TrainConfig, lr_fn: Callable[[int], float] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train with Adam, keep the parameters with the best validation average MAE.

    On return the model holds the best parameters.
    """
    store = model.store
    lr_fn = lr_fn or (lambda e: lr_at(e, cfg))
    best_mae, best_epoch, best = math.inf, -1, store.snapshot()
    history: list[EpochRecord] = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_fn(epoch)
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for b, batch in enumerate(batches(data.train, cfg.batch_size, cfg.seed, epoch)):
            loss = batch_loss(model, batch, data.stats, cfg.mask_zero_targets)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            loss.backward()
            clip_gradients(store, cfg.clip_norm)
            try:
                adam_step(store, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"epoch {epoch} batch {b}: {exc}") from None
            total += value * len(batch.x)
            count += len(batch.x)
        val = evaluate(model, data.val, data.stats, cfg.mape_mask_threshold, cfg.batch_size).avg
        rec = EpochRecord(epoch, lr, total / max(count, 1), val.mae, val.rmse, val.mape,
                          time.perf_counter() - t0, peak_resident_bytes())
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.info("epoch %d lr %.3g loss %.4f val mae %.4f (%.1fs)", epoch, lr,
                 rec.train_loss, val.mae, rec.epoch_seconds)
        if val.mae < best_mae:
            best_mae, best_epoch, best = val.mae, epoch, store.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    store.restore(best)
    return TrainResult(best, history, best_epoch)
