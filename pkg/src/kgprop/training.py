"""Time-weighted BCE training, threshold selection and multi-label metrics."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from kgprop.diff_core import AdamConfig, ParamStore, adam_step, sgd_step
from kgprop.errors import (
    DimensionMismatch,
    InvalidConfig,
    NonFiniteValue,
    ProbabilityOutOfRange,
    UnknownLabel,
    ValidationError,
)
from kgprop.propagation import GraphContext, PropagationNet, sigmoid

log = logging.getLogger(__name__)

THRESHOLD_GRID = np.arange(1, 100) / 100.0


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    """Instances as a feature matrix ``X (N, d_feat)`` and targets ``Y (N, m)``.

    ``Y`` covers the first ``m`` vocabulary labels: the seen slice for
    training data, seen + unseen for generalized evaluation.
    """

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.int8)
        if self.X.ndim != 2 or self.Y.ndim != 2 or len(self.X) != len(self.Y):
            raise DimensionMismatch("X must be (N, d_feat) and Y (N, m) with matching N")
        if len(self.X) < 1:
            raise ValidationError("dataset is empty")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("features must be finite")
        if not np.all((self.Y == 0) | (self.Y == 1)):
            raise ValidationError("targets must be 0/1")

    def __len__(self):
        return len(self.X)

    @property
    def d_feat(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    def labels_slice(self, count: int) -> "Dataset":
        return Dataset(self.X, self.Y[:, :count])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.d_feat} {self.m}\n")
            for x, y in zip(self.X, self.Y):
                fh.write(" ".join(repr(float(v)) for v in x) + " | " + " ".join(str(int(v)) for v in y) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise ValidationError(f"{path}: header must be 'd_feat m'")
            d_feat, m = int(header[0]), int(header[1])
            xs, ys = [], []
            for lineno, raw in enumerate(fh, 2):
                if not raw.strip():
                    continue
                left, sep, right = raw.partition("|")
                x, y = left.split(), right.split()
                if not sep or len(x) != d_feat or len(y) != m:
                    raise DimensionMismatch(f"{path}:{lineno}: expected {d_feat} features | {m} targets")
                xs.append([float(v) for v in x])
                ys.append([int(v) for v in y])
        return cls(np.array(xs).reshape(-1, d_feat), np.array(ys).reshape(-1, m))


def save_matrix(path, P: np.ndarray) -> None:
    """Prediction file: header ``N m`` then one row of probabilities per instance."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{P.shape[0]} {P.shape[1]}\n")
        for row in P:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        n, m = (int(v) for v in fh.readline().split())
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    P = np.array(rows, dtype=np.float64).reshape(-1, m) if rows else np.zeros((0, m))
    if P.shape != (n, m):
        raise DimensionMismatch(f"{path}: expected {n}x{m} values")
    return P


# ---------------------------------------------------------------- loss


def timestep_weights(T: int) -> np.ndarray:
    """``alpha(t) = 1 / (T - t + 1)`` for t = 0..T."""
    t = np.arange(T + 1)
    return 1.0 / (T - t + 1.0)


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Time-weighted BCE over confidences ``p (T+1, N, n)`` and targets ``y (N, m)``.

    Only the first ``m`` nodes are supervised. Returns the loss and its
    gradient with respect to ``p`` (zero for unsupervised nodes).
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.ndim != 3 or y.ndim != 2 or p.shape[1] != y.shape[0] or p.shape[2] < y.shape[1]:
        raise DimensionMismatch(f"confidences {p.shape} incompatible with targets {y.shape}")
    m = y.shape[1]
    ps = p[:, :, :m]
    if not np.all((ps > 0.0) & (ps < 1.0)):
        raise ProbabilityOutOfRange("confidences must lie strictly inside (0, 1)")
    alpha = timestep_weights(p.shape[0] - 1)[:, None, None]
    norm = y.shape[0] * m
    ll = y * np.log(ps) + (1.0 - y) * np.log1p(-ps)
    loss = -float(np.sum(alpha * ll)) / norm
    grad = np.zeros_like(p)
    grad[:, :, :m] = -(alpha / norm) * (y / ps - (1.0 - y) / (1.0 - ps))
    return loss, grad


def bce_loss_from_logits(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Same loss as :func:`bce_loss`, computed from pre-sigmoid outputs.

    Stays finite when confidences saturate to 0 or 1 in float64.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[1] != y.shape[0] or logits.shape[2] < y.shape[1]:
        raise DimensionMismatch(f"logits {logits.shape} incompatible with targets {y.shape}")
    m = y.shape[1]
    lg = logits[:, :, :m]
    alpha = timestep_weights(logits.shape[0] - 1)[:, None, None]
    norm = y.shape[0] * m
    # -log-likelihood = softplus(l) - y*l
    nll = np.maximum(lg, 0.0) - y * lg + np.log1p(np.exp(-np.abs(lg)))
    loss = float(np.sum(alpha * nll)) / norm
    p = sigmoid(lg)
    grad = np.zeros_like(logits)
    grad[:, :, :m] = (alpha / norm) * (p - y)
    return loss, grad


# ------------------------------------------------------------- metrics


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "threshold"  # "threshold" | "topk"
    threshold: float = 0.5
    k: int = 3

    def __post_init__(self):
        if self.mode == "threshold":
            if not 0.0 < self.threshold < 1.0:
                raise InvalidConfig("threshold must lie in (0, 1)")
        elif self.mode == "topk":
            if self.k < 1:
                raise InvalidConfig("K must be at least 1")
        else:
            raise InvalidConfig(f"unknown eval mode {self.mode!r}")


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_timestep: list[tuple[int, float]] | None = None

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("tp", self.tp),
            ("fp", self.fp),
            ("fn", self.fn),
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()


def report_from_counts(tp: int, fp: int, fn: int) -> MetricReport:
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricReport(precision, recall, f1, int(tp), int(fp), int(fn))


def binarize(p: np.ndarray, cfg: EvalConfig) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if cfg.mode == "threshold":
        return p >= cfg.threshold
    k = min(cfg.k, p.shape[1])
    # stable sort: equal scores go to the lower label index
    order = np.argsort(-p, axis=1, kind="stable")[:, :k]
    pred = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(pred, order, True, axis=1)
    return pred


def evaluate(p: np.ndarray, y: np.ndarray, cfg: EvalConfig = EvalConfig()) -> MetricReport:
    """Micro-averaged precision / recall / F1 of ``p (N, m)`` against ``y (N, m)``."""
    p, y = np.asarray(p), np.asarray(y)
    if p.shape != y.shape or p.ndim != 2:
        raise DimensionMismatch(f"predictions {p.shape} and truth {y.shape} differ")
    pred = binarize(p, cfg)
    truth = y.astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return report_from_counts(tp, fp, fn)


def select_threshold(p: np.ndarray, y: np.ndarray) -> float:
    """Grid threshold (0.01 .. 0.99) with the best micro-F1, smallest on ties.

    A validation set without any positive target has nothing to recall;
    every threshold scores F1 = 0 and 0.01 is returned.
    """
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y).astype(bool)
    if p.shape != y.shape or p.size == 0:
        raise DimensionMismatch("validation predictions and targets must be non-empty and aligned")
    if not y.any():
        return float(THRESHOLD_GRID[0])
    pos = np.sort(p[y])
    neg = np.sort(p[~y])
    n_pos = len(pos)
    # counts of scores >= t for every grid t
    tp = n_pos - np.searchsorted(pos, THRESHOLD_GRID, side="left")
    fp = len(neg) - np.searchsorted(neg, THRESHOLD_GRID, side="left")
    fn = n_pos - tp
    f1 = [report_from_counts(a, b, c).f1 for a, b, c in zip(tp, fp, fn)]
    return float(THRESHOLD_GRID[int(np.argmax(f1))])


def evaluate_per_timestep(p_all: np.ndarray, y: np.ndarray, cfg: EvalConfig) -> list[tuple[int, MetricReport]]:
    """Apply :func:`evaluate` to the confidences of every step ``t = 0..T``."""
    p_all = np.asarray(p_all)
    if p_all.ndim != 3:
        raise DimensionMismatch("per-timestep confidences must be (T+1, N, m)")
    return [(t, evaluate(p_all[t], y, cfg)) for t in range(p_all.shape[0])]


def per_timestep_csv(reports: Sequence[tuple[int, MetricReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "precision", "recall", "f1"])
    for t, r in reports:
        w.writerow([t, r.precision, r.recall, r.f1])
    return buf.getvalue()


# ------------------------------------------------------------ training


def predict_all(model: PropagationNet, ctx: GraphContext, X: np.ndarray, zsl_mask: bool = False,
                batch_size: int = 512) -> np.ndarray:
    """Confidences at every step, ``(T+1, N, n)``, computed in batches."""
    chunks = [model.forward(X[i : i + batch_size], ctx, zsl_mask).p for i in range(0, len(X), batch_size)]
    return np.concatenate(chunks, axis=1)


def loss_and_grad(model: PropagationNet, ctx: GraphContext, X: np.ndarray, Y: np.ndarray,
                  zsl_mask: bool = False) -> float:
    """Mini-batch loss; gradients are accumulated into ``model.params.grads``."""
    fp = model.forward(X, ctx, zsl_mask)
    loss, g_logits = bce_loss_from_logits(fp.logits, Y)
    model.backward(fp, grad_logits=g_logits)
    return loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"  # "adam" | "sgd"
    adam: AdamConfig = AdamConfig()
    sgd_lr: float = 0.1
    seed: int = 0
    keep_best: bool = True
    eval_every: int = 1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1: float | None
    threshold: float | None


@dataclass
class TrainResult:
    params: ParamStore
    threshold: float
    best_epoch: int | None
    history: list[EpochRecord] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_f1"])
        for r in self.history:
            w.writerow([r.epoch, r.train_loss, "" if r.val_f1 is None else r.val_f1])
        return buf.getvalue()


def train(model: PropagationNet, ctx: GraphContext, train_set: Dataset, val_set: Dataset | None,
          cfg: TrainConfig = TrainConfig(), stop: Callable[[EpochRecord], bool] | None = None) -> TrainResult:
    """Mini-batch training on the seen labels of ``ctx``.

    The graph is restricted to seen labels; the loss covers every label in
    ``train_set.Y``. After each evaluated epoch the validation threshold is
    re-selected and validation F1 recorded; with ``keep_best`` the
    parameters of the best-F1 epoch are restored at the end. ``stop`` is
    called after every epoch and ends training early when it returns True.
    """
    if train_set.m != ctx.vocab.seen_count:
        raise DimensionMismatch(f"training targets cover {train_set.m} labels, vocabulary has {ctx.vocab.seen_count} seen")
    if val_set is not None and val_set.m != train_set.m:
        raise DimensionMismatch("validation targets must cover the seen labels")
    ctx = ctx.seen_only()
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    N = len(train_set)
    history: list[EpochRecord] = []
    best_f1, best_epoch, best_state, best_thr = -1.0, None, None, 0.5

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            params.zero_grad()
            try:
                loss = loss_and_grad(model, ctx, train_set.X[idx], train_set.Y[idx])
                if not np.isfinite(loss):
                    raise NonFiniteValue("loss is not finite")
                if cfg.optimizer == "adam":
                    a = cfg.adam
                    adam_step(params, a.lr, a.beta1, a.beta2, a.eps)
                else:
                    sgd_step(params, cfg.sgd_lr)
            except NonFiniteValue as exc:
                raise NonFiniteValue(f"epoch {epoch}: {exc}", epoch=epoch) from exc
            total += loss * len(idx)
        rec = EpochRecord(epoch, total / N, None, None)
        last = epoch == cfg.epochs
        if val_set is not None and (epoch % cfg.eval_every == 0 or last):
            pv = predict_all(model, ctx, val_set.X)[-1]
            thr = select_threshold(pv, val_set.Y)
            rec.threshold = thr
            rec.val_f1 = evaluate(pv, val_set.Y, EvalConfig("threshold", thr)).f1
            if rec.val_f1 > best_f1:
                best_f1, best_epoch, best_thr = rec.val_f1, epoch, thr
                if cfg.keep_best:
                    best_state = params.copy()
        history.append(rec)
        log.debug("epoch %d loss %.5f val_f1 %s", epoch, rec.train_loss, rec.val_f1)
        if stop is not None and stop(rec):
            break

    threshold = best_thr
    if cfg.keep_best and best_state is not None:
        params.load_values(best_state)
    elif history and history[-1].threshold is not None:
        threshold = history[-1].threshold
    return TrainResult(params, threshold, best_epoch, history)


# ------------------------------------------------------- zero-shot eval


def zsl_evaluate(model: PropagationNet, ctx: GraphContext, test_set: Dataset, mode: str = "unseen_only",
                 cfg: EvalConfig = EvalConfig()) -> MetricReport:
    """Score a seen-trained model on the full seen + unseen graph (masked).

    ``unseen_only`` keeps just the unseen columns; ``generalized`` scores
    every label.
    """
    if test_set.m != len(ctx.vocab):
        raise DimensionMismatch("test targets must cover seen and unseen labels")
    p = predict_all(model, ctx, test_set.X, zsl_mask=True)[-1]
    s = ctx.vocab.seen_count
    if mode == "unseen_only":
        if ctx.vocab.unseen_count == 0:
            raise ValidationError("vocabulary has no unseen labels")
        return evaluate(p[:, s:], test_set.Y[:, s:], cfg)
    if mode == "generalized":
        return evaluate(p, test_set.Y, cfg)
    raise InvalidConfig(f"unknown zsl mode {mode!r}")


def marginal_baseline_scores(train_like_Y: np.ndarray, n_instances: int) -> np.ndarray:
    """Every instance gets each label's empirical frequency as its score."""
    freq = np.asarray(train_like_Y, dtype=np.float64).mean(axis=0)
    return np.tile(freq, (n_instances, 1))


# -------------------------------------------------------------- traces


def probability_trace(model: PropagationNet, ctx: GraphContext, x, labels: Sequence[str],
                      zsl_mask: bool = False) -> list[tuple[str, int, float]]:
    """Rows ``(label, t, p)`` for every requested label and t = 0..T."""
    idx = []
    for lab in labels:
        if lab not in ctx.vocab.labels:
            raise UnknownLabel(lab)
        idx.append(ctx.vocab.index(lab))
    p = model.forward(np.asarray(x, dtype=np.float64).reshape(1, -1), ctx, zsl_mask).p[:, 0, :]
    return [(lab, t, float(p[t, i])) for lab, i in zip(labels, idx) for t in range(p.shape[0])]


def trace_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "t", "p"])
    w.writerows(rows)
    return buf.getvalue()


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
