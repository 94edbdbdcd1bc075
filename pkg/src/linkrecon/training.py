"""Loss, optimizer and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .autodiff import Tape, Var
from .graph import Dataset, to_adjacency
from .metrics import auc, average_precision, symmetrize_scores
from .model import ModelParams, forward

log = logging.getLogger(__name__)

BCE_EPS = 1e-12


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    weight_decay: float = 0.0
    epochs: int = 200
    dropout_rate: float = 0.2
    lam: float = 0.13
    layers: int = 3
    hidden: int = 64
    batch: int = 1
    seed: int = 0
    layer_relu: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1 or self.batch < 1:
            raise ValueError("hidden and batch must be >= 1")
        if not self.lam > 0:
            raise ValueError("lam must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# Published per-dataset settings; anything not listed uses the TrainConfig defaults.
DATASET_OVERRIDES = {
    "ns": {"learning_rate": 0.0012},
    "ecoli": {"epochs": 300},
    "e.coli": {"epochs": 300},
    "yeast": {"epochs": 300},
    "router": {"dropout_rate": 0.5},
}


def config_for(dataset_name: str | None, **overrides) -> TrainConfig:
    base = dict(DATASET_OVERRIDES.get((dataset_name or "").lower(), {}))
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float
    val_ap: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_auc", "val_ap"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_auc), repr(r.val_ap)])
        return buf.getvalue()


def bce_loss(scores: Var, labels: np.ndarray, tape: Tape, eps: float = BCE_EPS) -> Var:
    """Mean binary cross-entropy over every entry of ``scores``.

    Probabilities are clamped to ``[eps, 1 - eps]``; the gradient is the
    probability-space form ``(O - Y) / (O (1 - O)) / N`` at the clamped value.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError(f"labels {labels.shape} vs scores {scores.shape}")
    o = np.clip(scores.value, eps, 1.0 - eps)
    count = o.size
    loss = -(labels * np.log(o) + (1.0 - labels) * np.log1p(-o)).sum() / count

    def back(g):
        return (g[0, 0] * (o - labels) / (o * (1.0 - o)) / count,)

    return tape.record("bce", np.array([[loss]]), (scores,), back)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place.  Weight decay is added to the gradient."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(sorted(missing))}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def init_params(n: int, config: TrainConfig, seed: int | None = None) -> tuple[ModelParams, AdamState]:
    """Near-identity layer weights (noise within +-0.01), fan-in scaled MLP, zero biases."""
    if n < 2:
        raise ValueError("need at least two nodes")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    L, h = config.layers, config.hidden
    layer_weights = [np.eye(n) + rng.uniform(-0.01, 0.01, size=(n, n)) for _ in range(L)]
    fan1 = 2 * (L + 1)
    params = ModelParams(
        layer_weights=layer_weights,
        mlp_w1=rng.uniform(-1.0, 1.0, size=(fan1, h)) / math.sqrt(fan1),
        mlp_b1=np.zeros((1, h)),
        mlp_w2=rng.uniform(-1.0, 1.0, size=(h, 1)) / math.sqrt(h),
        mlp_b2=np.zeros((1, 1)),
        lam=config.lam,
        dropout_rate=config.dropout_rate,
        layer_relu=config.layer_relu,
    )
    return params, AdamState.zeros_like(params.arrays())


def loss_and_grads(
    a_input: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    training: bool,
    seed=None,
) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    out = forward(a_input, params, training, tape, seed=seed)
    loss = bce_loss(out.scores, labels, tape)
    return float(loss.value[0, 0]), tape.backward(loss)


def evaluate_validation(params: ModelParams, dataset: Dataset, labels: np.ndarray) -> tuple[float, float, float]:
    """Mean validation loss, AUC and AP.

    Each validation graph's deleted edges are positives and its added edges
    negatives, scored by the model run on that graph.
    """
    losses, aucs, aps = [], [], []
    for p in dataset.val:
        tape = Tape()
        out = forward(to_adjacency(p.graph), params, False, tape)
        losses.append(float(bce_loss(out.scores, labels, tape).value[0, 0]))
        if p.deleted and p.added:
            pairs = symmetrize_scores(out.scores.value)
            is_pos = pairs.mask(p.deleted)
            is_neg = pairs.mask(p.added)
            s = pairs.score
            aucs.append(auc(s[is_pos], s[is_neg]))
            sel = is_pos | is_neg
            aps.append(average_precision(s[sel], is_pos[sel]))
    nan = float("nan")
    return (
        float(np.mean(losses)) if losses else nan,
        float(np.mean(aucs)) if aucs else nan,
        float(np.mean(aps)) if aps else nan,
    )


def train(
    dataset: Dataset,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord, ModelParams], None] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Fit on the augmented training graphs with the observed adjacency as target.

    Returns the parameters from the epoch with the best validation AUC (earliest
    on ties) and the full per-epoch history.  ``on_epoch(record, params)`` is
    called after every epoch with the live parameters.
    """
    labels = to_adjacency(dataset.observed)
    inputs = [to_adjacency(p.graph) for p in dataset.train]
    params, state = init_params(dataset.n, config)
    arrays = params.arrays()
    shuffle_rng = np.random.default_rng([config.seed, 0xA5])

    history = TrainHistory()
    best, best_auc = params.copy(), -math.inf
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(inputs))
        total, pending, acc = 0.0, 0, None
        for step, k in enumerate(order):
            loss, grads = loss_and_grads(inputs[k], labels, params, True, seed=[config.seed, epoch, step])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            total += loss
            acc = grads if acc is None else {n: acc[n] + grads[n] for n in acc}
            pending += 1
            if pending == config.batch or step == len(order) - 1:
                mean = {n: g / pending for n, g in acc.items()} if pending > 1 else acc
                adam_step(arrays, mean, state, config.learning_rate, config.weight_decay)
                acc, pending = None, 0

        val_loss, val_auc, val_ap = evaluate_validation(params, dataset, labels)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, total / len(order), val_loss, val_auc, val_ap)
        history.records.append(rec)
        log.debug("epoch %d train %.5f val %.5f auc %.4f ap %.4f", epoch, rec.train_loss, val_loss, val_auc, val_ap)
        if on_epoch is not None:
            on_epoch(rec, params)
        if val_auc > best_auc or (math.isnan(best_auc) and not math.isnan(val_auc)):
            best_auc = val_auc
            best = params.copy()
            history.best_epoch = epoch
    if history.best_epoch == 0:
        # no usable validation AUC (e.g. empty perturbations): keep the final weights
        best = params.copy()
        history.best_epoch = config.epochs
    return best, history
