"""Training loop: bias-weighted cross entropy, Adam with inverse-time decay,
seeded epoch shuffling, and optional best-by-dev checkpoint selection.

The positive class (label 1) is the bonafide target trial; nontarget and
spoof trials are the negative class (label 0). Class weights default to
(0.1, 0.9), putting most of the loss mass on the rarer positive class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from ._mem import tune_malloc
from .data import EmbeddingStore, Trial, trial_embeddings
from .fusion import fuse_batch
from .metrics import ScoreSet, evaluate
from .models import Model
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 1e-3
    class_weights: tuple[float, float] = (0.1, 0.9)
    batch_size: int = 256
    epochs: int = 30
    schedule_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.schedule_decay < 0 or self.weight_decay < 0:
            raise ValueError("decay constants must be >= 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Inverse-time decay per optimizer step: lr0 / (1 + decay * step)."""
    return cfg.lr0 / (1.0 + cfg.schedule_decay * step)


def weighted_cross_entropy(logits: Tensor, labels, class_weights) -> Tensor:
    """(1/B) * sum_i w[y_i] * (-log_softmax(logits_i)[y_i]), differentiable."""
    y = np.asarray(labels)
    if y.ndim != 1 or logits.data.ndim != 2 or y.size != logits.shape[0]:
        raise T.DimensionError(
            f"need Bx2 logits and B labels, got {logits.shape} and {y.shape}"
        )
    n_classes = logits.shape[1]
    if y.size == 0 or y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}), got {sorted(set(y.tolist()))}")
    weights = np.asarray(class_weights, dtype=np.float64)
    logp = T.log_softmax(logits, axis=1)
    mask = np.zeros(logits.shape)
    mask[np.arange(y.size), y] = -weights[y] / y.size
    return T.sum_all(T.mul(logp, Tensor(mask)))


class Adam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) with bias correction and
    L2-coupled weight decay: decay is added to the gradient before the
    moment updates."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad + weight_decay * p.data if weight_decay else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(named_params, state: Adam, lr: float, weight_decay: float = 0.0) -> Adam:
    """Functional wrapper over Adam.step for callers that hold state separately."""
    if state is None:
        state = Adam(named_params)
    state.step(lr, weight_decay)
    return state


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float
    dev_sasv: float | None = None
    dev_spf: float | None = None
    dev_sv: float | None = None

    def format_line(self) -> str:
        parts = [f"epoch={self.epoch}", f"loss={self.mean_loss:.6f}", f"lr={self.lr:.6e}"]
        if self.dev_sasv is not None:
            parts.append(f"dev_sasv={self.dev_sasv:.3f}")
        if self.dev_spf is not None:
            parts.append(f"dev_spf={self.dev_spf:.3f}")
        if self.dev_sv is not None:
            parts.append(f"dev_sv={self.dev_sv:.3f}")
        return " ".join(parts)


@dataclass
class FitResult:
    logs: list[EpochLog] = field(default_factory=list)
    best_epoch: int | None = None


def trial_labels(trials) -> np.ndarray:
    return np.array([1 if t.label == "target" else 0 for t in trials])


def _batches(n: int, batch_size: int, perm: np.ndarray):
    """Contiguous permutation chunks; a trailing singleton is folded into
    the previous chunk so batch norm always sees >= 2 rows."""
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def score_trials(model: Model, trials: list[Trial], store: EmbeddingStore,
                 batch_size: int = 256) -> np.ndarray:
    """Per-trial target probabilities in protocol order (eval mode)."""
    mode = model.config.fusion_mode
    was_training = model.training
    model.eval()
    out = np.empty(len(trials))
    for i in range(0, len(trials), batch_size):
        chunk = trials[i : i + batch_size]
        batch = fuse_batch([trial_embeddings(store, t) for t in chunk], mode)
        out[i : i + len(chunk)] = model.score_batch(batch, mode)
    if was_training:
        model.train()
    return out


def evaluate_trials(model: Model, trials: list[Trial], store: EmbeddingStore,
                    batch_size: int = 256):
    scores = score_trials(model, trials, store, batch_size)
    ids = [f"t{i:06d}" for i in range(len(trials))]
    return evaluate(ScoreSet(ids, scores, [t.label for t in trials]))


def fit(
    model: Model,
    train_trials: list[Trial],
    cfg: TrainConfig,
    store: EmbeddingStore,
    dev_trials: list[Trial] | None = None,
    select_best: bool | None = None,
) -> FitResult:
    """Train in place and return the per-epoch log.

    When dev trials are given they are scored after every epoch; with
    select_best (the default when a dev set is present, turn it off when
    dev was part of the training data) the parameters with the lowest dev
    SASV-EER are restored at the end, otherwise the final epoch stays.
    """
    tune_malloc()
    if not train_trials:
        raise ValueError("no training trials")
    y = trial_labels(train_trials)
    if y.min() == y.max():
        raise ValueError("training data must contain both classes")
    if select_best is None:
        select_best = dev_trials is not None

    mode = model.config.fusion_mode
    embeddings = [trial_embeddings(store, t) for t in train_trials]
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.named_parameters())
    result = FitResult()
    best_eer = np.inf
    best_state = None
    n = len(train_trials)
    step = 0

    model.train()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        last_lr = lr_at(step, cfg)
        for idx in _batches(n, cfg.batch_size, perm):
            batch = fuse_batch([embeddings[i] for i in idx], mode)
            model.zero_grads()
            with T.recording() as tape:
                logits = model.forward(batch, mode)
                loss = weighted_cross_entropy(logits, y[idx], cfg.class_weights)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite loss {loss_value} at epoch {epoch}, step {step}"
                )
            tape.backward(loss)
            last_lr = lr_at(step, cfg)
            optimizer.step(last_lr, cfg.weight_decay)
            total += loss_value * len(idx)
            step += 1

        log = EpochLog(epoch=epoch, mean_loss=total / n, lr=last_lr)
        if dev_trials is not None:
            report = evaluate_trials(model, dev_trials, store, cfg.batch_size)
            log.dev_sasv = report.sasv_eer
            log.dev_spf = report.spf_eer
            log.dev_sv = report.sv_eer
            if select_best and report.sasv_eer is not None and report.sasv_eer < best_eer:
                best_eer = report.sasv_eer
                best_state = model.state_arrays()
                result.best_epoch = epoch
        result.logs.append(log)

    model.eval()
    if select_best and best_state is not None:
        model.load_state_arrays(best_state)
    return result
