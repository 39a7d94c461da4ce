"""Adam training of method parameters with early stopping, plus the synthetic
classification tasks and the grid-search harness.

Everything is reproducible from integer seeds: task data, parameter init,
shuffling, and dropout all derive from counter-based generator streams.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .forward import build_params, run_backward, run_forward, trainable_items, zero_grads
from .numerics import GradPair, Tensor, make_rng
from .peft import PeftConfig, count_trainable, init_peft_state
from .transformer import Backbone, ModelConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    max_epochs: int
    patience: int
    seed: int = 0
    metric: str = "accuracy"

    def __post_init__(self) -> None:
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.metric != "accuracy":
            raise ConfigError(f"unsupported metric {self.metric!r}")


@dataclass
class AdamState:
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, GradPair]) -> "AdamState":
        m = {n: np.zeros_like(p.value) for n, p in params.items() if p.grad is not None}
        v = {n: np.zeros_like(p.value) for n, p in params.items() if p.grad is not None}
        return cls(m=m, v=v)


def adam_step(params: dict[str, GradPair], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every grad-bearing parameter, in place."""
    state.t += 1
    t = state.t
    for name, pair in params.items():
        if pair.grad is None:
            continue
        g = pair.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        pair.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def cross_entropy(logits: Tensor, labels: Tensor) -> tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient wrt logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def accuracy(logits: Tensor, labels: Tensor) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


class EarlyStopper:
    """Halt after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.counter = 0
        self.should_stop = False

    def update(self, metric: float, epoch: int) -> bool:
        """Record an epoch's dev metric; returns True if it set a new best."""
        if self.best is None or metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        if self.counter >= self.patience:
            self.should_stop = True
        return False


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # token_identity | constant_separable
    seed: int
    n_train: int
    n_dev: int
    num_classes: int
    seq_len: int
    vocab_size: int
    rule: str
    marked_pos: int = 0
    marker_token: int = 7


def make_task(kind: str, seed: int, n_train: int = 2000, n_dev: int = 500,
              num_classes: int = 2, seq_len: int = 16, vocab_size: int = 256) -> TaskSpec:
    """Synthetic task definition; data is regenerated on demand from the seed."""
    if kind == "token_identity":
        rule = "label = class of the token at the marked position (random class map per seed)"
    elif kind == "constant_separable":
        rule = "label = whether the marker token occurs anywhere in the sequence"
        num_classes = 2
    else:
        raise ConfigError(f"unknown task kind {kind!r}")
    return TaskSpec(
        name=f"{kind}-s{seed}",
        kind=kind,
        seed=seed,
        n_train=n_train,
        n_dev=n_dev,
        num_classes=num_classes,
        seq_len=seq_len,
        vocab_size=vocab_size,
        rule=rule,
    )


def token_class_map(task: TaskSpec) -> np.ndarray:
    """The per-seed random token -> class assignment for token_identity."""
    rng = make_rng(task.seed, "classmap")
    return rng.integers(0, task.num_classes, size=task.vocab_size)


def generate_examples(task: TaskSpec) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(train_x, train_y, dev_x, dev_y); dev sequences never collide with train ones.

    Sampling rejects draws that would unbalance classes beyond ceil(n / classes)
    and redraws dev rows that duplicate a train row.
    """
    rng = make_rng(task.seed, "data")
    cls_map = token_class_map(task) if task.kind == "token_identity" else None

    def label_of(seq: np.ndarray) -> int:
        if task.kind == "token_identity":
            return int(cls_map[seq[task.marked_pos]])
        return int(task.marker_token in seq)

    def sample_split(n: int, forbidden: set[bytes]) -> tuple[Tensor, Tensor]:
        cap = -(-n // task.num_classes)  # ceil
        counts = np.zeros(task.num_classes, dtype=int)
        xs = np.empty((n, task.seq_len), dtype=np.int64)
        ys = np.empty(n, dtype=np.int64)
        got = 0
        while got < n:
            seq = rng.integers(0, task.vocab_size, size=task.seq_len)
            if task.kind == "constant_separable":
                # force the marker in or out so rejection converges quickly
                want_pos = counts[1] <= counts[0]
                if want_pos:
                    seq[rng.integers(0, task.seq_len)] = task.marker_token
                else:
                    seq[seq == task.marker_token] = (task.marker_token + 1) % task.vocab_size
            y = label_of(seq)
            if counts[y] >= cap:
                continue
            key = seq.tobytes()
            if key in forbidden:
                continue
            forbidden.add(key)
            xs[got] = seq
            ys[got] = y
            got += 1
            counts[y] += 1
        return xs, ys

    seen: set[bytes] = set()
    train_x, train_y = sample_split(task.n_train, seen)
    dev_x, dev_y = sample_split(task.n_dev, seen)
    return train_x, train_y, dev_x, dev_y


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def snapshot_params(params: dict[str, GradPair]) -> dict[str, Tensor]:
    return {n: p.value.copy() for n, p in params.items() if p.grad is not None}


def restore_params(params: dict[str, GradPair], snap: dict[str, Tensor]) -> None:
    for n, arr in snap.items():
        params[n].value[...] = arr


def evaluate(backbone: Backbone, state, xs: Tensor, ys: Tensor, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, xs.shape[0], batch_size):
        logits, _ = run_forward(backbone, state, xs[start : start + batch_size])
        correct += int((logits.argmax(axis=1) == ys[start : start + batch_size]).sum())
    return correct / xs.shape[0]


def train_task(backbone: Backbone, peft_cfg: PeftConfig, task: TaskSpec, cfg: TrainConfig,
               max_steps: int | None = None):
    """Train one method on one task; returns (state, best dev metric, epoch log).

    Only method parameters and the head receive updates. Training halts when the
    dev metric has gone `patience` consecutive epochs without a strict
    improvement, and the returned state is the best epoch's snapshot.
    """
    state = init_peft_state(peft_cfg, backbone.config, cfg.seed, backbone.embed_weights.dtype)
    params = build_params(backbone, state)
    adam = AdamState.for_params(params)
    train_x, train_y, dev_x, dev_y = generate_examples(task)

    stopper = EarlyStopper(cfg.patience)
    best_snap = snapshot_params(params)
    log: list[dict] = []
    steps_done = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = make_rng(cfg.seed, "shuffle", epoch).permutation(train_x.shape[0])
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            if max_steps is not None and steps_done >= max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            rng = make_rng(cfg.seed, "dropout", epoch, n_batches)
            logits, cache = run_forward(
                backbone, state, train_x[idx], train=True, rng=rng, need_cache=True
            )
            loss, dlogits = cross_entropy(logits, train_y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch} (loss={loss})")
            zero_grads(params)
            run_backward(backbone, state, cache, dlogits.astype(logits.dtype), params)
            adam_step(params, adam, cfg.learning_rate)
            epoch_loss += loss
            n_batches += 1
            steps_done += 1

        dev_metric = evaluate(backbone, state, dev_x, dev_y)
        improved = stopper.update(dev_metric, epoch)
        if improved:
            best_snap = snapshot_params(params)
        log.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "dev_metric": dev_metric,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        })
        if stopper.should_stop or (max_steps is not None and steps_done >= max_steps):
            break

    restore_params(params, best_snap)
    return state, float(stopper.best), log


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpace:
    learning_rates: tuple[float, ...]
    batch_sizes: tuple[int, ...]
    ranks: tuple[int, ...] = (0,)  # rank or prefix length, method-dependent; 0 = n/a

    def __post_init__(self) -> None:
        if not (self.learning_rates and self.batch_sizes and self.ranks):
            raise ConfigError("grid axes must be non-empty")


def config_for_method(method: str, rank: int, model: ModelConfig) -> PeftConfig:
    """Build a method config from a CLI-style method name and a rank/prefix value."""
    from . import peft as m

    if method == "aot-kron":
        a, b = kron_grid(model.vocab_size)
        return m.AotKron(a=a, b=b, r=max(rank, 1))
    if method == "aot-fc":
        return m.AotFC(r=max(rank, 1))
    if method == "ptv1":
        return m.PTv1(p=rank)
    if method == "ptv2":
        return m.PTv2(p=rank)
    if method == "bitfit":
        return m.BitFit()
    if method == "lora":
        return m.LoRA(r=max(rank, 1))
    if method == "adapter":
        return m.Adapter(r=max(rank, 1))
    if method == "full":
        return m.Full()
    raise ConfigError(f"unknown method {method!r}")


def kron_grid(vocab_size: int) -> tuple[int, int]:
    """Smallest near-square factor grid covering the vocabulary."""
    a = int(math.isqrt(vocab_size))
    while vocab_size % a and a > 1:
        a -= 1
    b = vocab_size // a
    if a * b < vocab_size:
        b += 1
    # prefer balanced factors over degenerate 1 x V splits
    if a == 1:
        a = int(math.isqrt(vocab_size))
        b = -(-vocab_size // a)
    return a, b


def grid_search(space: GridSpace, backbone: Backbone, method: str, task: TaskSpec,
                max_epochs: int = 20, patience: int = 5, seed: int = 0,
                max_steps: int | None = None):
    """Exhaustive sweep over the space; returns (ranked cell results, best cell).

    Ties on the dev metric break toward fewer trainable parameters, then lower
    learning rate. Cells that diverge are recorded with status "failed".
    """
    results = []
    cells = list(itertools.product(space.learning_rates, space.batch_sizes, space.ranks))
    for cell_index, (lr, bs, rank) in enumerate(cells):
        peft_cfg = config_for_method(method, rank, backbone.config)
        n_params = count_trainable(peft_cfg, backbone.config)
        cfg = TrainConfig(learning_rate=lr, batch_size=bs, max_epochs=max_epochs,
                          patience=patience, seed=seed + cell_index)
        t0 = time.perf_counter()
        record = {
            "lr": lr, "batch_size": bs, "rank": rank,
            "trainable_params": n_params, "status": "ok",
            "dev_metric": float("-inf"), "state": None,
        }
        try:
            state, best, _log = train_task(backbone, peft_cfg, task, cfg, max_steps=max_steps)
            record["dev_metric"] = best
            record["state"] = state
        except NumericError as exc:
            record["status"] = f"failed: {exc}"
        record["wall_ms"] = (time.perf_counter() - t0) * 1e3
        results.append(record)
    ranked = sorted(results, key=lambda r: (-r["dev_metric"], r["trainable_params"], r["lr"]))
    return ranked, ranked[0]
