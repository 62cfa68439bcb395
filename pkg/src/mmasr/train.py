"""Teacher-forced training with Adam, clipping and early stopping on dev WER."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .errors import InputError, TrainingDivergence
from .numcore import Tape


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 2
    clip_norm: float = 5.0
    probabilities: tuple = (0.0, 0.2, 0.4, 0.6)
    fill: str = "silence"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    halve_on_plateau: bool = False
    max_len: int = 30
    model: M.ModelConfig = field(default_factory=M.ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.ModelConfig(**self.model)
        self.probabilities = tuple(float(p) for p in self.probabilities)
        if self.patience < 1:
            raise InputError(f"patience must be >= 1, got {self.patience}")
        if not self.clip_norm > 0:
            raise InputError(f"clip norm must be positive, got {self.clip_norm}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise InputError("batch size must be >= 1 and max_epochs >= 0")
        for p in self.probabilities:
            if not 0.0 <= p <= 1.0:
                raise InputError(f"mask probability must be in [0, 1], got {p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["probabilities"] = list(self.probabilities)
        return d


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            # zero gradients from a fresh state leave m = 0, hence no update
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def length_batches(lengths, batch_size: int, rng) -> list:
    """Group indices of similar length, with random tie order and batch order."""
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[s : s + batch_size].tolist() for s in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[k] for k in perm]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_wer: float | None
    dev_rr: float | None
    lr: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    wall_clock_s: float = 0.0

    @property
    def best_dev_wer(self) -> float | None:
        return None if self.best_epoch is None else self.epochs[self.best_epoch].dev_wer

    def to_dict(self, with_time: bool = False) -> dict:
        d = {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}
        if with_time:
            d["wall_clock_s"] = self.wall_clock_s
        return d


@dataclass
class TrainResult:
    model: M.FusionModel
    checkpoint: bytes
    log: TrainLog


def _batch(model, utts, idx):
    us = [utts[i] for i in idx]
    vis = [u.visual for u in us] if model.kind.multimodal else None
    return M.make_batch(model, [u.frames for u in us], vis, [u.words for u in us])


def train_model(model: M.FusionModel, train_corpus, dev_corpus, config: TrainConfig, evaluate_fn=None, log=None) -> TrainResult:
    """Train ``model`` in place; returns it restored to the best-dev-WER epoch.

    ``evaluate_fn(model, corpus) -> EvalReport`` scores the dev set once per
    epoch (default: greedy decoding).  A non-finite loss raises
    :class:`TrainingDivergence` carrying the last good checkpoint.
    """
    from .metrics import evaluate

    utts = list(train_corpus.utterances)
    if not utts:
        raise InputError("training corpus is empty")
    evaluate_fn = evaluate_fn or (lambda m, c: evaluate(m, c, max_len=config.max_len))
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    tlog = TrainLog()
    start = time.perf_counter()
    best_ckpt = M.checkpoint_bytes(model)
    last_good = best_ckpt
    best_wer = math.inf
    stale = 0
    lengths = [u.n_frames for u in utts]
    grads = [t for t in model.params.values()]
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([config.seed, epoch, 7])
        total, count = 0.0, 0
        for idx in length_batches(lengths, config.batch_size, rng):
            batch = _batch(model, utts, idx)
            model.zero_grad()
            with Tape() as tape:
                loss = M.batch_loss(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite loss {value} in epoch {epoch}", last_good=last_good)
            tape.backward(loss)
            clip_global_norm([t.grad for t in grads], config.clip_norm)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        last_good = M.checkpoint_bytes(model)
        dev_wer = dev_rr = None
        if dev_corpus is not None and len(dev_corpus):
            rep = evaluate_fn(model, dev_corpus)
            dev_wer = rep.wer.value
            dev_rr = rep.recovery.percent
        tlog.epochs.append(EpochLog(epoch, total / count, dev_wer, dev_rr, opt.lr))
        if log is not None:
            log(tlog.epochs[-1])
        score = dev_wer if dev_wer is not None else total / count
        if score < best_wer:
            best_wer, stale = score, 0
            best_ckpt = last_good
            tlog.best_epoch = epoch
        else:
            stale += 1
            if config.halve_on_plateau:
                opt.lr *= 0.5
            if stale >= config.patience:
                tlog.stopped_early = True
                break
    tlog.wall_clock_s = time.perf_counter() - start
    best = M.model_from_bytes(best_ckpt)
    model.load_arrays(best.state_arrays())
    return TrainResult(model, best_ckpt, tlog)


def train(train_corpus, dev_corpus, config: TrainConfig, vocab: M.Vocabulary | None = None, evaluate_fn=None, log=None) -> TrainResult:
    """Build a fresh model from ``config`` and train it."""
    if vocab is None:
        vocab = M.Vocabulary(train_corpus.words())
    model = M.FusionModel(config.model, vocab, seed=config.seed)
    return train_model(model, train_corpus, dev_corpus, config, evaluate_fn, log)


def compare_schemes(data, setup, schemes=("none", "entity", "rand"), kind="HierAttnDF", log=None) -> dict:
    """Scheme x category RR table; see :func:`mmasr.experiments.compare_schemes`."""
    from .experiments import compare_schemes as run

    return run(data, setup, schemes, kind, log)
