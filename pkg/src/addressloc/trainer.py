"""Seeded mini-batch training with Adam and a cosine learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import AlignError, EncoderParams, LossWeights, Vocab, make_batch, total_loss_and_grads
from .geodata import Dataset, Sample, SplitAssignment

logger = logging.getLogger(__name__)

DEFAULT_LR_START = 2.4e-5
DEFAULT_LR_END = 2.4e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_start: float = DEFAULT_LR_START
    lr_end: float = DEFAULT_LR_END
    # tiny encoders tolerate far larger steps than a pre-trained CLIP
    lr_scale: float = 1000.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 0.8
    use_address: bool = True
    use_caption: bool = True
    use_geography: bool = True
    freeze_image: bool = False
    freeze_text: bool = False
    geo_target: str = "raw"
    embed_dim: int = 32
    token_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.geo_target not in ("raw", "inverted"):
            raise ValueError(f"geo_target must be raw or inverted, got {self.geo_target!r}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            self.alpha, self.beta, self.gamma,
            self.use_address, self.use_caption, self.use_geography,
            self.geo_target,
        )


def lr_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from lr_start at step 0 to lr_end at total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    # weighted form keeps both endpoints exact in floating point
    return lr_start * w + lr_end * (1.0 - w)


def make_batches(samples: Sequence[Sample], batch_size: int, epoch: int, seed: int) -> list[list[Sample]]:
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if batch_size > len(samples):
        raise ValueError(f"batch_size {batch_size} exceeds sample count {len(samples)}")
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    # only full batches: the remainder is dropped, which also rules out singletons
    n_full = len(samples) // batch_size
    return [[samples[i] for i in order[k * batch_size : (k + 1) * batch_size]] for k in range(n_full)]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(x: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8) -> np.ndarray:
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.step)
    v_hat = state.v / (1 - beta2**state.step)
    return x - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        return self.epochs + ([{"final": True, **self.final}] if self.final else [])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def epoch_losses(samples: Sequence[Sample], vocab: Vocab, params: EncoderParams, cfg: TrainConfig, epoch: int) -> dict:
    """Mean loss components of ``params`` over the batches of one epoch."""
    weights = cfg.loss_weights()
    rows = []
    for batch in make_batches(samples, cfg.batch_size, epoch, cfg.seed):
        rep = total_loss_and_grads(make_batch(batch, vocab), params, weights, grads=False)
        rows.append(rep.components())
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def train(ds: Dataset, split: SplitAssignment, cfg: TrainConfig = TrainConfig(),
          init: EncoderParams | None = None) -> tuple[EncoderParams, TrainLog]:
    if not split.train:
        raise TrainingError("training split is empty")
    samples = ds.select(split.train)
    vocab = Vocab(ds.vocabulary)
    params = init.copy() if init is not None else EncoderParams.init(
        ds.feature_dim, len(vocab), cfg.embed_dim, cfg.token_dim, cfg.seed
    )
    weights = cfg.loss_weights()
    x = params.flat()
    mask = params.mask(cfg.freeze_image, cfg.freeze_text)
    state = AdamState.zeros(x.size)
    per_epoch = len(make_batches(samples, cfg.batch_size, 0, cfg.seed))
    total_steps = cfg.epochs * per_epoch
    log = TrainLog()
    step = 0
    lr = cfg.lr_start * cfg.lr_scale
    for epoch in range(cfg.epochs):
        rows = []
        for b, batch in enumerate(make_batches(samples, cfg.batch_size, epoch, cfg.seed)):
            current = params.with_flat(x)
            try:
                rep = total_loss_and_grads(make_batch(batch, vocab), current, weights)
            except AlignError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            comps = rep.components()
            if not all(math.isfinite(v) for v in comps.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {comps}")
            lr = cfg.lr_scale * lr_at(step, total_steps, cfg.lr_start, cfg.lr_end)
            x = adam_step(x, rep.gradients * mask, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            rows.append(comps)
            step += 1
        record = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        record.update(epoch=epoch, lr=lr)
        log.epochs.append(record)
        logger.info("epoch %d: %s", epoch, record)
    params = params.with_flat(x)
    log.final = {"epoch": cfg.epochs - 1, **epoch_losses(samples, vocab, params, cfg, cfg.epochs - 1)}
    return params, log


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
