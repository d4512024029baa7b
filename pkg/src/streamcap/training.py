"""Teacher-forced training of the factorized captioner."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .codec import (
    CodecConfig,
    LabelOverflowError,
    Vocabulary,
    align_events_to_segments,
    encode_segment_label,
    make_prefix,
    prefix_length,
)
from .inference import DecodeConfig, frames_to_grid, stream_video
from .metrics import MetricsReport, evaluate
from .model import FactorizedCaptioner
from .synth import SynthExample

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_smoothing: float = 0.1
    dropout: float = 0.1
    weight_decay: float = 1e-5
    grad_clip: float = 1.0
    batch_size: int = 16
    steps: int = 3000
    warmup_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "label_smoothing", "dropout", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must not exceed steps")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` then constant (``step`` counts from 1)."""
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr


@dataclass
class Batch:
    grids: np.ndarray  # [b, T, S, F]
    inputs: np.ndarray  # [b, T*l] decoder input ids
    labels: np.ndarray  # [b, T*l] targets; PAD (= ignore) on prompt and padding positions
    skipped: int = 0


def segment_block(
    events_per_segment, segment: int, T: int, duration: float, codec: CodecConfig, vocab: Vocabulary, l: int
) -> tuple[list[int], list[int]]:
    """Decoder input and target ids for one segment block of length ``l``."""
    prompt = make_prefix(segment, T, duration, codec, vocab)
    p = len(prompt)
    label = encode_segment_label(events_per_segment, duration, codec, vocab, length=l - p + 1)
    inputs = (prompt + label)[:l]
    targets = [vocab.pad] * (p - 1) + label
    return inputs, targets


def build_batch(
    examples: Sequence[SynthExample], model_cfg, codec: CodecConfig, vocab: Vocabulary
) -> Batch:
    """Frames and teacher-forcing ids; examples whose labels overflow are skipped."""
    T, S, l = model_cfg.T, model_cfg.S, model_cfg.l
    grids, inputs, labels, skipped = [], [], [], 0
    for ex in examples:
        try:
            per_seg = align_events_to_segments(ex.events, T, ex.duration)
            blocks = [segment_block(per_seg[i], i, T, ex.duration, codec, vocab, l) for i in range(T)]
        except LabelOverflowError as exc:
            log.warning("skipping %s: %s", ex.id, exc)
            skipped += 1
            continue
        grids.append(frames_to_grid(ex.features, T, S))
        inputs.append(sum((b[0] for b in blocks), []))
        labels.append(sum((b[1] for b in blocks), []))
    dtype = tt.get_default_dtype()
    F = model_cfg.frame_dim
    return Batch(
        np.asarray(grids, dtype=dtype).reshape(-1, T, S, F),
        np.asarray(inputs, dtype=np.int64).reshape(-1, T * l),
        np.asarray(labels, dtype=np.int64).reshape(-1, T * l),
        skipped,
    )


def batch_loss(model: FactorizedCaptioner, batch: Batch, cfg: TrainConfig, pad: int) -> tt.Tensor:
    logits = model(batch.grids, batch.inputs, "segment")
    V = logits.shape[-1]
    return tt.cross_entropy(tt.reshape(logits, (-1, V)), batch.labels.reshape(-1), cfg.label_smoothing, ignore_id=pad)


def token_losses(model: FactorizedCaptioner, batch: Batch, pad: int) -> np.ndarray:
    """Unsmoothed per-position NLL ``[b, T*l]`` (0 at ignored positions)."""
    with tt.no_grad():
        logits = model(batch.grids, batch.inputs, "segment").data
    b, n, V = logits.shape
    tgt = batch.labels.reshape(-1)
    nll = tt.token_nll(logits.reshape(-1, V), tgt).reshape(b, n)
    return np.where(batch.labels != pad, nll, 0.0)


def teacher_forced_accuracy(model: FactorizedCaptioner, batch: Batch, pad: int, chunk: int = 32) -> float:
    """Fraction of non-ignored positions whose argmax equals the target."""
    hit = total = 0
    with tt.no_grad():
        for i in range(0, len(batch.inputs), chunk):
            logits = model(batch.grids[i : i + chunk], batch.inputs[i : i + chunk], "segment").data
            tgt = batch.labels[i : i + chunk]
            keep = tgt != pad
            hit += int(((logits.argmax(-1) == tgt) & keep).sum())
            total += int(keep.sum())
    return hit / max(total, 1)


class Adam:
    """Adam with decoupled weight decay on matrices (biases and norms exempt)."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if lr == 0.0:
                continue
            if c.weight_decay and p.ndim >= 2:
                p.data *= 1.0 - lr * c.weight_decay
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)).astype(p.dtype)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))


def train_step(model: FactorizedCaptioner, batch: Batch, opt: Adam, step: int, pad: int) -> tuple[float, float, float]:
    """One optimisation step; returns ``(loss, lr, grad_norm)`` before clipping."""
    cfg = opt.cfg
    model.train()
    model.zero_grad()
    loss = batch_loss(model, batch, cfg, pad)
    lr = cfg.lr_at(step)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step} (lr={lr:g})")
    tt.backward(loss)
    norm = global_grad_norm(opt.params)
    if not math.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient at step {step} (lr={lr:g}, loss={value:.4g})")
    if cfg.grad_clip and norm > cfg.grad_clip:
        scale = cfg.grad_clip / (norm + 1e-12)
        for p in opt.params:
            if p.grad is not None:
                p.grad *= scale
    opt.step(lr)
    return value, lr, norm


def train(
    model: FactorizedCaptioner,
    examples: Sequence[SynthExample],
    codec: CodecConfig,
    vocab: Vocabulary,
    cfg: TrainConfig,
    log_fh=None,
    callback: Callable[[int, float], None] | None = None,
) -> list[dict]:
    """Run ``cfg.steps`` steps on batches drawn with ``cfg.seed``; returns the log rows."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg)
    full = build_batch(examples, model.cfg, codec, vocab)
    if len(full.inputs) == 0:
        raise ValueError("no usable training examples")
    if full.skipped:
        log.warning("%d examples skipped for label overflow", full.skipped)
    rows = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(full.inputs), size=min(cfg.batch_size, len(full.inputs)), replace=False)
        batch = Batch(full.grids[idx], full.inputs[idx], full.labels[idx])
        loss, lr, norm = train_step(model, batch, opt, step, vocab.pad)
        row = {"step": step, "loss": loss, "lr": lr, "grad_norm": norm}
        rows.append(row)
        if log_fh is not None:
            log_fh.write(json.dumps(row) + "\n")
        if callback is not None:
            callback(step, loss)
    model.eval()
    return rows


def predict_dataset(
    model: FactorizedCaptioner,
    examples: Sequence[SynthExample],
    codec: CodecConfig,
    vocab: Vocabulary,
    dcfg: DecodeConfig,
) -> tuple[dict, int]:
    """Streaming predictions per video id and the total dropped-fragment count."""
    model.eval()
    preds, dropped = {}, 0
    for ex in examples:
        session = None
        for session, _ in stream_video(model, vocab, codec, dcfg, ex.features, ex.duration, ex.id):
            pass
        preds[ex.id] = [s.event for s in session.emitted] if session else []
        dropped += session.dropped if session else 0
    return preds, dropped


def evaluate_checkpoint(
    model: FactorizedCaptioner,
    examples: Sequence[SynthExample],
    codec: CodecConfig,
    vocab: Vocabulary,
    dcfg: DecodeConfig,
) -> MetricsReport:
    preds, dropped = predict_dataset(model, examples, codec, vocab, dcfg)
    return evaluate(preds, {ex.id: ex.events for ex in examples}, dropped)


def prompt_positions(codec: CodecConfig) -> int:
    return prefix_length(codec) - 1
