"""Online decoding: push segments one at a time and emit localised captions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as tt
from .codec import CodecConfig, Event, Vocabulary, decoder_length, make_prefix, parse_tokens, prefix_length
from .metrics import temporal_iou
from .model import FactorizedCaptioner, MemoryState

PREDICTION_FORMAT = 1


@dataclass
class DecodeConfig:
    strategy: str = "beam"  # greedy | beam
    beam_width: int = 24
    num_samples: int = 1
    temperature: float = 1.0
    max_tokens: int | None = None
    nms_iou: float = 0.7

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam_width < 1 or self.num_samples < 1:
            raise ValueError("beam_width and num_samples must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.nms_iou <= 1:
            raise ValueError("nms_iou must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


DECODE_PRESETS = {
    "default": DecodeConfig(),
    "greedy": DecodeConfig(strategy="greedy", beam_width=1),
    "beam24": DecodeConfig(strategy="beam", beam_width=24, num_samples=24),
    "samples18": DecodeConfig(strategy="beam", beam_width=18, num_samples=18, temperature=1.0),
}


class ScoredEvent(NamedTuple):
    event: Event
    score: float
    segment: int = -1


# ---------------------------------------------------------------------- NMS


def temporal_nms(items: Sequence[ScoredEvent], iou_thresh: float = 0.7) -> list[ScoredEvent]:
    """Greedy suppression: keep an event iff its IoU with every kept one is <= threshold.

    Candidates are visited by descending score, then earlier start, then caption.
    """
    order = sorted(items, key=lambda s: (-s.score, s.event.start, s.event.caption))
    kept: list[ScoredEvent] = []
    for cand in order:
        if all(temporal_iou(cand.event, k.event) <= iou_thresh for k in kept):
            kept.append(cand)
    return kept


# -------------------------------------------------------------- beam search


class Hypothesis(NamedTuple):
    tokens: list[int]
    logprob: float
    token_logprobs: list[float]

    @property
    def score(self) -> float:
        return self.logprob / max(len(self.tokens), 1)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    return tt.log_softmax(np.asarray(x, dtype=np.float64))


def beam_search(
    next_logits: Callable[[list[list[int]]], np.ndarray],
    prefix: Sequence[int],
    max_new: int,
    eos: int,
    width: int = 4,
    temperature: float = 1.0,
    num_samples: int = 1,
) -> list[Hypothesis]:
    """Length-normalised beam search.

    ``next_logits`` maps a batch of equal-length token lists to ``[n, V]``
    next-token logits.  At every step the ``width`` best expansions of the
    live beams survive; those ending in ``eos`` (or hitting ``max_new``) are
    retired to the finished pool.  The pool is ranked by mean token
    log-probability and the best ``num_samples`` are returned.
    """
    alive = [Hypothesis([], 0.0, [])]
    finished: list[Hypothesis] = []
    prefix = list(prefix)
    while alive:
        logp = _log_softmax(np.asarray(next_logits([prefix + h.tokens for h in alive])) / temperature)
        total = np.array([h.logprob for h in alive])[:, None] + logp
        flat = np.argsort(-total, axis=None, kind="stable")[:width]
        V = logp.shape[1]
        nxt = []
        for f in flat:
            i, v = divmod(int(f), V)
            h = alive[i]
            new = Hypothesis(h.tokens + [v], float(total[i, v]), h.token_logprobs + [float(logp[i, v])])
            if v == eos or len(new.tokens) >= max_new:
                finished.append(new)
            else:
                nxt.append(new)
        alive = nxt
    finished.sort(key=lambda h: -h.score)
    return finished[:num_samples]


def greedy_search(
    next_logits: Callable[[list[list[int]]], np.ndarray],
    prefix: Sequence[int],
    max_new: int,
    eos: int,
    temperature: float = 1.0,
) -> Hypothesis:
    tokens: list[int] = []
    lps: list[float] = []
    while len(tokens) < max_new:
        logp = _log_softmax(np.asarray(next_logits([list(prefix) + tokens]))[0] / temperature)
        v = int(np.argmax(logp))
        tokens.append(v)
        lps.append(float(logp[v]))
        if v == eos:
            break
    return Hypothesis(tokens, float(sum(lps)), lps)


# ----------------------------------------------------------- model plumbing


def segment_logits_fn(model: FactorizedCaptioner, memory_slice: np.ndarray, pad: int):
    """Next-token logits for prompts decoded against one segment's memory."""
    l = model.cfg.l
    mem = tt.Tensor(np.asarray(memory_slice)[None, None])

    def fn(seqs: list[list[int]]) -> np.ndarray:
        n = len(seqs)
        pos = len(seqs[0]) - 1
        ids = np.full((n, l), pad, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        memory = tt.Tensor(np.broadcast_to(mem.data, (n,) + mem.shape[1:]))
        with tt.no_grad():
            logits = model.decoder_forward(ids, memory, "segment")
        return logits.data[:, pos]

    return fn


def decode_segment(
    model: FactorizedCaptioner,
    memory_slice: np.ndarray,
    prompt: Sequence[int],
    vocab: Vocabulary,
    dcfg: DecodeConfig,
) -> list[Hypothesis]:
    max_new = model.cfg.l - len(prompt) + 1
    if dcfg.max_tokens is not None:
        max_new = min(max_new, dcfg.max_tokens)
    fn = segment_logits_fn(model, memory_slice, vocab.pad)
    if dcfg.strategy == "greedy":
        return [greedy_search(fn, prompt, max_new, vocab.eos, dcfg.temperature)]
    return beam_search(fn, prompt, max_new, vocab.eos, dcfg.beam_width, dcfg.temperature, dcfg.num_samples)


def greedy_decode_offline(
    model: FactorizedCaptioner,
    frames: np.ndarray,
    prompts: np.ndarray,
    vocab: Vocabulary,
) -> np.ndarray:
    """Greedy decoding of all segments at once through the single masked pass.

    ``frames`` is ``[b, T, S, F]`` and ``prompts`` ``[b, T, p]``; returns
    generated ids ``[b, T, l - p + 1]`` with PAD after each segment's EOS.
    """
    b, T = frames.shape[:2]
    l, p = model.cfg.l, prompts.shape[-1]
    max_new = l - p + 1
    ids = np.full((b, T, l), vocab.pad, dtype=np.int64)
    ids[..., :p] = prompts
    out = np.full((b, T, max_new), vocab.pad, dtype=np.int64)
    done = np.zeros((b, T), dtype=bool)
    with tt.no_grad():
        memory = model.memory(frames)
        for k in range(max_new):
            logits = model.decoder_forward(ids.reshape(b, T * l), memory, "segment").data.reshape(b, T, l, -1)
            nxt = np.argmax(logits[:, :, p - 1 + k], axis=-1)
            nxt = np.where(done, vocab.pad, nxt)
            out[..., k] = nxt
            done |= nxt == vocab.eos
            if p + k < l:
                ids[..., p + k] = nxt
            if done.all():
                break
    return out


def frames_to_grid(features: np.ndarray, T: int, S: int) -> np.ndarray:
    """``[L, F] -> [T, S, F]``, nearest-frame resampling when ``L != T*S``."""
    x = np.asarray(features)
    L = x.shape[0]
    if L != T * S:
        idx = np.minimum(((np.arange(T * S) + 0.5) * L / (T * S)).astype(int), L - 1)
        x = x[idx]
    return x.reshape(T, S, x.shape[-1])


# ------------------------------------------------------------------ session


@dataclass
class StreamSession:
    """Per-stream decoding state; feed segments with :meth:`push_segment`."""

    model: FactorizedCaptioner
    vocab: Vocabulary
    codec: CodecConfig
    decode: DecodeConfig
    duration: float
    video_id: str = ""
    memory: MemoryState = field(default_factory=MemoryState)
    emitted: list[ScoredEvent] = field(default_factory=list)
    pending: list[ScoredEvent] = field(default_factory=list)
    segment_tokens: list[list[int]] = field(default_factory=list)
    dropped: int = 0

    @property
    def segments_consumed(self) -> int:
        return self.memory.t_seen

    def push_segment(self, frames: np.ndarray) -> list[ScoredEvent]:
        T = self.model.cfg.T
        i = self.memory.t_seen
        if i >= T:
            raise ValueError(f"session already consumed all {T} segments")
        mem = self.model.push_memory(self.memory, frames)
        prompt = make_prefix(i, T, self.duration, self.codec, self.vocab)
        hyps = decode_segment(self.model, mem, prompt, self.vocab, self.decode)
        self.segment_tokens.append(hyps[0].tokens if hyps else [])
        candidates = []
        for h in hyps:
            parsed = parse_tokens(h.tokens, self.duration, self.codec, self.vocab)
            self.dropped += parsed.dropped
            for span in parsed.spans:
                lp = h.token_logprobs[span.first : span.last]
                candidates.append(ScoredEvent(span.event, float(np.mean(lp)), i))
        return self.admit(candidates, i)

    def admit(self, candidates: Sequence[ScoredEvent], i: int) -> list[ScoredEvent]:
        """Session-wide NMS for segment ``i``'s candidates; returns what is emitted now."""
        # Survivors wait one segment so a better-scored duplicate decoded from
        # the next segment can still win; emitted events are never revisited.
        kept = []
        for cand in sorted(self.pending + candidates, key=lambda s: (-s.score, s.event.start, s.event.caption)):
            if all(temporal_iou(cand.event, k.event) <= self.decode.nms_iou for k in self.emitted + kept):
                kept.append(cand)
        fresh = [k for k in kept if k.segment < i]
        self.pending = [k for k in kept if k.segment == i]
        self.emitted.extend(fresh)
        if i == self.model.cfg.T - 1:
            fresh += self.finish()
        return fresh

    def finish(self) -> list[ScoredEvent]:
        """Emit whatever is still held back (end of stream)."""
        out, self.pending = self.pending, []
        self.emitted.extend(out)
        return out

    def records(self, events: Sequence[ScoredEvent]) -> Iterator[dict]:
        for s in events:
            yield {
                "format_version": PREDICTION_FORMAT,
                "video_id": self.video_id,
                "segment_index": s.segment,
                "start": round(float(s.event.start), 6),
                "end": round(float(s.event.end), 6),
                "caption": s.event.caption,
                "score": round(float(s.score), 6),
            }


def stream_video(
    model: FactorizedCaptioner,
    vocab: Vocabulary,
    codec: CodecConfig,
    decode: DecodeConfig,
    features: np.ndarray,
    duration: float,
    video_id: str = "",
) -> Iterator[tuple[StreamSession, list[ScoredEvent]]]:
    """Feed a whole video segment by segment, yielding emissions as they happen."""
    grid = frames_to_grid(features, model.cfg.T, model.cfg.S)
    session = StreamSession(model, vocab, codec, decode, duration, video_id)
    for seg in grid:
        yield session, session.push_segment(seg)


def check_model_codec(model: FactorizedCaptioner, codec: CodecConfig, vocab: Vocabulary) -> None:
    if model.cfg.l != decoder_length(codec):
        raise ValueError(f"model l={model.cfg.l} but codec implies {decoder_length(codec)}")
    if model.cfg.vocab_size != len(vocab):
        raise ValueError(f"model vocab {model.cfg.vocab_size} != vocabulary size {len(vocab)}")
    if vocab.bins != codec.bins:
        raise ValueError("vocabulary and codec disagree on the number of time bins")
    if prefix_length(codec) > model.cfg.l:
        raise ValueError("prompt longer than decoder block")
