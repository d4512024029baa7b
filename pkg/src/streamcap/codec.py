"""Caption tokenisation, time discretisation and per-segment label grammar.

A segment label reads::

    <start_token> <time_a> <time_b> word word ... <start_token> ... <eos> <pad> ...

where ``(time_a, time_b)`` is ``(start, end)`` or ``(center, duration)``
depending on :attr:`CodecConfig.interval_format`.  Events are assigned to the
segment that contains their end time.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence


class CodecError(ValueError):
    pass


class LabelOverflowError(CodecError):
    """A single event does not fit in the per-segment label budget."""


@dataclass(frozen=True)
class Event:
    start: float
    end: float
    caption: str

    def to_dict(self) -> dict:
        return {"start": float(self.start), "end": float(self.end), "caption": self.caption}


@dataclass
class CodecConfig:
    bins: int = 32
    time_mode: str = "relative"  # relative | absolute
    interval_format: str = "start_end"  # start_end | center_duration
    use_prefix: bool = False
    max_caption_tokens: int = 16
    clip_duration_cap: float = 300.0

    def __post_init__(self):
        if self.bins < 2:
            raise CodecError("bins must be >= 2")
        if self.max_caption_tokens < 4:
            raise CodecError("max_caption_tokens must leave room for start, two times and EOS")
        if self.time_mode not in ("relative", "absolute"):
            raise CodecError(f"unknown time_mode {self.time_mode!r}")
        if self.interval_format not in ("start_end", "center_duration"):
            raise CodecError(f"unknown interval_format {self.interval_format!r}")
        if self.clip_duration_cap <= 0:
            raise CodecError("clip_duration_cap must be positive")

    def scale(self, duration: float) -> float:
        """Time span covered by the bins for a video of this duration."""
        return duration if self.time_mode == "relative" else self.clip_duration_cap

    def bin_width(self, duration: float) -> float:
        return self.scale(duration) / self.bins

    def to_dict(self) -> dict:
        return asdict(self)


PAD, BOS, EOS, SEG_START, UNK = "<pad>", "<bos>", "<eos>", "<start_token>", "<unk>"
PREFIX_WORDS = ("caption", "the", "segment", ":")
_PUNCT = re.compile(r"[^\w\s]")


def normalize_caption(text: str) -> str:
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def tokenize(text: str) -> list[str]:
    return normalize_caption(text).split()


class Vocabulary:
    """Word-level vocabulary with control and time tokens at fixed low ids.

    Layout: ``<pad>=0, <bos>, <eos>, <start_token>, <unk>, <time_0> .. <time_{B-1}>``
    followed by words in sorted order.
    """

    def __init__(self, token_to_id: dict[str, int]):
        ids = sorted(token_to_id.values())
        if ids != list(range(len(ids))):
            raise CodecError("vocabulary ids must be contiguous from 0")
        if token_to_id.get(PAD) != 0:
            raise CodecError("<pad> must have id 0")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in token_to_id.items()}
        self.pad = token_to_id[PAD]
        self.bos = token_to_id[BOS]
        self.eos = token_to_id[EOS]
        self.seg_start = token_to_id[SEG_START]
        self.unk = token_to_id[UNK]
        times = sorted(
            (int(t[6:-1]), i) for t, i in token_to_id.items() if t.startswith("<time_") and t.endswith(">")
        )
        self.bins = len(times)
        self.time_base = times[0][1] if times else -1
        if [b for b, _ in times] != list(range(self.bins)) or any(
            i != self.time_base + b for b, i in times
        ):
            raise CodecError("time tokens must be contiguous")

    @classmethod
    def build(cls, captions: Iterable[str], bins: int) -> "Vocabulary":
        words = set(PREFIX_WORDS)
        for c in captions:
            words.update(tokenize(c))
        specials = [PAD, BOS, EOS, SEG_START, UNK] + [f"<time_{k}>" for k in range(bins)]
        table = {tok: i for i, tok in enumerate(specials)}
        for w in sorted(words):
            table[w] = len(table)
        return cls(table)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def time_token(self, b: int) -> int:
        if not 0 <= b < self.bins:
            raise CodecError(f"time bin {b} outside [0, {self.bins})")
        return self.time_base + b

    def is_time(self, token: int) -> bool:
        return self.time_base <= token < self.time_base + self.bins

    def is_word(self, token: int) -> bool:
        return token >= self.time_base + self.bins or token == self.unk

    def encode_words(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, self.unk) for w in tokenize(text)]

    def decode_words(self, ids: Sequence[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, indent=1, sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


def time_to_bin(t: float, duration: float, cfg: CodecConfig) -> int:
    if t < 0:
        raise CodecError(f"negative time {t}")
    if duration <= 0:
        raise CodecError(f"non-positive duration {duration}")
    scale = cfg.scale(duration)
    t = min(t, scale)
    # guard against k*scale/B landing a hair below the bin edge
    return min(int(math.floor(t / scale * cfg.bins + 1e-9)), cfg.bins - 1)


def bin_to_time(b: int, duration: float, cfg: CodecConfig) -> float:
    """Bin-centre reconstruction."""
    if not 0 <= b < cfg.bins:
        raise CodecError(f"bin {b} outside [0, {cfg.bins})")
    return (b + 0.5) / cfg.bins * cfg.scale(duration)


def token_to_time(token: int, duration: float, cfg: CodecConfig, vocab: Vocabulary) -> float:
    if not vocab.is_time(token):
        raise CodecError(f"token {token} is not a time token")
    return bin_to_time(token - vocab.time_base, duration, cfg)


def segment_index(t: float, T: int, duration: float) -> int:
    """Segment ``i`` with ``i*w <= t < (i+1)*w``; the last segment is closed on the right."""
    w = duration / T
    i = min(max(int(math.floor(t / w)), 0), T - 1)
    while i > 0 and t < i * w:
        i -= 1
    while i < T - 1 and t >= (i + 1) * w:
        i += 1
    return i


def align_events_to_segments(events: Sequence[Event], T: int, duration: float) -> list[list[Event]]:
    out: list[list[Event]] = [[] for _ in range(T)]
    for e in sorted(events, key=lambda e: (e.end, e.start)):
        out[segment_index(e.end, T, duration)].append(e)
    return out


def _event_tokens(e: Event, duration: float, cfg: CodecConfig, vocab: Vocabulary) -> list[int]:
    if cfg.interval_format == "start_end":
        a, b = e.start, e.end
    else:
        a, b = 0.5 * (e.start + e.end), e.end - e.start
    return [
        vocab.seg_start,
        vocab.time_token(time_to_bin(a, duration, cfg)),
        vocab.time_token(time_to_bin(b, duration, cfg)),
    ] + vocab.encode_words(e.caption)


def encode_segment_label(
    events: Sequence[Event], duration: float, cfg: CodecConfig, vocab: Vocabulary, length: int | None = None
) -> list[int]:
    """Token ids for one segment, right-padded with PAD to ``length`` (default ``l``).

    Whole trailing events are dropped when the budget runs out; an event that
    cannot fit even on its own raises :class:`LabelOverflowError`.
    """
    length = cfg.max_caption_tokens if length is None else length
    out: list[int] = []
    for e in sorted(events, key=lambda e: (e.end, e.start)):
        toks = _event_tokens(e, duration, cfg, vocab)
        if len(toks) + 1 > length:
            raise LabelOverflowError(f"event {e.caption!r} needs {len(toks) + 1} tokens, budget {length}")
        if len(out) + len(toks) + 1 > length:
            break
        out.extend(toks)
    out.append(vocab.eos)
    return out + [vocab.pad] * (length - len(out))


class ParsedEvent(NamedTuple):
    event: Event
    first: int  # index of the event's <start_token>
    last: int  # index one past its last token


class ParseResult(NamedTuple):
    events: list[Event]
    dropped: int
    spans: list[ParsedEvent]


def parse_tokens(tokens: Sequence[int], duration: float, cfg: CodecConfig, vocab: Vocabulary) -> ParseResult:
    """Greedy left-to-right parse; malformed fragments are counted and skipped."""
    tokens = [int(t) for t in tokens]
    spans: list[ParsedEvent] = []
    dropped = 0
    i, n = 0, len(tokens)
    while i < n:
        tok = tokens[i]
        if tok in (vocab.eos, vocab.pad):
            break
        if tok != vocab.seg_start:
            # stray material before a start token
            dropped += 1
            while i < n and tokens[i] not in (vocab.seg_start, vocab.eos, vocab.pad):
                i += 1
            continue
        first = i
        j = i + 1
        ok = j + 1 < n and vocab.is_time(tokens[j]) and vocab.is_time(tokens[j + 1])
        if ok:
            j += 2
            words_start = j
            while j < n and tokens[j] not in (vocab.seg_start, vocab.eos, vocab.pad):
                if not vocab.is_word(tokens[j]):
                    ok = False
                j += 1
        else:
            while j < n and tokens[j] not in (vocab.seg_start, vocab.eos, vocab.pad):
                j += 1
        if ok:
            a = token_to_time(tokens[first + 1], duration, cfg, vocab)
            b = token_to_time(tokens[first + 2], duration, cfg, vocab)
            if cfg.interval_format == "start_end":
                start, end = a, b
            else:
                start, end = a - 0.5 * b, a + 0.5 * b
            start = min(max(start, 0.0), duration)
            end = min(max(end, 0.0), duration)
            if end < start:
                ok = False
            else:
                caption = vocab.decode_words(tokens[words_start:j])
                spans.append(ParsedEvent(Event(start, end, caption), first, j))
        if not ok:
            dropped += 1
        i = j
    return ParseResult([s.event for s in spans], dropped, spans)


def decode_tokens_to_events(
    tokens: Sequence[int], duration: float, cfg: CodecConfig, vocab: Vocabulary
) -> tuple[list[Event], int]:
    """Events parsed from a token sequence plus the count of dropped fragments."""
    res = parse_tokens(tokens, duration, cfg, vocab)
    return res.events, res.dropped


def make_prefix(segment: int, T: int, duration: float, cfg: CodecConfig, vocab: Vocabulary) -> list[int]:
    """Decoder prompt for one segment: ``[<bos>]`` or ``caption the segment : <time>``."""
    if not cfg.use_prefix:
        return [vocab.bos]
    words = [vocab.token_to_id[w] for w in PREFIX_WORDS]
    return words + [vocab.time_token(time_to_bin(segment * duration / T, duration, cfg))]


def prefix_length(cfg: CodecConfig) -> int:
    return len(PREFIX_WORDS) + 1 if cfg.use_prefix else 1


def decoder_length(cfg: CodecConfig) -> int:
    """Tokens per segment seen by the decoder: prompt plus label, minus the shift."""
    return cfg.max_caption_tokens + prefix_length(cfg) - 1
