"""Random event sets and the encode/decode round trip used by codec tests."""

from __future__ import annotations

import itertools

import numpy as np

from streamcap.codec import CodecConfig, Event, Vocabulary, align_events_to_segments, encode_segment_label, parse_tokens

WORDS = ["person", "cut", "pour", "the", "bread", "water", "a", "red", "cup", "slowly"]
VARIANTS = [
    CodecConfig(bins=b, time_mode=m, interval_format=f, max_caption_tokens=64, clip_duration_cap=300.0)
    for b, m, f in itertools.product((32, 64, 128), ("relative", "absolute"), ("start_end", "center_duration"))
]
VOCAB = {b: Vocabulary.build([" ".join(WORDS)], b) for b in (32, 64, 128)}


def random_events(rng: np.random.Generator, duration: float, max_events: int = 4) -> list[Event]:
    out = []
    for _ in range(int(rng.integers(0, max_events + 1))):
        a, b = sorted(rng.uniform(0, duration, size=2))
        words = rng.choice(WORDS, size=int(rng.integers(1, 5)))
        out.append(Event(float(a), float(b), " ".join(words)))
    return out


def round_trip(events, duration: float, T: int, cfg: CodecConfig, vocab: Vocabulary):
    decoded, dropped = [], 0
    for seg in align_events_to_segments(events, T, duration):
        res = parse_tokens(encode_segment_label(seg, duration, cfg, vocab), duration, cfg, vocab)
        decoded.extend(res.events)
        dropped += res.dropped
    return decoded, dropped


def check_round_trip(events, duration, T, cfg, vocab) -> str | None:
    """``None`` on success, else a description of the first mismatch."""
    decoded, dropped = round_trip(events, duration, T, cfg, vocab)
    ref = sorted(events, key=lambda e: (e.end, e.start))
    if dropped or len(decoded) != len(ref):
        return f"count {len(decoded)} vs {len(ref)}, dropped {dropped}"
    w = cfg.bin_width(duration)
    for d, e in zip(decoded, ref):
        if d.caption != e.caption:
            return f"caption {d.caption!r} vs {e.caption!r}"
        if abs(d.start - e.start) > w + 1e-9 or abs(d.end - e.end) > w + 1e-9:
            return f"interval ({d.start:.3f},{d.end:.3f}) vs ({e.start:.3f},{e.end:.3f}), bin width {w:.3f}"
    return None
