"""Synthetic dense-captioning corpus with a closed template vocabulary.

Each frame is ``onehot(verb) ++ onehot(object) + noise`` while an event is
active and pure noise otherwise; the event caption is
``"person <verb> the <object>"``.  Event boundaries sit on the frame grid so
that a noiseless video determines its events exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .codec import Event

DATASET_FORMAT = 1

DEFAULT_VERBS = ("cut", "pour", "stir", "wash", "open", "fold")
DEFAULT_OBJECTS = ("bread", "water", "soup", "cup", "box", "towel")


class SynthSpecError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class SynthSpec:
    verbs: tuple[str, ...] = DEFAULT_VERBS
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    duration: float = 32.0
    frame_rate: float = 1.0
    events_per_video: tuple[int, int] = (1, 4)
    event_length: tuple[float, float] = (2.0, 8.0)
    gap: tuple[float, float] = (1.0, 6.0)
    noise_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.verbs = tuple(self.verbs)
        self.objects = tuple(self.objects)
        self.events_per_video = tuple(int(v) for v in self.events_per_video)
        self.event_length = tuple(float(v) for v in self.event_length)
        self.gap = tuple(float(v) for v in self.gap)

    @property
    def frame_dim(self) -> int:
        return len(self.verbs) + len(self.objects)

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthExample:
    id: str
    duration: float
    features: np.ndarray  # [L, frame_dim]
    events: list[Event] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "duration": float(self.duration),
            "features": np.round(self.features.astype(np.float64), 6).tolist(),
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SynthExample":
        return cls(
            id=str(rec["id"]),
            duration=float(rec["duration"]),
            features=np.asarray(rec["features"], dtype=np.float64),
            events=[Event(float(e["start"]), float(e["end"]), str(e["caption"])) for e in rec["events"]],
        )


def caption_for(verb: str, obj: str) -> str:
    return f"person {verb} the {obj}"


def _check(spec: SynthSpec) -> None:
    if len(spec.verbs) * len(spec.objects) < 2:
        raise SynthSpecError("need at least two verb/object classes")
    lo, hi = spec.events_per_video
    if not 0 <= lo <= hi:
        raise SynthSpecError(f"bad events_per_video range {spec.events_per_video}")
    if spec.event_length[0] <= 0 or spec.event_length[0] > spec.event_length[1]:
        raise SynthSpecError(f"bad event_length range {spec.event_length}")
    if spec.gap[0] < 0 or spec.gap[0] > spec.gap[1]:
        raise SynthSpecError(f"bad gap range {spec.gap}")
    if spec.frame_rate <= 0 or spec.num_frames < 1:
        raise SynthSpecError("frame_rate and duration must give at least one frame")
    need = lo * spec.event_length[0] + max(lo - 1, 0) * spec.gap[0]
    if need > spec.duration:
        raise SynthSpecError(f"{lo} events need at least {need}s but duration is {spec.duration}s")


def _grid_uniform(rng: np.random.Generator, lo: float, hi: float, fr: float, minimum: int = 0) -> int:
    """Uniform draw from ``[lo, hi]`` seconds, in whole frames."""
    a = max(int(np.ceil(lo * fr - 1e-9)), minimum)
    b = max(int(np.floor(hi * fr + 1e-9)), a)
    return int(rng.integers(a, b + 1))


def _layout(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Event frame intervals ``[a, b)``; retries until the draw fits the video."""
    L, fr = spec.num_frames, spec.frame_rate
    lo, hi = spec.events_per_video
    for _ in range(200):
        n = int(rng.integers(lo, hi + 1))
        lengths = [_grid_uniform(rng, *spec.event_length, fr, minimum=1) for _ in range(n)]
        gaps = [_grid_uniform(rng, *spec.gap, fr) for _ in range(max(n - 1, 0))]
        slack = L - sum(lengths) - sum(gaps)
        if slack < 0:
            continue
        t = int(rng.integers(0, slack + 1))
        spans = []
        for i, length in enumerate(lengths):
            spans.append((t, t + length))
            t += length + (gaps[i] if i < len(gaps) else 0)
        return spans
    # the minimum layout always fits (checked in _check); fall back to it
    n = lo
    a = _grid_uniform(rng, spec.event_length[0], spec.event_length[0], fr, minimum=1)
    g = _grid_uniform(rng, spec.gap[0], spec.gap[0], fr)
    return [(i * (a + g), i * (a + g) + a) for i in range(n)]


def generate_one(spec: SynthSpec, index: int) -> SynthExample:
    rng = np.random.default_rng([spec.seed, index])
    nv, no = len(spec.verbs), len(spec.objects)
    L = spec.num_frames
    feats = np.zeros((L, nv + no))
    events = []
    for a, b in _layout(spec, rng):
        v, o = int(rng.integers(nv)), int(rng.integers(no))
        feats[a:b, v] = 1.0
        feats[a:b, nv + o] = 1.0
        events.append(Event(a / spec.frame_rate, b / spec.frame_rate, caption_for(spec.verbs[v], spec.objects[o])))
    if spec.noise_std > 0:
        feats = feats + rng.normal(0.0, spec.noise_std, size=feats.shape)
    return SynthExample(f"synth-{spec.seed}-{index:06d}", spec.duration, feats, events)


def generate(spec: SynthSpec, count: int, start: int = 0) -> list[SynthExample]:
    """``count`` videos, deterministic in ``(spec.seed, index)``."""
    _check(spec)
    return [generate_one(spec, start + i) for i in range(count)]


def bayes_readout(example: SynthExample, spec: SynthSpec, threshold: float = 0.5) -> list[Event]:
    """Skyline oracle: per-frame argmax class, run-length grouped into events.

    A frame counts as active when both its best verb and best object
    coordinates exceed ``threshold`` (the midpoint between 0 and 1).
    """
    nv = len(spec.verbs)
    x = np.asarray(example.features)
    fr = len(x) / example.duration
    v = x[:, :nv].argmax(axis=1)
    o = x[:, nv:].argmax(axis=1)
    active = (x[np.arange(len(x)), v] > threshold) & (x[np.arange(len(x)), nv + o] > threshold)
    events, i = [], 0
    while i < len(x):
        if not active[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(x) and active[j + 1] and v[j + 1] == v[i] and o[j + 1] == o[i]:
            j += 1
        events.append(Event(i / fr, (j + 1) / fr, caption_for(spec.verbs[v[i]], spec.objects[o[i]])))
        i = j + 1
    return events


# ------------------------------------------------------------------ JSONL io


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def write_dataset(examples: Iterable[SynthExample], path) -> None:
    def recs():
        for ex in examples:
            rec = ex.to_record()
            rec["format_version"] = DATASET_FORMAT
            yield rec

    write_jsonl(recs(), path)


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def read_dataset(path) -> list[SynthExample]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(SynthExample.from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


def validate_dataset(path) -> dict:
    """Schema and sanity checks; returns summary counts or raises :class:`DatasetError`."""
    n, widths, n_frames, durations = 0, set(), [], []
    caps, words = [], []
    seen = set()
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        for key, kind in (("id", str), ("duration", (int, float)), ("features", list), ("events", list)):
            if key not in rec:
                raise DatasetError(f"{where}: missing field {key!r}")
            if not isinstance(rec[key], kind):
                raise DatasetError(f"{where}: field {key!r} has wrong type")
        vid, dur = rec["id"], float(rec["duration"])
        if vid in seen:
            raise DatasetError(f"{where}: duplicate video id {vid!r}")
        seen.add(vid)
        if dur <= 0:
            raise DatasetError(f"{where}: video {vid!r} has non-positive duration")
        rows = rec["features"]
        if not rows or not all(isinstance(r, list) for r in rows):
            raise DatasetError(f"{where}: video {vid!r} features must be a non-empty list of rows")
        row_widths = {len(r) for r in rows}
        if len(row_widths) != 1:
            raise DatasetError(f"{where}: video {vid!r} has ragged feature rows")
        widths |= row_widths
        prev_start = -np.inf
        n_words = 0
        for k, e in enumerate(rec["events"]):
            try:
                s, t, c = float(e["start"]), float(e["end"]), e["caption"]
            except (KeyError, TypeError, ValueError):
                raise DatasetError(f"{where}: video {vid!r} event {k} malformed") from None
            if not isinstance(c, str):
                raise DatasetError(f"{where}: video {vid!r} event {k} caption is not a string")
            if not 0 <= s <= t <= dur:
                raise DatasetError(f"{where}: video {vid!r} event {k} violates 0 <= start <= end <= duration")
            if s < prev_start:
                raise DatasetError(f"{where}: video {vid!r} events not ordered by start time")
            prev_start = s
            n_words += len(c.split())
        n += 1
        n_frames.append(len(rows))
        durations.append(dur)
        caps.append(len(rec["events"]))
        words.append(n_words)
    if n == 0:
        raise DatasetError(f"{path}: no records")
    if len(widths) > 1:
        raise DatasetError(f"{path}: feature widths differ across videos: {sorted(widths)}")
    return {
        "ok": True,
        "videos": n,
        "frame_dim": widths.pop(),
        "frames_min": int(min(n_frames)),
        "frames_max": int(max(n_frames)),
        "duration_mean": float(np.mean(durations)),
        "gt_caption_count_mean": float(np.mean(caps)),
        "gt_word_count_mean": float(np.mean(words)),
    }
