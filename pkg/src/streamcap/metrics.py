"""Dense-captioning metrics: localisation F1, CIDEr-D, SODA-style score, caption stats."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .codec import Event, tokenize

F1_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)


def temporal_iou(a: Event, b: Event) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(preds: Sequence[Event], gts: Sequence[Event]) -> np.ndarray:
    return np.array([[temporal_iou(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))


# ------------------------------------------------------------------ F1


def greedy_match(ious: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """One-to-one pairs taken in order of descending IoU while IoU >= threshold."""
    pairs = sorted(
        ((ious[i, j], i, j) for i in range(ious.shape[0]) for j in range(ious.shape[1]) if ious[i, j] >= threshold),
        key=lambda x: (-x[0], x[1], x[2]),
    )
    used_p, used_g, out = set(), set(), []
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            out.append((i, j))
    return out


def optimal_match_count(ious: np.ndarray, threshold: float) -> int:
    """Maximum bipartite matching size (small instances only)."""
    from scipy.optimize import linear_sum_assignment

    if ious.size == 0:
        return 0
    ok = (ious >= threshold).astype(float)
    r, c = linear_sum_assignment(-ok)
    return int(ok[r, c].sum())


def precision_recall(preds, gts, threshold: float, optimal: bool = False) -> tuple[float, float]:
    if not preds and not gts:
        return 1.0, 1.0
    if not preds or not gts:
        return 0.0, 0.0
    ious = iou_matrix(preds, gts)
    m = optimal_match_count(ious, threshold) if optimal else len(greedy_match(ious, threshold))
    return m / len(preds), m / len(gts)


def _f(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def f1_localization(preds: Sequence[Event], gts: Sequence[Event], thresholds=F1_THRESHOLDS, optimal: bool = False) -> dict:
    """Per-threshold precision/recall/F1 for one video and the mean F1."""
    per = {}
    for th in thresholds:
        p, r = precision_recall(list(preds), list(gts), th, optimal)
        per[th] = {"precision": p, "recall": r, "f1": _f(p, r)}
    return {"per_threshold": per, "mean_f1": float(np.mean([v["f1"] for v in per.values()]))}


def corpus_f1(preds_by_video: Mapping[str, Sequence[Event]], gts_by_video: Mapping[str, Sequence[Event]], thresholds=F1_THRESHOLDS) -> dict:
    """Precision and recall averaged over videos per threshold, then combined to F1."""
    per = {}
    keys = sorted(gts_by_video)
    for th in thresholds:
        pr = [precision_recall(list(preds_by_video.get(k, [])), list(gts_by_video[k]), th) for k in keys]
        p = float(np.mean([x[0] for x in pr])) if pr else 0.0
        r = float(np.mean([x[1] for x in pr])) if pr else 0.0
        per[th] = {"precision": p, "recall": r, "f1": _f(p, r)}
    return {"per_threshold": per, "mean_f1": float(np.mean([v["f1"] for v in per.values()]))}


# --------------------------------------------------------------- CIDEr-D


def _ngrams(words: Sequence[str], n: int) -> Counter:
    c = Counter()
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            c[tuple(words[i : i + k])] += 1
    return c


def cider_d(
    preds_by_video: Mapping[str, str],
    refs_by_video: Mapping[str, Sequence[str]],
    n: int = 4,
    sigma: float = 6.0,
) -> float:
    """Corpus CIDEr-D (x10 convention) with document frequencies from the references."""
    keys = sorted(refs_by_video)
    if not keys:
        raise ValueError("empty corpus")
    refs = {k: [_ngrams(tokenize(r), n) for r in refs_by_video[k]] for k in keys}
    ref_lens = {k: [len(tokenize(r)) for r in refs_by_video[k]] for k in keys}
    df: Counter = Counter()
    for k in keys:
        df.update(set().union(*[set(c) for c in refs[k]]) if refs[k] else set())
    log_n = math.log(float(len(keys)))

    def vec(counts: Counter):
        v = [dict() for _ in range(n)]
        norm = [0.0] * n
        for g, tf in counts.items():
            w = tf * (log_n - math.log(max(1.0, df[g])))
            v[len(g) - 1][g] = w
            norm[len(g) - 1] += w * w
        return v, [math.sqrt(x) for x in norm]

    scores = []
    for k in keys:
        words = tokenize(preds_by_video.get(k, ""))
        hv, hn = vec(_ngrams(words, n))
        total = np.zeros(n)
        for rc, rl in zip(refs[k], ref_lens[k]):
            rv, rn = vec(rc)
            delta = float(len(words) - rl)
            for i in range(n):
                val = sum(min(w, rv[i].get(g, 0.0)) * rv[i].get(g, 0.0) for g, w in hv[i].items())
                if hn[i] != 0 and rn[i] != 0:
                    val /= hn[i] * rn[i]
                total[i] += val * math.exp(-(delta**2) / (2 * sigma**2))
        scores.append(10.0 * total.mean() / max(len(refs[k]), 1))
    return float(np.mean(scores))


# ------------------------------------------------------------ SODA-style


def token_f1(a: str, b: str) -> float:
    """Bag-of-words F1 between two captions (METEOR stand-in)."""
    ta, tb = Counter(tokenize(a)), Counter(tokenize(b))
    if not ta and not tb:
        return 1.0
    common = sum((ta & tb).values())
    if common == 0:
        return 0.0
    p, r = common / sum(ta.values()), common / sum(tb.values())
    return 2 * p * r / (p + r)


def soda_similarity(preds: Sequence[Event], gts: Sequence[Event], text_sim: Callable[[str, str], float] = token_f1) -> np.ndarray:
    return np.array(
        [[text_sim(p.caption, g.caption) * temporal_iou(p, g) for g in gts] for p in preds]
    ).reshape(len(preds), len(gts))


def order_preserving_max(sim: np.ndarray) -> float:
    """Best total similarity over order-preserving one-to-one matchings (LCS-style DP)."""
    P, G = sim.shape
    dp = np.zeros((P + 1, G + 1))
    for i in range(1, P + 1):
        for j in range(1, G + 1):
            dp[i, j] = max(dp[i - 1, j], dp[i, j - 1], dp[i - 1, j - 1] + sim[i - 1, j - 1])
    return float(dp[P, G])


def soda_style(preds: Sequence[Event], gts: Sequence[Event], text_sim: Callable[[str, str], float] = token_f1) -> float:
    if not preds and not gts:
        return 1.0
    if not preds or not gts:
        return 0.0
    preds = sorted(preds, key=lambda e: (e.start, e.end))
    gts = sorted(gts, key=lambda e: (e.start, e.end))
    total = order_preserving_max(soda_similarity(preds, gts, text_sim))
    return _f(total / len(preds), total / len(gts))


# ------------------------------------------------------------ statistics


def caption_statistics(events_by_video: Mapping[str, Sequence[Event]]) -> tuple[float, float]:
    """Mean captions per video and mean summed caption words per video."""
    if not events_by_video:
        return 0.0, 0.0
    counts = [len(evs) for evs in events_by_video.values()]
    words = [sum(len(tokenize(e.caption)) for e in evs) for evs in events_by_video.values()]
    return float(np.mean(counts)), float(np.mean(words))


@dataclass
class MetricsReport:
    f1_per_threshold: dict = field(default_factory=dict)
    mean_f1: float = 0.0
    precision_per_threshold: dict = field(default_factory=dict)
    recall_per_threshold: dict = field(default_factory=dict)
    cider: float = 0.0
    soda: float = 0.0
    pred_caption_count_mean: float = 0.0
    pred_word_count_mean: float = 0.0
    gt_caption_count_mean: float = 0.0
    gt_word_count_mean: float = 0.0
    dropped_parse_count: int = 0
    videos: int = 0
    format_version: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("f1_per_threshold", "precision_per_threshold", "recall_per_threshold"):
            d[key] = {f"{float(k):.1f}": v for k, v in d[key].items()}
        return d

    def tsv_header(self) -> str:
        return "\t".join(self._flat().keys())

    def tsv_row(self) -> str:
        return "\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in self._flat().values())

    def _flat(self) -> dict:
        flat = {"videos": self.videos}
        for th, v in self.f1_per_threshold.items():
            flat[f"f1@{float(th):.1f}"] = v
        flat.update(
            mean_f1=self.mean_f1,
            cider=self.cider,
            soda=self.soda,
            pred_captions=self.pred_caption_count_mean,
            pred_words=self.pred_word_count_mean,
            gt_captions=self.gt_caption_count_mean,
            gt_words=self.gt_word_count_mean,
            dropped=self.dropped_parse_count,
        )
        return flat


def paragraph(events: Sequence[Event]) -> str:
    return " ".join(e.caption for e in sorted(events, key=lambda e: (e.start, e.end)))


def evaluate(
    preds_by_video: Mapping[str, Sequence[Event]],
    gts_by_video: Mapping[str, Sequence[Event]],
    dropped: int = 0,
) -> MetricsReport:
    """Full report over the videos present in ``gts_by_video``."""
    keys = sorted(gts_by_video)
    preds = {k: list(preds_by_video.get(k, [])) for k in keys}
    gts = {k: list(gts_by_video[k]) for k in keys}
    f1 = corpus_f1(preds, gts)
    rep = MetricsReport(videos=len(keys), dropped_parse_count=int(dropped))
    rep.f1_per_threshold = {th: v["f1"] for th, v in f1["per_threshold"].items()}
    rep.precision_per_threshold = {th: v["precision"] for th, v in f1["per_threshold"].items()}
    rep.recall_per_threshold = {th: v["recall"] for th, v in f1["per_threshold"].items()}
    rep.mean_f1 = f1["mean_f1"]
    if keys:
        rep.soda = float(np.mean([soda_style(preds[k], gts[k]) for k in keys]))
        rep.cider = cider_d({k: paragraph(preds[k]) for k in keys}, {k: [paragraph(gts[k])] for k in keys})
    rep.pred_caption_count_mean, rep.pred_word_count_mean = caption_statistics(preds)
    rep.gt_caption_count_mean, rep.gt_word_count_mean = caption_statistics(gts)
    return rep
