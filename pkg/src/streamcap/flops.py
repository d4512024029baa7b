"""Analytic compute model for global vs factorized decoding, plus measured counts.

Accounting rules (fixed so numbers reproduce exactly):

* a matmul ``[m, k] @ [k, n]`` costs ``2*m*k*n`` flops (one multiply, one add)
* softmax, layernorm and the MLP activation cost 5 flops per element
* embedding lookups, residual adds, biases and masking are free
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as tt

ELEMENTWISE = 5
TARGET_PER_SEGMENT = 424e9


@dataclass(frozen=True)
class CostConfig:
    T: int = 8
    l: int = 32
    N: int = 16384
    d_model: int = 1024
    heads: int = 16
    layers: int = 6
    ffw_mult: int = 4
    vocab: int = 32000
    # vision stack, identical in both arms; zero layers disables it
    vision_tokens: int = 0
    vision_d_model: int = 1024
    vision_layers: int = 0
    ar_layers: int = 0

    def __post_init__(self):
        for name in ("T", "l", "N", "d_model", "heads", "layers", "ffw_mult", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecoderTerms:
    """Multiply-accumulate counts per term (one layer unless noted) and elementwise flops."""

    self_proj: int
    self_attn: int
    cross_proj: int
    cross_attn: int
    ffw: int
    logits: int
    elementwise: int
    layers: int

    @property
    def macs(self) -> int:
        per_layer = self.self_proj + self.self_attn + self.cross_proj + self.cross_attn + self.ffw
        return self.layers * per_layer + self.logits

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise


def decoder_terms(seq_q: int, kv_self: int, kv_cross: int, cfg: CostConfig) -> DecoderTerms:
    """Term-by-term expansion of one decoder pass.

    Per layer: q/out projections over ``seq_q`` and k/v over ``kv_self``;
    scores and weighted sum ``2*seq_q*kv*d``; the same for cross attention
    with k/v over ``kv_cross`` (the whole sub-block vanishes when
    ``kv_cross == 0``); a two-matmul MLP; a final vocabulary projection.
    """
    d, h, m = cfg.d_model, cfg.heads, cfg.ffw_mult
    self_proj = 2 * seq_q * d * d + 2 * kv_self * d * d
    self_attn = 2 * seq_q * kv_self * d
    cross = kv_cross > 0
    cross_proj = (2 * seq_q * d * d + 2 * kv_cross * d * d) if cross else 0
    cross_attn = 2 * seq_q * kv_cross * d if cross else 0
    ffw = 2 * seq_q * d * d * m
    logits = seq_q * d * cfg.vocab
    norms = (3 if cross else 2) * seq_q * d
    soft = h * seq_q * kv_self + (h * seq_q * kv_cross if cross else 0)
    act = seq_q * d * m
    elem = ELEMENTWISE * (cfg.layers * (norms + soft + act) + seq_q * d)
    return DecoderTerms(self_proj, self_attn, cross_proj, cross_attn, ffw, logits, elem, cfg.layers)


def decoder_flops(seq_q: int, kv_self: int, kv_cross: int, cfg: CostConfig) -> int:
    return decoder_terms(seq_q, kv_self, kv_cross, cfg).flops


def decoder_macs(seq_q: int, kv_self: int, kv_cross: int, cfg: CostConfig) -> int:
    return decoder_terms(seq_q, kv_self, kv_cross, cfg).macs


def encoder_flops(tokens: int, d: int, layers: int, heads: int, mult: int) -> int:
    """Self-attention encoder stack over ``tokens`` positions, same accounting."""
    macs = layers * (4 * tokens * d * d + 2 * tokens * tokens * d + 2 * tokens * d * d * mult)
    elem = ELEMENTWISE * layers * (2 * tokens * d + heads * tokens * tokens + tokens * d * mult)
    return 2 * macs + elem


def vision_flops(cfg: CostConfig) -> int:
    """Per-segment encoders plus the memory transformer over all ``T*N`` tokens."""
    if cfg.vision_layers == 0 and cfg.ar_layers == 0:
        return 0
    enc = cfg.T * encoder_flops(cfg.vision_tokens, cfg.vision_d_model, cfg.vision_layers, cfg.heads, cfg.ffw_mult)
    ar = encoder_flops(cfg.T * cfg.N, cfg.d_model, cfg.ar_layers, cfg.heads, cfg.ffw_mult) if cfg.ar_layers else 0
    return enc + ar


@dataclass
class CostReport:
    per_segment_flops: int
    factorized_total: int
    global_total: int
    savings_fraction: float
    vision_total: int = 0
    factorized_inclusive: int = 0
    global_inclusive: int = 0
    savings_inclusive: float = 0.0
    config: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def compare(cfg: CostConfig) -> CostReport:
    per = decoder_flops(cfg.l, cfg.l, cfg.N, cfg)
    fact = cfg.T * per
    glob = decoder_flops(cfg.T * cfg.l, cfg.T * cfg.l, cfg.T * cfg.N, cfg)
    vis = vision_flops(cfg)
    return CostReport(
        per_segment_flops=per,
        factorized_total=fact,
        global_total=glob,
        savings_fraction=1.0 - fact / glob,
        vision_total=vis,
        factorized_inclusive=fact + vis,
        global_inclusive=glob + vis,
        savings_inclusive=1.0 - (fact + vis) / (glob + vis),
        config=cfg.to_dict(),
    )


def decoder_parameters(cfg: CostConfig, tied_embeddings: bool = True) -> int:
    d, m = cfg.d_model, cfg.ffw_mult
    per_layer = 8 * (d * d + d) + (d * d * m + d * m) + (d * m * d + d) + 3 * 2 * d
    emb = cfg.vocab * d + cfg.l * d
    head = 0 if tied_embeddings else cfg.vocab * d + cfg.vocab
    return cfg.layers * per_layer + emb + head + 2 * d


def calibrate_d_model(cfg: CostConfig, target: float = TARGET_PER_SEGMENT, multiple: int | None = None) -> CostConfig:
    """Smallest ``d_model`` (a multiple of ``heads``) whose per-segment cost reaches ``target``.

    Per-segment cost is increasing in ``d_model``, so integer bisection finds
    the crossing; the nearer of the two neighbours is returned.
    """
    step = multiple or cfg.heads

    def cost(k: int) -> float:
        return decoder_flops(cfg.l, cfg.l, cfg.N, replace(cfg, d_model=k * step))

    lo, hi = 1, 1
    while cost(hi) < target:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cost(mid) < target:
            lo = mid
        else:
            hi = mid
    k = min((lo, hi), key=lambda k: abs(cost(k) - target))
    return replace(cfg, d_model=k * step)


_LARGE_BASE = CostConfig(T=8, l=32, N=16384, d_model=1024, heads=16, layers=6, ffw_mult=4, vocab=32000)

PRESETS = {
    "large-8seg": lambda: calibrate_d_model(replace(_LARGE_BASE, T=8)),
    "large-16seg": lambda: calibrate_d_model(replace(_LARGE_BASE, T=16)),
    "large-8seg-vision": lambda: replace(
        calibrate_d_model(replace(_LARGE_BASE, T=8)), vision_tokens=4096, vision_layers=24
    ),
    "tiny": lambda: CostConfig(T=8, l=16, N=2, d_model=64, heads=4, layers=2, ffw_mult=4, vocab=64),
}


def preset(name: str) -> CostConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def table(rows: list[tuple[str, CostReport]], inclusive: bool = False) -> str:
    """Plain-text table with Global / Factorized / Savings columns (GFLOPs)."""
    lines = [f"{'setting':<24}{'Global':>12}{'Factorized':>12}{'Savings':>10}"]
    for name, r in rows:
        g = r.global_inclusive if inclusive else r.global_total
        f = r.factorized_inclusive if inclusive else r.factorized_total
        s = r.savings_inclusive if inclusive else r.savings_fraction
        lines.append(f"{name:<24}{g / 1e9:>12.0f}{f / 1e9:>12.0f}{100 * s:>9.1f}%")
    return "\n".join(lines)


# ---------------------------------------------------------------- measured


def cost_config_for(model_cfg) -> CostConfig:
    return CostConfig(
        T=model_cfg.T,
        l=model_cfg.l,
        N=model_cfg.N,
        d_model=model_cfg.d_model,
        heads=model_cfg.heads,
        layers=model_cfg.dec_layers,
        ffw_mult=model_cfg.ffw_mult,
        vocab=model_cfg.vocab_size,
    )


@dataclass
class MeasuredCounts:
    segment: dict
    global_: dict

    @property
    def ratio(self) -> float:
        return self.segment["total"] / self.global_["total"]

    def to_dict(self) -> dict:
        return {"segment": self.segment, "global": self.global_, "ratio": self.ratio}


def measured_multiplies(model, batch: int = 1, seed: int = 0) -> MeasuredCounts:
    """Instrumented decoder multiplies in segment vs global mode on random inputs."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    memory = tt.Tensor(rng.normal(size=(batch, cfg.T, cfg.N, cfg.d_model)).astype(tt.get_default_dtype()))
    ids = rng.integers(0, cfg.vocab_size, size=(batch, cfg.T * cfg.l))
    out = {}
    was_training = model.training
    model.eval()
    try:
        for mode in ("segment", "global"):
            with tt.no_grad(), tt.count_multiplies() as c:
                model.decoder_forward(ids, memory, mode)
            out[mode] = {"total": c.total, **c.by_scope}
    finally:
        model.train(was_training)
    return MeasuredCounts(out["segment"], out["global"])
