"""Segment encoder, token reducer, segment-causal memory and shared text decoder.

Shapes (batch axis ``b`` first everywhere):

* frames      ``[b, T, S, frame_dim]``
* encoder     ``[b, T, K, d]``   per segment, no cross-segment mixing
* reducer     ``[b, T, N, d]``   trailing ``N`` of the ``K`` tokens
* memory      ``[b, T, N, d]``   segment ``i`` attends to segments ``<= i``
* decoder in  ``[b, T*l]`` ids, out ``[b, T*l, V]`` logits
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as tt
from .nn import DecoderBlock, Dropout, Embedding, EncoderBlock, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor

MASK_MODES = ("global", "causal", "segment")
CHECKPOINT_FORMAT = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int = 8
    S: int = 4
    frame_dim: int = 12
    K: int = 6
    N: int = 2
    l: int = 16
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 1
    red_layers: int = 1
    ar_layers: int = 2
    dec_layers: int = 2
    ffw_mult: int = 4
    vocab_size: int = 64
    dropout: float = 0.1
    max_segments: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.N > self.K:
            raise ConfigError(f"N={self.N} must not exceed K={self.K}")
        if self.K < self.S:
            raise ConfigError(f"K={self.K} must be >= S={self.S} (one token per frame plus summary slots)")
        if self.l < 4:
            raise ConfigError("l must be >= 4")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.T > self.max_segments:
            raise ConfigError(f"T={self.T} exceeds max_segments={self.max_segments}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "dropout" and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------- masks


@lru_cache(maxsize=64)
def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


@lru_cache(maxsize=64)
def segment_causal_mask(T: int, N: int) -> np.ndarray:
    """Token of segment ``i`` sees every token of segments ``<= i``."""
    seg = np.arange(T * N) // N
    return seg[:, None] >= seg[None, :]


@lru_cache(maxsize=64)
def block_causal_mask(T: int, l: int) -> np.ndarray:
    """Text position ``t`` sees ``t' <= t`` inside its own segment only."""
    pos = np.arange(T * l)
    same = (pos[:, None] // l) == (pos[None, :] // l)
    return same & (pos[:, None] >= pos[None, :])


@lru_cache(maxsize=64)
def build_cross_mask(T: int, l: int, N: int, mode: str) -> np.ndarray:
    """``[T*l, T*N]`` visibility of vision tokens from each text position."""
    if min(T, l, N) < 1:
        raise ConfigError("T, l and N must be >= 1")
    if mode not in MASK_MODES:
        raise ConfigError(f"unknown mask mode {mode!r}")
    text_seg = np.arange(T * l)[:, None] // l
    vis_seg = np.arange(T * N)[None, :] // N
    if mode == "global":
        return np.ones((T * l, T * N), dtype=bool)
    if mode == "causal":
        return vis_seg <= text_seg
    return vis_seg == text_seg


# ------------------------------------------------------------------- state


@dataclass
class SegmentGrid:
    features: np.ndarray  # [T, S, frame_dim]
    duration: float


@dataclass
class MemoryState:
    """Append-only per-stream memory: reduced tokens and memory outputs per segment."""

    reduced: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def t_seen(self) -> int:
        return len(self.outputs)

    def memory(self) -> np.ndarray:
        return np.stack(self.outputs) if self.outputs else np.zeros((0,))


def _batched(x, ndim: int) -> tuple[np.ndarray | Tensor, bool]:
    data = x.data if isinstance(x, Tensor) else x
    if data.ndim == ndim - 1:
        return (tt.reshape(x, (1,) + x.shape) if isinstance(x, Tensor) else np.asarray(x)[None]), True
    return x, False


class FactorizedCaptioner(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, h, m, p = cfg.d_model, cfg.heads, cfg.ffw_mult, cfg.dropout

        self.frame_embed = Linear(cfg.frame_dim, d, rng)
        self.frame_pos = Parameter(trunc_normal(rng, (cfg.S, d)))
        self.slots = Parameter(trunc_normal(rng, (cfg.K - cfg.S, d))) if cfg.K > cfg.S else None
        self.encoder = [EncoderBlock(d, h, m, rng, p) for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(d)

        self.reducer = [EncoderBlock(d, h, m, rng, p) for _ in range(cfg.red_layers)]
        self.red_ln = LayerNorm(d)

        self.seg_pos = Parameter(trunc_normal(rng, (cfg.max_segments, d)))
        self.slot_pos = Parameter(trunc_normal(rng, (cfg.N, d)))
        self.ar = [EncoderBlock(d, h, m, rng, p) for _ in range(cfg.ar_layers)]
        self.ar_ln = LayerNorm(d)

        self.tok_embed = Embedding(cfg.vocab_size, d, rng)
        self.text_pos = Parameter(trunc_normal(rng, (cfg.l, d)))
        self.decoder = [DecoderBlock(d, h, m, rng, p) for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(d)
        self.lm_head = Linear(d, cfg.vocab_size, rng)
        self.drop = Dropout(p, None)

        self.dropout_rng = np.random.default_rng(seed + 1)
        for mod in self.modules():
            if isinstance(mod, Dropout):
                mod.rng = self.dropout_rng
        self.name_parameters()

    # ------------------------------------------------------------- stages

    def encode_segments(self, frames) -> Tensor:
        """``[b, T, S, F] -> [b, T, K, d]``; each segment is encoded on its own."""
        x, squeeze = _batched(frames, 4)
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=tt.get_default_dtype()))
        b, T, S, F = x.shape
        if (S, F) != (self.cfg.S, self.cfg.frame_dim):
            raise tt.DimensionError(f"frames {x.shape} do not match S={self.cfg.S}, frame_dim={self.cfg.frame_dim}")
        h = self.frame_embed(x) + self.frame_pos
        if self.slots is not None:
            h = tt.concat([h, tt.broadcast_to(self.slots, (b, T) + self.slots.shape)], axis=2)
        h = self.drop(h)
        for blk in self.encoder:
            h = blk(h)
        h = self.enc_ln(h)
        return tt.reshape(h, h.shape[1:]) if squeeze else h

    def reduce(self, r_v: Tensor) -> Tensor:
        """``[b, T, K, d] -> [b, T, N, d]``: run the reducer, keep the trailing ``N`` tokens."""
        h = r_v
        for blk in self.reducer:
            h = blk(h)
        h = self.red_ln(h)
        return h[..., h.shape[-2] - self.cfg.N :, :]

    def ar_memory(self, r: Tensor, first_segment: int = 0) -> Tensor:
        """Segment-causal transformer over the flattened ``T*N`` reduced tokens."""
        r, squeeze = _batched(r, 4)
        b, T, N, d = r.shape
        if first_segment + T > self.cfg.max_segments:
            raise ConfigError(f"segment index {first_segment + T - 1} beyond max_segments")
        seg = self.seg_pos[first_segment : first_segment + T]
        h = r + tt.reshape(seg, (T, 1, d)) + self.slot_pos
        h = tt.reshape(h, (b, T * N, d))
        mask = segment_causal_mask(T, N)
        for blk in self.ar:
            h = blk(h, mask)
        h = tt.reshape(self.ar_ln(h), (b, T, N, d))
        return tt.reshape(h, h.shape[1:]) if squeeze else h

    def memory(self, frames) -> Tensor:
        return self.ar_memory(self.reduce(self.encode_segments(frames)))

    def decoder_forward(self, text, memory: Tensor, mask_mode: str = "segment", block_sparse: bool = True) -> Tensor:
        """Logits for every text position in one pass over ``T*l`` tokens.

        In ``segment`` mode with ``block_sparse`` the ``T`` blocks are run as a
        batch axis, which is exactly ``T`` independent per-segment decoder
        calls; otherwise the dense ``[T*l, *]`` masks are applied.
        """
        if mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {mask_mode!r}")
        ids = np.asarray(text, dtype=np.int64)
        memory, squeeze = _batched(memory, 4)
        if ids.ndim == 1:
            ids = ids[None]
        b, T, N, d = memory.shape
        l = self.cfg.l
        if ids.shape != (b, T * l):
            raise tt.DimensionError(f"text shape {ids.shape} != ({b}, T*l={T * l})")
        x = self.tok_embed(ids.reshape(b, T, l)) + self.text_pos
        x = self.drop(x)
        if mask_mode == "segment" and block_sparse:
            mem, self_mask, cross_mask = memory, causal_mask(l), None
        else:
            x = tt.reshape(x, (b, 1, T * l, d))
            mem = tt.reshape(memory, (b, 1, T * N, d))
            self_mask = causal_mask(T * l) if mask_mode == "global" else block_causal_mask(T, l)
            cross_mask = build_cross_mask(T, l, N, mask_mode)
        for blk in self.decoder:
            x = blk(x, mem, self_mask, cross_mask)
        logits = self.lm_head(self.dec_ln(x))
        logits = tt.reshape(logits, (b, T * l, self.cfg.vocab_size))
        return tt.reshape(logits, logits.shape[1:]) if squeeze else logits

    def forward(self, frames, text, mask_mode: str = "segment") -> Tensor:
        return self.decoder_forward(text, self.memory(frames), mask_mode)

    # ---------------------------------------------------------- streaming

    def push_memory(self, state: MemoryState, frames: np.ndarray) -> np.ndarray:
        """Consume one segment's frames ``[S, F]``; return its memory slice ``[N, d]``."""
        frames = np.asarray(frames, dtype=tt.get_default_dtype())
        if frames.shape != (self.cfg.S, self.cfg.frame_dim):
            raise tt.DimensionError(f"segment frames {frames.shape} != ({self.cfg.S}, {self.cfg.frame_dim})")
        with tt.no_grad():
            r = self.reduce(self.encode_segments(frames[None, None]))
            state.reduced.append(r.data[0, 0])
            m = self.ar_memory(Tensor(np.stack(state.reduced)[None]))
        out = m.data[0, -1].copy()
        state.outputs.append(out)
        return out


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: FactorizedCaptioner, directory, name: str = "model") -> Path:
    """Write ``<name>.json`` (manifest) and ``<name>.bin`` (little-endian blob)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(model.parameters()[0].dtype).newbyteorder("<")
    entries, chunks, offset = [], [], 0
    for pname, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype=dtype).tobytes()
        entries.append({"name": pname, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "dtype": dtype.str,
        "blob": f"{name}.bin",
        "parameters": entries,
    }
    (directory / f"{name}.bin").write_bytes(b"".join(chunks))
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(directory, name: str = "model") -> dict:
    return json.loads((Path(directory) / f"{name}.json").read_text())


def load_checkpoint(directory, name: str = "model") -> FactorizedCaptioner:
    directory = Path(directory)
    manifest = read_manifest(directory, name)
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    cfg = ModelConfig.from_dict(manifest["config"])
    blob = (directory / manifest["blob"]).read_bytes()
    dtype = np.dtype(manifest["dtype"])
    with tt.default_dtype(dtype.newbyteorder("=")):
        model = FactorizedCaptioner(cfg)
    state = {}
    for e in manifest["parameters"]:
        arr = np.frombuffer(blob, dtype=dtype, count=e["nbytes"] // dtype.itemsize, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
    model.load_state_dict(state)
    return model.eval()
