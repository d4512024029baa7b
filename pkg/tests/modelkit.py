"""Small model/data builders shared across test modules."""

from __future__ import annotations

import numpy as np

from streamcap import tensor as tt
from streamcap.codec import CodecConfig, Vocabulary
from streamcap.model import FactorizedCaptioner, ModelConfig
from streamcap.synth import SynthSpec, caption_for

SPEC = SynthSpec()
CODEC = CodecConfig()
VOCAB = Vocabulary.build([caption_for(v, o) for v in SPEC.verbs for o in SPEC.objects], CODEC.bins)


def tiny_config(**kw) -> ModelConfig:
    base = dict(T=4, S=4, frame_dim=12, K=6, N=2, l=16, d_model=32, heads=4, enc_layers=1, red_layers=1,
                ar_layers=1, dec_layers=2, vocab_size=len(VOCAB), dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, dtype=np.float64, **kw) -> FactorizedCaptioner:
    with tt.default_dtype(dtype):
        return FactorizedCaptioner(tiny_config(**kw), seed=seed).eval()


def random_inputs(cfg: ModelConfig, b: int = 2, seed: int = 0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(b, cfg.T, cfg.S, cfg.frame_dim)).astype(dtype)
    ids = rng.integers(0, cfg.vocab_size, size=(b, cfg.T * cfg.l))
    return frames, ids


def per_segment_logits(model: FactorizedCaptioner, frames, ids) -> np.ndarray:
    """Reference: one decoder call per segment against that segment's memory only."""
    cfg = model.cfg
    with tt.no_grad():
        mem = model.memory(frames).data
        blocks = [
            model.decoder_forward(ids[:, i * cfg.l : (i + 1) * cfg.l], tt.Tensor(mem[:, i : i + 1])).data
            for i in range(cfg.T)
        ]
    return np.concatenate(blocks, axis=1)
