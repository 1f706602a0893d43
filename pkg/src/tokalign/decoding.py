"""Autoregressive generation with top-k sampling and classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import CodecLM, CondInput, make_batch


@dataclass
class SamplerConfig:
    topK: int = 80
    temperature: float = 0.6
    maxFrames: int = 64
    rngSeed: int = 0

    def __post_init__(self):
        if self.topK < 1:
            raise ValueError("topK must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.maxFrames < 1:
            raise ValueError("maxFrames must be >= 1")


@dataclass
class CfgConfig:
    gamma: float = 2.5
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and self.gamma < 1:
            raise ValueError("gamma must be >= 1 when guidance is enabled")


@dataclass
class Generation:
    grid: np.ndarray
    truncated: bool
    meta: dict = field(default_factory=dict)


def cfgCombine(condLogits, uncondLogits, gamma: float):
    """``gamma * cond + (1 - gamma) * uncond``; exact identity at ``gamma == 1``."""
    if tuple(condLogits.shape) != tuple(uncondLogits.shape):
        raise ValueError(f"shape mismatch {tuple(condLogits.shape)} vs {tuple(uncondLogits.shape)}")
    if gamma == 1:
        return condLogits
    return gamma * condLogits + (1 - gamma) * uncondLogits


def sample_probs(logits: np.ndarray, topK: int, temperature: float) -> np.ndarray:
    """Per-row sampling distribution after temperature and top-k truncation.

    Ties at the k-th value keep the lower indices.
    """
    z = np.asarray(logits, dtype=np.float64) / temperature
    K = z.shape[-1]
    probs = np.zeros_like(z)
    if topK >= K:
        keep = np.broadcast_to(np.arange(K), z.shape)
    else:
        # stable sort on -z keeps lower indices first among equal values
        keep = np.argsort(-z, axis=-1, kind="stable")[..., :topK]
    kept = np.take_along_axis(z, keep, axis=-1)
    kept = np.exp(kept - kept.max(axis=-1, keepdims=True))
    kept /= kept.sum(axis=-1, keepdims=True)
    np.put_along_axis(probs, keep, kept, axis=-1)
    return probs


def sampleStep(logits, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw one code per codebook from an ``(N, V)`` logit slice."""
    probs = sample_probs(logits, cfg.topK, cfg.temperature)
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    codes = (cdf < u[:, None]).sum(axis=-1)
    # guard against rounding past the last kept code
    last = probs.shape[-1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=-1)
    return np.minimum(codes, last)


def item_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, 0x6E])


@torch.no_grad()
def generate_batch(model: CodecLM, conds: Sequence[CondInput], sampler: SamplerConfig,
                   guidance: CfgConfig | None = None, rngs: Sequence[np.random.Generator] | None = None,
                   max_frames: Sequence[int] | None = None) -> list[Generation]:
    """Generate one grid per conditioning input, all in lockstep.

    Every item owns its random stream; items that stop keep occupying a row
    but their later frames are discarded, so results do not depend on how
    items are grouped.
    """
    cfg = model.cfg
    B = len(conds)
    if rngs is None:
        rngs = [item_rng(sampler.rngSeed, i) for i in range(B)]
    limits = np.full(B, sampler.maxFrames) if max_frames is None else np.minimum(max_frames, sampler.maxFrames)
    use_cfg = guidance is not None and guidance.enabled
    gamma = guidance.gamma if use_cfg else 1.0
    base = make_batch(cfg, conds)
    unc = make_batch(cfg, [c.dropped() for c in conds]) if use_cfg else None
    L = int(limits.max())
    dec_in = torch.full((B, L + 1, cfg.N), cfg.bos, dtype=torch.long)
    out = np.zeros((B, L, cfg.N), dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    length = np.zeros(B, dtype=np.int64)
    stopped = np.zeros(B, dtype=bool)
    was_training = model.training
    model.eval()
    for t in range(L):
        base.dec_in = dec_in[:, : t + 1]
        cond_logits = model(base)[:, t]
        if use_cfg:
            unc.dec_in = dec_in[:, : t + 1]
            step_logits = cfgCombine(cond_logits, model(unc)[:, t], gamma)
        else:
            step_logits = cond_logits
        # Stopping is drawn from the conditional branch alone; guidance only
        # reshapes the codes.  Both branches are confident there is no stop
        # early on, and extrapolating between two such tails can make a stop
        # at frame 0 win.  At gamma 1 this is the joint draw, factored.
        p_stop = sample_probs(cond_logits[:, 0].double().numpy(), sampler.topK, sampler.temperature)[:, cfg.eos]
        step = step_logits.double().numpy()
        step[:, :, cfg.eos] = -np.inf
        for b in range(B):
            if done[b]:
                continue
            if rngs[b].random() < p_stop[b]:
                done[b] = stopped[b] = True
                continue
            codes = sampleStep(step[b], sampler, rngs[b])
            out[b, t] = codes
            length[b] = t + 1
            if length[b] >= limits[b]:
                done[b] = True
        if done.all():
            break
        dec_in[:, t + 1] = torch.as_tensor(np.where(done[:, None], 0, out[:, t]))
    model.train(was_training)
    return [Generation(out[b, : length[b]].copy(), truncated=not stopped[b],
                       meta={"gamma": gamma, "frames": int(length[b])}) for b in range(B)]


def generate(params: CodecLM, cond: CondInput, sampler: SamplerConfig, cfgCfg: CfgConfig | None = None,
             rng: np.random.Generator | None = None) -> Generation:
    return generate_batch(params, [cond], sampler, cfgCfg, None if rng is None else [rng])[0]
