"""Preference data: sample, score with toy rewards, Pareto-rank, pair, and weigh by reward gap."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .decoding import SamplerConfig, generate_batch, item_rng
from .metrics import cer as cer_of, ssim_proxy
from .model import CodecLM, CondInput
from .world import FORMAT_VERSION, DomainError, World, check_version, frame_budget, mockAsrDecode

log = logging.getLogger(__name__)

PREFS_FORMAT = "tokalign.prefs"


@dataclass
class ScoredSample:
    grid: np.ndarray
    cer: float
    ssim: float
    sampleIdx: int


@dataclass
class PreferencePair:
    input: CondInput
    chosen: np.ndarray
    rejected: np.ndarray
    rewardGap: float | None = None
    source: str = "generated"
    cer_c: float = 0.0
    cer_r: float = 0.0
    ssim_c: float = 0.0
    ssim_r: float = 0.0


@dataclass
class Prompt:
    """A text plus the context grid it is spoken against."""
    cond: CondInput
    context: np.ndarray
    groundTruth: np.ndarray | None = None


def scoreSamples(world: World, prompt: Prompt, grids: Sequence[np.ndarray]) -> list[ScoredSample]:
    text = list(prompt.cond.textTokens)
    if not text:
        raise DomainError("prompt text is empty")
    if len(grids) == 0:
        raise DomainError("no samples to score")
    out = []
    for i, g in enumerate(grids):
        g = np.asarray(g)
        c = cer_of(mockAsrDecode(world, g), text)
        out.append(ScoredSample(g, float(c), ssim_proxy(world, prompt.context, g), i))
    return out


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """``a = (cer, ssim)`` is no worse than ``b`` on both and strictly better on one."""
    return a[0] <= b[0] and a[1] >= b[1] and (a[0] < b[0] or a[1] > b[1])


def paretoRank(samples: Sequence) -> list[tuple[int, float, float, int]]:
    """Rank ``(cer, ssim, idx)`` items by successive non-dominated fronts.

    Accepts :class:`ScoredSample` objects or plain tuples.  Returns
    ``(rank, cer, ssim, idx)`` sorted by rank, then cer ascending, then ssim
    descending (then index, for a total order).
    """
    items = [(s.cer, s.ssim, s.sampleIdx) if isinstance(s, ScoredSample) else tuple(s) for s in samples]
    remaining = list(items)
    ranked = []
    rank = 1
    while remaining:
        front = [a for a in remaining
                 if not any(dominates((b[0], b[1]), (a[0], a[1])) for b in remaining)]
        ranked.extend((rank, a[0], a[1], a[2]) for a in front)
        front_ids = {id(a) for a in front}
        remaining = [a for a in remaining if id(a) not in front_ids]
        rank += 1
    ranked.sort(key=lambda r: (r[0], r[1], -r[2], r[3]))
    return ranked


def selectPairs(ranked: Sequence[tuple[int, float, float, int]], mode: str) -> list[tuple[int, int]]:
    """Chosen/rejected sample indices; pairs where the chosen one is worse anywhere are dropped."""
    if mode not in ("dpo", "rpo"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(ranked) < 2:
        return []
    if mode == "dpo":
        candidates = [(ranked[0], ranked[-1])]
    else:
        candidates = [(c, r) for c in ranked[:2] for r in ranked[-2:]]
    pairs = []
    for c, r in candidates:
        if c[3] == r[3]:
            continue
        if c[1] > r[1] or c[2] < r[2]:
            continue
        if c[1] == r[1] and c[2] == r[2]:
            continue
        pairs.append((c[3], r[3]))
    return pairs


def rewardGap(deltas: Sequence[tuple[float, float]]) -> list[float]:
    """``Phi(z(dCER)) + Phi(z(dSSIM))`` with z-scores over the whole batch.

    Deltas are oriented so that larger means the chosen sample is better:
    ``dCER = cer_rejected - cer_chosen`` and ``dSSIM = ssim_chosen - ssim_rejected``.
    """
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
    if len(d) == 0:
        raise ValueError("empty batch")
    std = d.std(axis=0)
    z = np.where(std > 0, (d - d.mean(axis=0)) / np.where(std > 0, std, 1.0), 0.0)
    return list(ndtr(z[:, 0]) + ndtr(z[:, 1]))


def sample_grids(model: CodecLM, world: World, prompts: Sequence[Prompt], P: int,
                 sampler: SamplerConfig, chunk: int = 256) -> list[list[np.ndarray]]:
    """``P`` sampled grids per prompt, without guidance.

    Per-prompt random streams derive from ``sampler.rngSeed`` and the prompt
    index, so the result does not depend on ``chunk``.
    """
    for p in prompts:
        p.cond.validate(model.cfg)
    jobs = [(i, k) for i in range(len(prompts)) for k in range(P)]
    grids: list[list[np.ndarray]] = [[None] * P for _ in prompts]
    for start in range(0, len(jobs), chunk):
        part = jobs[start : start + chunk]
        rngs = [item_rng(sampler.rngSeed, i * 1_000 + k) for i, k in part]
        limits = [frame_budget(world.spec, prompts[i].cond.textTokens) for i, _ in part]
        gens = generate_batch(model, [prompts[i].cond for i, _ in part], sampler, None, rngs, limits)
        for (i, k), g in zip(part, gens):
            grids[i][k] = g.grid
        log.info("sampled %d/%d", min(start + chunk, len(jobs)), len(jobs))
    return grids


def pair_samples(world: World, prompts: Sequence[Prompt], grids: Sequence[Sequence[np.ndarray]], mode: str,
                 gtAsChosen: bool = False) -> list[PreferencePair]:
    """Score, rank and pair already sampled grids; RPO pairs also get reward gaps."""
    pairs: list[PreferencePair] = []
    for prompt, samples in zip(prompts, grids):
        scored = scoreSamples(world, prompt, samples)
        ranked = paretoRank(scored)
        if gtAsChosen:
            if prompt.groundTruth is None:
                raise DomainError("ground-truth-as-chosen needs ground-truth grids")
            gt = scoreSamples(world, prompt, [prompt.groundTruth])[0]
            worst = scored[ranked[-1][3]]
            pairs.append(PreferencePair(prompt.cond, prompt.groundTruth, worst.grid, None, "gtAsChosen",
                                        gt.cer, worst.cer, gt.ssim, worst.ssim))
            continue
        for ci, ri in selectPairs(ranked, mode):
            c, r = scored[ci], scored[ri]
            pairs.append(PreferencePair(prompt.cond, c.grid, r.grid, None, "generated",
                                        c.cer, r.cer, c.ssim, r.ssim))
    if mode == "rpo" and pairs:
        gaps = rewardGap([(p.cer_r - p.cer_c, p.ssim_c - p.ssim_r) for p in pairs])
        for p, g in zip(pairs, gaps):
            p.rewardGap = float(g)
    return pairs


def buildPreferenceDataset(model: CodecLM, world: World, prompts: Sequence[Prompt], P: int,
                           sampler: SamplerConfig, mode: str, gtAsChosen: bool = False,
                           chunk: int = 256) -> list[PreferencePair]:
    """Sample ``P`` generations per prompt, score, rank and pair them."""
    if P < (1 if gtAsChosen else 2):
        raise ValueError("need at least 2 samples per prompt (1 with ground truth as chosen)")
    if gtAsChosen and any(p.groundTruth is None for p in prompts):
        raise DomainError("ground-truth-as-chosen needs ground-truth grids")
    if mode not in ("dpo", "rpo"):
        raise ValueError(f"unknown pairing mode {mode!r}")
    grids = sample_grids(model, world, prompts, P, sampler, chunk)
    return pair_samples(world, prompts, grids, mode, gtAsChosen)


# ---------------------------------------------------------------------------
# persistence


def _cond_to_json(c: CondInput) -> dict:
    return {
        "text": list(map(int, c.textTokens)),
        "context": None if c.contextGrid is None else np.asarray(c.contextGrid).tolist(),
        "speaker_vector": None if c.speakerVector is None else [float(x) for x in c.speakerVector],
    }


def _cond_from_json(d: dict) -> CondInput:
    ctx = None if d.get("context") is None else np.asarray(d["context"], dtype=np.int64)
    spk = None if d.get("speaker_vector") is None else np.asarray(d["speaker_vector"], dtype=np.float32)
    return CondInput(d["text"], ctx, spk)


def write_pairs(path, pairs: Sequence[PreferencePair], meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        header = {"format": PREFS_FORMAT, "version": FORMAT_VERSION, **(meta or {})}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for p in pairs:
            rec = {
                "prompt": _cond_to_json(p.input),
                "chosen": np.asarray(p.chosen).tolist(),
                "rejected": np.asarray(p.rejected).tolist(),
                "gap": p.rewardGap,
                "cer_c": p.cer_c, "cer_r": p.cer_r, "ssim_c": p.ssim_c, "ssim_r": p.ssim_r,
                "source": p.source,
            }
            fh.write(json.dumps(rec) + "\n")


def read_pairs(path, N: int) -> tuple[dict, list[PreferencePair]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        check_version(header, PREFS_FORMAT)
        pairs = []
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            pairs.append(PreferencePair(
                _cond_from_json(r["prompt"]),
                np.asarray(r["chosen"], dtype=np.int64).reshape(-1, N),
                np.asarray(r["rejected"], dtype=np.int64).reshape(-1, N),
                r["gap"], r["source"], r["cer_c"], r["cer_r"], r["ssim_c"], r["ssim_r"]))
    return header, pairs
