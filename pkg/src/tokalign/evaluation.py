"""Repeated seeded evaluation with confidence intervals, and guidance-strength sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .decoding import CfgConfig, SamplerConfig, generate_batch, item_rng
from .metrics import cerWer, ssim_proxy
from .model import CodecLM
from .training import context_slice, make_cond
from .world import (DomainError, World, frame_budget, generateChallengingTexts, generateRegularTexts,
                    mockAsrDecode, synthesize)

log = logging.getLogger(__name__)

METRICS = ("cer", "wer", "ssim")


@dataclass
class EvalItem:
    text: list[int]
    speakerId: int
    context: np.ndarray


@dataclass
class EvalSplit:
    name: str
    items: list[EvalItem]


@dataclass
class MetricSummary:
    mean: float
    ci95: float | None
    perRunValues: list[float]


@dataclass
class EvalReport:
    metrics: dict[str, MetricSummary]
    runCount: int
    split: str
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"split": self.split, "runs": self.runCount, **self.config}
        for k, m in self.metrics.items():
            out[f"{k}_mean"] = m.mean
            out[f"{k}_ci"] = m.ci95
        return out


def make_split(world: World, name: str, count: int, rngSeed: int, contextFrames: int,
               challenging: bool = False) -> EvalSplit:
    """Evaluation items for ``seen`` or ``unseen`` speakers.

    Each item's context is a fixed-length slice of a separate utterance by the
    same speaker, never the target text itself.
    """
    if name == "seen":
        speakers = world.seen_speakers()
    elif name == "unseen":
        speakers = world.unseen_speakers()
    else:
        raise DomainError(f"unknown split {name!r}")
    if not speakers:
        raise DomainError(f"world has no {name} speakers")
    spec = world.spec
    texts = (generateChallengingTexts if challenging else generateRegularTexts)(spec, count, rngSeed)
    ctx_texts = generateRegularTexts(spec, count, rngSeed + 0x51)
    rng = np.random.default_rng([rngSeed, 0xE7])
    items = []
    for i, text in enumerate(texts):
        s = speakers[i % len(speakers)]
        full = synthesize(world, ctx_texts[i], s, rngSeed * 7_001 + i)
        items.append(EvalItem(list(text), s, context_slice(full, contextFrames, rng)))
    return EvalSplit(name, items)


def run_seed(rootSeed: int, run: int) -> int:
    return int(np.random.SeedSequence([rootSeed, run]).generate_state(1)[0])


def summarize(values: Sequence[float]) -> MetricSummary:
    """Mean and Student-t 95% half-width; the half-width is absent for a single run."""
    v = [float(x) for x in values]
    n = len(v)
    mean = float(np.mean(v))
    if n < 2:
        return MetricSummary(mean, None, v)
    # identical runs give exactly zero, not a rounding residue
    sd = 0.0 if max(v) == min(v) else float(np.std(v, ddof=1))
    half = float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n))
    return MetricSummary(mean, half, v)


def score_run(model: CodecLM, world: World, split: EvalSplit, sampler: SamplerConfig,
              guidance: CfgConfig | None, seed: int, chunk: int = 256) -> dict[str, float]:
    items = split.items
    conds = [make_cond(model.cfg, world, it.text, it.context) for it in items]
    totals = {k: 0.0 for k in METRICS}
    for start in range(0, len(items), chunk):
        part = range(start, min(start + chunk, len(items)))
        gens = generate_batch(model, [conds[i] for i in part], sampler, guidance,
                              [item_rng(seed, i) for i in part],
                              [frame_budget(world.spec, items[i].text) for i in part])
        for i, g in zip(part, gens):
            c, w = cerWer(mockAsrDecode(world, g.grid), items[i].text)
            totals["cer"] += c
            totals["wer"] += w
            totals["ssim"] += ssim_proxy(world, items[i].context, g.grid)
    return {k: v / len(items) for k, v in totals.items()}


def evaluateModel(model: CodecLM, world: World, split: EvalSplit, sampler: SamplerConfig,
                  cfgCfg: CfgConfig | None = None, runCount: int = 5, rootSeed: int = 0) -> EvalReport:
    if not split.items:
        raise DomainError("evaluation split is empty")
    if runCount < 1:
        raise DomainError("runCount must be >= 1")
    guidance = cfgCfg if cfgCfg is not None and cfgCfg.enabled and cfgCfg.gamma != 1 else None
    per_run = {k: [] for k in METRICS}
    for r in range(runCount):
        res = score_run(model, world, split, sampler, guidance, run_seed(rootSeed, r))
        for k in METRICS:
            per_run[k].append(res[k])
        log.debug("run %d: %s", r, res)
    config = {
        "gamma": guidance.gamma if guidance else 1.0,
        "topK": sampler.topK,
        "temperature": sampler.temperature,
        "checkpoint": getattr(model, "checkpoint_id", None),
        "rootSeed": rootSeed,
    }
    return EvalReport({k: summarize(v) for k, v in per_run.items()}, runCount, split.name, config)


def default_gammas() -> list[float]:
    return [round(1.0 + 0.2 * i, 1) for i in range(11)]


def cfgSweep(model: CodecLM, world: World, split: EvalSplit, gammas: Sequence[float] | None,
             sampler: SamplerConfig, runCount: int = 5, rootSeed: int = 0) -> list[EvalReport]:
    gammas = default_gammas() if gammas is None else list(gammas)
    if not gammas:
        raise DomainError("gamma list is empty")
    if any(g < 1 for g in gammas):
        raise DomainError("every gamma must be >= 1")
    reports = []
    for g in gammas:
        rep = evaluateModel(model, world, split, sampler, CfgConfig(gamma=g), runCount, rootSeed)
        log.info("gamma %.2f cer %.4f ssim %.4f", g, rep.metrics["cer"].mean, rep.metrics["ssim"].mean)
        reports.append(rep)
    return reports


def sweep_rows(reports: Sequence[EvalReport]) -> list[dict]:
    return [{"gamma": r.config["gamma"], "cer_mean": r.metrics["cer"].mean, "cer_ci": r.metrics["cer"].ci95,
             "ssim_mean": r.metrics["ssim"].mean, "ssim_ci": r.metrics["ssim"].ci95} for r in reports]


def format_table(reports: Sequence[EvalReport], labels: Sequence[str] | None = None) -> str:
    labels = list(labels) if labels else [f"gamma={r.config.get('gamma', 1.0):g}" for r in reports]
    width = max(12, *(len(x) for x in labels))

    def cell(m: MetricSummary) -> str:
        return f"{m.mean:.4f}" if m.ci95 is None else f"{m.mean:.4f} ± {m.ci95:.4f}"

    lines = [f"{'setting':<{width}}  {'split':<7} {'CER':>17} {'WER':>17} {'SSIM':>17}"]
    for lab, r in zip(labels, reports):
        lines.append(f"{lab:<{width}}  {r.split:<7} " + " ".join(f"{cell(r.metrics[k]):>17}" for k in METRICS))
    return "\n".join(lines)
