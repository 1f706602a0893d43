"""Base-model training on (context, text, target) triplets drawn from a toy world."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .model import CodecLM, CondInput, ModelConfig, applyConditioningDropout, make_batch
from .objectives import LossConfig, totalLoss
from .world import Utterance, World, mockSvEmbed

log = logging.getLogger(__name__)


@dataclass
class Triplet:
    """A target utterance with a context slice from another utterance of the same speaker."""
    text: list[int]
    speakerId: int
    target: np.ndarray
    context: np.ndarray


@dataclass
class TrainConfig:
    iters: int = 2000
    batchSize: int = 32
    learningRate: float = 1e-3
    gradClip: float = 1.0
    warmup: int = 100
    lrSchedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.lrSchedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lrSchedule {self.lrSchedule!r}")
        if self.iters < 0 or self.batchSize < 1 or self.learningRate <= 0 or self.warmup < 0:
            raise ValueError("iters >= 0, batchSize >= 1, learningRate > 0 and warmup >= 0 required")

    def lr_factor(self, step: int) -> float:
        """Multiplier on ``learningRate`` at 0-based ``step``: linear warmup, then flat or cosine decay."""
        if step < self.warmup:
            return (step + 1) / self.warmup
        if self.lrSchedule == "constant":
            return 1.0
        span = max(self.iters - self.warmup, 1)
        return 0.5 * (1 + math.cos(math.pi * min(step - self.warmup, span) / span))


def context_slice(grid: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    if len(grid) <= frames:
        return grid.copy()
    start = int(rng.integers(0, len(grid) - frames + 1))
    return grid[start : start + frames].copy()


def make_triplets(utterances: Sequence[Utterance], context_frames: int, seed: int) -> list[Triplet]:
    """Pair every utterance with a context slice from a different utterance of its speaker."""
    rng = np.random.default_rng([seed, 0x7B])
    by_speaker: dict[int, list[int]] = {}
    for i, u in enumerate(utterances):
        by_speaker.setdefault(u.speakerId, []).append(i)
    out = []
    for i, u in enumerate(utterances):
        pool = [j for j in by_speaker[u.speakerId] if j != i] or [i]
        j = pool[int(rng.integers(len(pool)))]
        out.append(Triplet(list(u.text), u.speakerId, u.tokens,
                           context_slice(utterances[j].tokens, context_frames, rng)))
    return out


def make_cond(cfg: ModelConfig, world: World, text: Sequence[int], context: np.ndarray) -> CondInput:
    if cfg.conditioningMode == "svConditioned":
        return CondInput(list(text), speakerVector=mockSvEmbed(world, context).astype(np.float32))
    return CondInput(list(text), contextGrid=np.asarray(context))


def train_model(model: CodecLM, world: World, triplets: Sequence[Triplet], loss_cfg: LossConfig,
                cfg: TrainConfig, log_path=None, start_iter: int = 0) -> list[dict]:
    """Adam on ``token + alignCoeff * align`` with joint conditioning dropout.

    Returns the per-iteration loss log; also written as CSV when ``log_path`` is given.
    """
    rng = np.random.default_rng([cfg.seed, 0x7A])
    gen_state = torch.random.get_rng_state()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learningRate)
    conds = [make_cond(model.cfg, world, t.text, t.context) for t in triplets]
    rows = []
    model.train()
    for step, it in enumerate(range(start_iter, start_iter + cfg.iters)):
        for group in opt.param_groups:
            group["lr"] = cfg.learningRate * cfg.lr_factor(step)
        idx = rng.choice(len(triplets), size=min(cfg.batchSize, len(triplets)), replace=False)
        batch_conds = [applyConditioningDropout(conds[i], model.cfg.condDropoutProb,
                                                int(cfg.seed * 7_919 + it * 1_009 + k))
                       for k, i in enumerate(idx)]
        batch = make_batch(model.cfg, batch_conds, [triplets[i].target for i in idx])
        loss, parts = totalLoss(model, batch, it, loss_cfg)
        opt.zero_grad()
        loss.backward()
        if cfg.gradClip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.gradClip)
        opt.step()
        rows.append({"iter": it, "token_loss": parts["token"], "align_loss": parts["align"],
                     "total": parts["total"], "lr": opt.param_groups[0]["lr"]})
        if it % 100 == 0:
            log.info("iter %d token %.4f align %.4f", it, parts["token"], parts["align"])
    model.version += 1
    model.eval()
    torch.random.set_rng_state(gen_state)
    if log_path is not None:
        write_csv(log_path, rows, ["iter", "token_loss", "align_loss", "total", "lr"])
    return rows


def write_csv(path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.8g}" if isinstance(r[k], float) else r[k]) for k in fields})
