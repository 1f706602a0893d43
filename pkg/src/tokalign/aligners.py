"""Preference fine-tuning against a frozen reference policy (DPO and RPO)."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import IGNORE, CodecLM, CondInput, make_batch
from .preference import PreferencePair

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Policy drifted too far from the reference during alignment."""


@dataclass
class AlignConfig:
    method: str = "dpo"
    beta: float = 0.01
    eta: float = 1.0
    learningRate: float = 1e-4
    maxIters: int = 500
    batchPairs: int = 16
    valFraction: float = 0.1
    evalEvery: int = 50
    maxMeanDelta: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("dpo", "rpo"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.beta <= 0 or self.eta <= 0:
            raise ValueError("beta and eta must be > 0")


PAPER_SCALE = dict(beta=0.01, eta=1.0, learningRate=2e-7, maxIters=4000, batchPairs=64)
GT_AS_CHOSEN = dict(beta=1.0, learningRate=2e-5, maxIters=100)


def sequence_logprobs(model: CodecLM, conds: Sequence[CondInput], grids: Sequence[np.ndarray],
                      with_parts: bool = False):
    """Teacher-forced ``log pi(grid | cond)`` for each item, stop frame included.

    Prior disabled.  With ``with_parts`` also returns the stop-frame term separately.
    """
    batch = make_batch(model.cfg, conds, grids)
    logp = torch.log_softmax(model(batch), dim=-1)
    tgt = batch.target
    valid = tgt != IGNORE
    picked = torch.gather(logp, -1, tgt.clamp(min=0)[..., None])[..., 0] * valid
    total = picked.sum(dim=(1, 2))
    if with_parts:
        rows = torch.arange(len(conds))
        stop = picked[rows, batch.frames, 0]
        return total, stop
    return total


def sequenceLogProb(params: CodecLM, input: CondInput, grid: np.ndarray) -> float:
    with torch.no_grad():
        return float(sequence_logprobs(params, [input], [grid])[0])


def dpo_objective(delta: torch.Tensor) -> torch.Tensor:
    """``-log sigmoid(delta)`` elementwise."""
    return F.softplus(-delta)


def rpo_objective(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Bernoulli KL ``D[a || b]`` between ``sigmoid(b)`` (target) and ``sigmoid(a)``."""
    sb = torch.sigmoid(b)
    return sb * (F.logsigmoid(b) - F.logsigmoid(a)) + (1 - sb) * (F.logsigmoid(-b) - F.logsigmoid(-a))


def policy_margin(policy: CodecLM, pairs: Sequence[PreferencePair], beta: float,
                  ref_chosen: torch.Tensor, ref_rejected: torch.Tensor) -> torch.Tensor:
    # identical grids carry no preference: their margin is exactly zero, with no gradient
    live = [i for i, p in enumerate(pairs) if not np.array_equal(p.chosen, p.rejected)]
    dtype = next(policy.parameters()).dtype
    margin = torch.zeros(len(pairs), dtype=dtype)
    if not live:
        return margin
    sub = [pairs[i] for i in live]
    conds = [p.input for p in sub]
    pc = sequence_logprobs(policy, conds, [p.chosen for p in sub])
    pr = sequence_logprobs(policy, conds, [p.rejected for p in sub])
    idx = torch.as_tensor(live)
    live_margin = beta * (pc - ref_chosen[idx]) - beta * (pr - ref_rejected[idx])
    return margin.index_put((idx,), live_margin)


@torch.no_grad()
def reference_logprobs(reference: CodecLM, pairs: Sequence[PreferencePair], chunk: int = 64):
    ch, rj = [], []
    for s in range(0, len(pairs), chunk):
        part = pairs[s : s + chunk]
        conds = [p.input for p in part]
        ch.append(sequence_logprobs(reference, conds, [p.chosen for p in part]))
        rj.append(sequence_logprobs(reference, conds, [p.rejected for p in part]))
    return torch.cat(ch), torch.cat(rj)


def dpoLoss(policy: CodecLM, reference: CodecLM, pair: PreferencePair | Sequence[PreferencePair],
            beta: float) -> torch.Tensor:
    """Mean DPO loss; gradients reach only ``policy``."""
    pairs = [pair] if isinstance(pair, PreferencePair) else list(pair)
    rc, rr = reference_logprobs(reference, pairs)
    return dpo_objective(policy_margin(policy, pairs, beta, rc, rr)).mean()


def rpoLoss(policy: CodecLM, reference: CodecLM, pair: PreferencePair | Sequence[PreferencePair],
            beta: float, eta: float) -> torch.Tensor:
    pairs = [pair] if isinstance(pair, PreferencePair) else list(pair)
    if any(p.rewardGap is None for p in pairs):
        raise ValueError("RPO needs a reward gap on every pair")
    rc, rr = reference_logprobs(reference, pairs)
    a = policy_margin(policy, pairs, beta, rc, rr)
    b = eta * torch.tensor([p.rewardGap for p in pairs], dtype=a.dtype)
    return rpo_objective(a, b).mean()


def _state_bytes(model: CodecLM) -> bytes:
    return b"".join(t.detach().cpu().numpy().tobytes() for t in model.state_dict().values())


def alignFinetune(policy: CodecLM, reference: CodecLM, dataset: Sequence[PreferencePair],
                  cfg: AlignConfig) -> tuple[CodecLM, list[dict]]:
    """Adam on the preference loss; returns the lowest-validation-loss snapshot and the log."""
    if not dataset:
        raise ValueError("empty preference dataset")
    if cfg.method == "rpo" and any(p.rewardGap is None for p in dataset):
        raise ValueError("RPO needs reward gaps; build the dataset in rpo mode")
    rng = np.random.default_rng([cfg.seed, 0xA1])
    order = rng.permutation(len(dataset))
    n_val = int(round(cfg.valFraction * len(dataset))) if len(dataset) > 4 else 0
    val = [dataset[i] for i in order[:n_val]]
    train = [dataset[i] for i in order[n_val:]]
    ref_before = _state_bytes(reference)
    for p in reference.parameters():
        p.requires_grad_(False)
    reference.eval()
    policy.eval()
    tr_c, tr_r = reference_logprobs(reference, train)
    if val:
        va_c, va_r = reference_logprobs(reference, val)
    gaps = torch.tensor([p.rewardGap or 0.0 for p in train])

    def loss_of(margin, gap):
        if cfg.method == "dpo":
            return dpo_objective(margin)
        return rpo_objective(margin, cfg.eta * gap.to(margin.dtype))

    def validate() -> float:
        if not val:
            return math.nan
        with torch.no_grad():
            m = policy_margin(policy, val, cfg.beta, va_c, va_r)
            g = torch.tensor([p.rewardGap or 0.0 for p in val])
            return float(loss_of(m, g).mean())

    opt = torch.optim.Adam([p for p in policy.parameters() if p.requires_grad], lr=cfg.learningRate)
    best_state = copy.deepcopy(policy.state_dict())
    best_val = validate()
    rows = []
    for it in range(cfg.maxIters):
        idx = rng.choice(len(train), size=min(cfg.batchPairs, len(train)), replace=False)
        batch = [train[i] for i in idx]
        margin = policy_margin(policy, batch, cfg.beta, tr_c[idx], tr_r[idx])
        loss = loss_of(margin, gaps[idx]).mean()
        mean_delta = float(margin.detach().abs().mean())
        if mean_delta > cfg.maxMeanDelta:
            raise DivergenceError(f"mean |delta| {mean_delta:.3g} exceeded {cfg.maxMeanDelta} at iter {it}")
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            opt.step()
        row = {"iter": it, "train_loss": loss.item(), "val_loss": math.nan, "mean_delta": mean_delta}
        if (it + 1) % cfg.evalEvery == 0 or it + 1 == cfg.maxIters:
            v = validate()
            row["val_loss"] = v
            if not val or v < best_val:
                best_val = v
                best_state = copy.deepcopy(policy.state_dict())
            log.info("align iter %d train %.4f val %.4f", it, row["train_loss"], v)
        rows.append(row)
    if cfg.maxIters > 0:
        policy.load_state_dict(best_state)
    assert _state_bytes(reference) == ref_before
    policy.version += 1
    return policy, rows
