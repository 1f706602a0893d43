"""Training objectives: token cross-entropy, attention prior, monotonic alignment loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import betaln, gammaln

from .model import IGNORE, Batch, CodecLM


class InfeasibleAlignment(ValueError):
    """Fewer audio frames than text tokens: no monotonic path covers the text."""


@dataclass
class LossConfig:
    alignCoeff: float = 0.01
    priorOnUntil: int = 1000
    priorAnnealUntil: int = 1500
    priorScale: float = 1.0

    def __post_init__(self):
        if self.alignCoeff < 0:
            raise ValueError("alignCoeff must be >= 0")
        if self.priorScale <= 0:
            raise ValueError("priorScale must be > 0")
        if not 0 <= self.priorOnUntil <= self.priorAnnealUntil:
            raise ValueError("need 0 <= priorOnUntil <= priorAnnealUntil")


# ---------------------------------------------------------------------------
# token loss


def tokenLoss(logits, target, ignore_index: int = IGNORE):
    """Mean per-cell cross-entropy and its gradient with respect to ``logits``.

    ``logits`` is ``(T, N, K)``, ``target`` is ``(T, N)``; cells equal to
    ``ignore_index`` are skipped.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 3 or target.shape != logits.shape[:2]:
        raise ValueError(f"logits {logits.shape} and target {target.shape} disagree")
    valid = target != ignore_index
    if np.any(valid & ((target < 0) | (target >= logits.shape[2]))):
        raise ValueError("target code out of range")
    count = int(valid.sum())
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    safe = np.where(valid, target, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / max(count, 1)
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1)
    grad *= valid[..., None] / max(count, 1)
    return float(loss), grad


def token_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Differentiable batch version: mean cross-entropy over all non-ignored cells."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1),
                           ignore_index=IGNORE)


# ---------------------------------------------------------------------------
# attention prior


def betaBinomialPrior(T: int, M: int, omega: float = 1.0) -> np.ndarray:
    """Row ``t`` is BetaBinomial(k; M-1, omega*(t+1), omega*(T-t)) over k = 0..M-1."""
    if T < 1 or M < 1:
        raise ValueError("T and M must be >= 1")
    if omega <= 0:
        raise ValueError("omega must be > 0")
    n = M - 1
    k = np.arange(M)[None, :]
    t = np.arange(T)[:, None]
    a = omega * (t + 1)
    b = omega * (T - t)
    log_comb = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    logp = log_comb + betaln(k + a, n - k + b) - betaln(a, b)
    P = np.exp(logp)
    return P / P.sum(axis=1, keepdims=True)


def priorSchedule(iteration: int, cfg: LossConfig, T: int, M: int) -> np.ndarray | None:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration >= cfg.priorAnnealUntil:
        return None
    prior = betaBinomialPrior(T, M, cfg.priorScale)
    if iteration < cfg.priorOnUntil:
        return prior
    lam = (iteration - cfg.priorOnUntil) / (cfg.priorAnnealUntil - cfg.priorOnUntil)
    return (1.0 - lam) * prior + lam * np.ones_like(prior)


def batch_log_prior(batch: Batch, iteration: int, cfg: LossConfig) -> torch.Tensor | None:
    """Log prior ``(B, L, M)`` for the decoder rows of ``batch`` (zero outside each item)."""
    if iteration >= cfg.priorAnnealUntil:
        return None
    B, L, _ = batch.dec_in.shape
    M = batch.text.shape[1]
    out = torch.zeros(B, L, M, dtype=torch.float64)
    for b in range(B):
        if bool(batch.drop_text[b]):
            continue
        rows, cols = int(batch.frames[b]) + 1, int(batch.text_len[b])
        P = priorSchedule(iteration, cfg, rows, cols)
        out[b, :rows, :cols] = torch.log(torch.as_tensor(P).clamp_min(1e-30))
    return out


# ---------------------------------------------------------------------------
# monotonic alignment (blank-free CTC over the target sequence 1..M)


def _forward_backward(logp: torch.Tensor, t_len: torch.Tensor, m_len: torch.Tensor):
    """Log-space forward/backward over monotone paths.

    ``logp`` is ``(R, T, M)`` float64.  A path starts at (0, 0), ends at
    (t_len-1, m_len-1) and advances the text index by 0 or 1 per frame.
    Returns ``(log_z, alpha, beta)``.
    """
    R, T, M = logp.shape
    ninf = torch.tensor(-np.inf, dtype=logp.dtype)
    alpha = torch.full((R, T, M), -np.inf, dtype=logp.dtype)
    alpha[:, 0, 0] = logp[:, 0, 0]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        shifted = torch.cat([ninf.expand(R, 1), prev[:, :-1]], dim=1)
        alpha[:, t] = torch.logaddexp(prev, shifted) + logp[:, t]
    rows = torch.arange(R)
    log_z = alpha[rows, t_len - 1, m_len - 1]
    beta = torch.full((R, T, M), -np.inf, dtype=logp.dtype)
    terminal = torch.full((R, M), -np.inf, dtype=logp.dtype)
    terminal[rows, m_len - 1] = 0.0
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            nxt = beta[:, t + 1] + logp[:, t + 1]
            advanced = torch.cat([nxt[:, 1:], ninf.expand(R, 1)], dim=1)
            beta[:, t] = torch.logaddexp(nxt, advanced)
        at_end = t_len - 1 == t
        beta[at_end, t] = terminal[at_end]
    return log_z, alpha, beta


class _MonotonicAlignNLL(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logp, t_len, m_len):
        with torch.no_grad():
            lp = logp.detach().to(torch.float64)
            log_z, alpha, beta = _forward_backward(lp, t_len, m_len)
            valid_t = torch.arange(lp.shape[1])[None, :] < t_len[:, None]
            occ = torch.exp(alpha + beta - log_z[:, None, None]) * valid_t[:, :, None]
        ctx.save_for_backward(occ)
        ctx.in_dtype = logp.dtype
        return (-log_z).to(logp.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (occ,) = ctx.saved_tensors
        grad = -occ * grad_out.to(torch.float64)[:, None, None]
        return grad.to(ctx.in_dtype), None, None


def monotonic_align_nll(logp: torch.Tensor, t_len: torch.Tensor, m_len: torch.Tensor) -> torch.Tensor:
    """Per-row negative log path-sum for ``(R, T, M)`` log attention probabilities."""
    t_len = torch.as_tensor(t_len, dtype=torch.long)
    m_len = torch.as_tensor(m_len, dtype=torch.long)
    if bool((t_len < m_len).any()):
        raise InfeasibleAlignment("alignment needs at least as many frames as text tokens")
    return _MonotonicAlignNLL.apply(logp, t_len, m_len)


def ctcAlignLoss(softAttn) -> tuple[float, np.ndarray]:
    """Summed alignment loss over heads and its gradient w.r.t. the attention rows.

    ``softAttn`` is a ``(T, M)`` matrix or a stack ``(H, T, M)`` of row-stochastic
    matrices; a dict keyed by ``(layer, head)`` is also accepted.
    """
    keys = None
    if isinstance(softAttn, dict):
        keys = list(softAttn)
        softAttn = np.stack([softAttn[k] for k in keys])
    A = np.asarray(softAttn, dtype=np.float64)
    single = A.ndim == 2
    if single:
        A = A[None]
    R, T, M = A.shape
    if T < M:
        raise InfeasibleAlignment(f"T={T} frames cannot cover M={M} text tokens")
    p = torch.as_tensor(A)
    logp = torch.log(p).requires_grad_(True)
    nll = monotonic_align_nll(logp, torch.full((R,), T), torch.full((R,), M))
    total = nll.sum()
    total.backward()
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = np.where(A > 0, logp.grad.numpy() / A, 0.0)
    if single:
        grad = grad[0]
    elif keys is not None:
        grad = {k: grad[i] for i, k in enumerate(keys)}
    return total.item(), grad


def align_loss(attn_maps: dict, batch: Batch) -> torch.Tensor:
    """Alignment loss summed over text cross-attention layers and heads, averaged over items."""
    keep = ~batch.drop_text
    if not bool(keep.any()):
        return torch.zeros((), dtype=next(iter(attn_maps.values())).dtype)
    t_len = batch.frames[keep] + 1
    m_len = batch.text_len[keep]
    total = 0.0
    for attn in attn_maps.values():
        a = attn[keep]                                  # (B', heads, L, M)
        Bk, Hh, L, M = a.shape
        logp = torch.log(a.clamp_min(1e-30)).reshape(Bk * Hh, L, M)
        nll = monotonic_align_nll(logp, t_len.repeat_interleave(Hh), m_len.repeat_interleave(Hh))
        total = total + nll.view(Bk, Hh).sum(dim=1)
    return total.mean()


# ---------------------------------------------------------------------------
# combined loss


def totalLoss(model: CodecLM, batch: Batch, iteration: int, cfg: LossConfig):
    """``token + alignCoeff * align`` for a teacher-forced batch.

    Returns ``(loss, parts)``; call ``loss.backward()`` for parameter gradients.
    """
    log_prior = batch_log_prior(batch, iteration, cfg)
    logits, attn = model(batch, log_prior, return_attn=True)
    tok = token_loss(logits, batch.target)
    if cfg.alignCoeff == 0:
        return tok, {"token": tok.item(), "align": 0.0, "total": tok.item()}
    al = align_loss(attn, batch)
    loss = tok + cfg.alignCoeff * al
    return loss, {"token": tok.item(), "align": al.item(), "total": loss.item()}
