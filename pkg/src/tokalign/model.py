"""Encoder-decoder transformer over parallel codebooks.

A non-causal text encoder feeds cross-attention in a causal frame decoder.  Each
decoder step emits ``N`` independent ``V + 1``-way distributions (the extra class
is the stop code, legal only in codebook 0).  Speaker/context conditioning comes
in one of three ways, selected by ``ModelConfig.conditioningMode``:

``svConditioned``
    a speaker vector is projected and added to every text encoding;
``decoderContext``
    context frames are prepended to the decoder input;
``multiEncoder``
    a separate context encoder feeds the odd decoder layers' cross-attention
    while the text encoder feeds the even ones.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MODES = ("svConditioned", "decoderContext", "multiEncoder")
MASK_VALUE = -1e9
IGNORE = -100


class ConfigError(ValueError):
    """Model configuration or conditioning input is inconsistent."""


@dataclass
class ModelConfig:
    conditioningMode: str = "multiEncoder"
    encoderLayers: int = 2
    decoderLayers: int = 4
    contextEncoderLayers: int = 1
    hiddenDim: int = 64
    ffnDim: int = 256
    heads: int = 4
    vocabText: int = 16
    V: int = 64
    N: int = 4
    maxFrames: int = 256
    condDropoutProb: float = 0.10
    textCrossAttnLayers: tuple = ()
    contextCrossAttnLayers: tuple = ()
    contextFrames: int = 8
    svDim: int = 0
    decoderKernel: int = 1

    def __post_init__(self):
        self.textCrossAttnLayers = tuple(int(i) for i in self.textCrossAttnLayers)
        self.contextCrossAttnLayers = tuple(int(i) for i in self.contextCrossAttnLayers)
        if self.conditioningMode not in MODES:
            raise ConfigError(f"unknown conditioningMode {self.conditioningMode!r}")
        if not 0.0 <= self.condDropoutProb <= 1.0:
            raise ConfigError("condDropoutProb must lie in [0, 1]")
        if self.hiddenDim % self.heads:
            raise ConfigError("hiddenDim must be divisible by heads")
        if self.decoderKernel != 1:
            raise ConfigError("causal-convolution decoder sublayer is not implemented (decoderKernel must be 1)")
        if self.svDim == 0:
            self.svDim = self.N * self.V
        layers = set(range(self.decoderLayers))
        if self.conditioningMode == "multiEncoder":
            if not self.textCrossAttnLayers and not self.contextCrossAttnLayers:
                self.textCrossAttnLayers = tuple(range(0, self.decoderLayers, 2))
                self.contextCrossAttnLayers = tuple(range(1, self.decoderLayers, 2))
            text, ctx = set(self.textCrossAttnLayers), set(self.contextCrossAttnLayers)
            if text & ctx or text | ctx != layers or len(text) + len(ctx) != self.decoderLayers:
                raise ConfigError("text/context cross-attention layers must partition the decoder layers")
            if not text:
                raise ConfigError("multiEncoder needs at least one text cross-attention layer")
        else:
            self.textCrossAttnLayers = tuple(range(self.decoderLayers))
            self.contextCrossAttnLayers = ()

    @property
    def eos(self) -> int:
        return self.V

    @property
    def bos(self) -> int:
        return self.V + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["textCrossAttnLayers"] = list(self.textCrossAttnLayers)
        d["contextCrossAttnLayers"] = list(self.contextCrossAttnLayers)
        return d


@dataclass
class CondInput:
    textTokens: Sequence[int]
    contextGrid: np.ndarray | None = None
    speakerVector: np.ndarray | None = None
    dropText: bool = False
    dropContext: bool = False

    def validate(self, cfg: ModelConfig) -> None:
        if len(self.textTokens) == 0 and not self.dropText:
            raise ConfigError("text tokens are empty")
        if not self.dropText and (min(self.textTokens) < 0 or max(self.textTokens) >= cfg.vocabText):
            raise ConfigError("text token out of range")
        if self.dropContext:
            return
        if cfg.conditioningMode == "svConditioned":
            if self.speakerVector is None:
                raise ConfigError("svConditioned mode requires a speaker vector")
            if np.asarray(self.speakerVector).shape != (cfg.svDim,):
                raise ConfigError(f"speaker vector must have dimension {cfg.svDim}")
        else:
            if self.contextGrid is None:
                raise ConfigError(f"{cfg.conditioningMode} mode requires a context grid")
            grid = np.asarray(self.contextGrid)
            if grid.ndim != 2 or grid.shape[1] != cfg.N or grid.shape[0] < 1:
                raise ConfigError("context grid must be a non-empty (frames, N) array")

    def dropped(self) -> "CondInput":
        return dataclasses.replace(self, dropText=True, dropContext=True)


@dataclass
class AttentionState:
    """Text cross-attention probabilities keyed by ``(layer, head)``, each ``T x M``."""
    crossAttn: dict = field(default_factory=dict)


@dataclass
class Batch:
    text: torch.Tensor          # (B, M) long
    text_len: torch.Tensor      # (B,) long, 1 for dropped text
    ctx: torch.Tensor           # (B, C, N) long
    ctx_len: torch.Tensor       # (B,) long, 1 for dropped context
    spk: torch.Tensor           # (B, svDim)
    drop_text: torch.Tensor     # (B,) bool
    drop_ctx: torch.Tensor      # (B,) bool
    dec_in: torch.Tensor        # (B, L, N) long: BOS then target frames
    target: torch.Tensor        # (B, L, N) long: target frames then stop frame, IGNORE padded
    frames: torch.Tensor        # (B,) long, target frames excluding the stop frame

    @property
    def size(self) -> int:
        return self.text.shape[0]


def make_batch(cfg: ModelConfig, conds: Sequence[CondInput], targets: Sequence[np.ndarray] | None = None,
               steps: int | None = None) -> Batch:
    """Pad conditioning inputs and targets into tensors.

    With ``targets`` the decoder input is ``[BOS] + target`` and the labels are
    ``target + [stop]``.  Without targets, ``steps`` sets an empty decoder prefix
    used only to size the tensors.
    """
    B = len(conds)
    for c in conds:
        c.validate(cfg)
    M = max(1 if c.dropText else len(c.textTokens) for c in conds)
    text = torch.zeros(B, M, dtype=torch.long)
    text_len = torch.ones(B, dtype=torch.long)
    uses_ctx = cfg.conditioningMode != "svConditioned"
    C = 1
    if uses_ctx:
        C = max(1 if c.dropContext else len(c.contextGrid) for c in conds)
    ctx = torch.zeros(B, C, cfg.N, dtype=torch.long)
    ctx_len = torch.ones(B, dtype=torch.long)
    spk = torch.zeros(B, cfg.svDim)
    for b, c in enumerate(conds):
        if not c.dropText:
            text[b, : len(c.textTokens)] = torch.as_tensor(list(c.textTokens), dtype=torch.long)
            text_len[b] = len(c.textTokens)
        if uses_ctx and not c.dropContext:
            g = torch.as_tensor(np.asarray(c.contextGrid), dtype=torch.long)
            ctx[b, : len(g)] = g
            ctx_len[b] = len(g)
        if cfg.conditioningMode == "svConditioned" and not c.dropContext:
            spk[b] = torch.as_tensor(np.asarray(c.speakerVector), dtype=torch.float32)
    drop_text = torch.tensor([bool(c.dropText) for c in conds])
    drop_ctx = torch.tensor([bool(c.dropContext) for c in conds])
    if targets is not None:
        lens = [len(t) for t in targets]
        L = max(lens) + 1
        dec_in = torch.full((B, L, cfg.N), cfg.bos, dtype=torch.long)
        target = torch.full((B, L, cfg.N), IGNORE, dtype=torch.long)
        for b, t in enumerate(targets):
            t = torch.as_tensor(np.asarray(t, dtype=np.int64).reshape(-1, cfg.N))
            if len(t) and (t.min() < 0 or t.max() >= cfg.V):
                raise ConfigError("target code out of range")
            dec_in[b, 1 : len(t) + 1] = t
            target[b, : len(t)] = t
            target[b, len(t), 0] = cfg.eos
        frames = torch.tensor(lens, dtype=torch.long)
    else:
        L = steps or 1
        dec_in = torch.full((B, L, cfg.N), cfg.bos, dtype=torch.long)
        target = torch.full((B, L, cfg.N), IGNORE, dtype=torch.long)
        frames = torch.zeros(B, dtype=torch.long)
    return Batch(text, text_len, ctx, ctx_len, spk, drop_text, drop_ctx, dec_in, target, frames)


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    # half-octave ladder from period 2 upwards: integer frequency ratios are exact
    half = dim // 2
    freq = math.pi * torch.pow(2.0, -torch.arange(half, dtype=torch.float64) / 2)
    ang = positions.to(torch.float64)[..., None] * freq
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, mem, keep, log_prior=None):
        """``keep`` is a (B, Tq, Tk) or (B, 1, Tk) boolean mask; ``log_prior`` is (B, Tq, Tk)."""
        B, Tq, H = x.shape
        Tk = mem.shape[1]
        d = H // self.heads
        q = self.q(x).view(B, Tq, self.heads, d).transpose(1, 2)
        k = self.k(mem).view(B, Tk, self.heads, d).transpose(1, 2)
        v = self.v(mem).view(B, Tk, self.heads, d).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        if log_prior is not None:
            scores = scores + log_prior[:, None]
        scores = scores.masked_fill(~keep[:, None], MASK_VALUE)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Tq, H)
        return self.o(out), attn


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn)

    def forward(self, x, keep):
        h = self.norm1(x)
        x = x + self.attn(h, h, keep)[0]
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn)

    def forward(self, x, causal_keep, mem, mem_keep, log_prior=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, causal_keep)[0]
        out, attn = self.cross_attn(self.norm2(x), mem, mem_keep, log_prior)
        x = x + out
        return x + self.ffn(self.norm3(x)), attn


class Encoder(nn.Module):
    def __init__(self, layers, dim, heads, ffn):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(dim, heads, ffn) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, lengths):
        keep = (torch.arange(x.shape[1])[None, :] < lengths[:, None])[:, None, :]
        for layer in self.layers:
            x = layer(x, keep)
        return self.norm(x)


class FrameEmbedding(nn.Module):
    """Sum of per-codebook embeddings; index V is the stop code, V + 1 the start code."""

    def __init__(self, N, V, dim):
        super().__init__()
        self.tables = nn.ModuleList(nn.Embedding(V + 2, dim) for _ in range(N))
        for t in self.tables:
            nn.init.normal_(t.weight, std=0.5)

    def forward(self, codes):
        return sum(t(codes[..., n]) for n, t in enumerate(self.tables))


def svCondition(textEncodings: torch.Tensor, speakerVector: torch.Tensor, projection: nn.Linear) -> torch.Tensor:
    """Add the projected speaker vector to every text position."""
    if speakerVector.shape[-1] != projection.in_features:
        raise ConfigError(f"speaker vector has dimension {speakerVector.shape[-1]}, "
                          f"projection expects {projection.in_features}")
    shift = projection(speakerVector)
    if textEncodings.dim() == 3 and shift.dim() == 2:
        shift = shift[:, None, :]
    return textEncodings + shift


class CodecLM(nn.Module):
    """Policy network.  ``state_dict()`` is the flat named parameter store."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.version = 0
        self.forward_calls = 0
        H = cfg.hiddenDim
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.text_emb = nn.Embedding(cfg.vocabText, H)
        nn.init.normal_(self.text_emb.weight, std=0.5)
        self.text_encoder = Encoder(cfg.encoderLayers, H, cfg.heads, cfg.ffnDim)
        self.null_text = nn.Parameter(torch.randn(H) * 0.5)
        self.frame_emb = FrameEmbedding(cfg.N, cfg.V, H)
        if cfg.conditioningMode == "svConditioned":
            self.sv_proj = nn.Linear(cfg.svDim, H)
            self.null_ctx = nn.Parameter(torch.randn(H) * 0.5)
        elif cfg.conditioningMode == "decoderContext":
            self.null_ctx = nn.Parameter(torch.randn(H) * 0.5)
        else:
            self.ctx_encoder = Encoder(cfg.contextEncoderLayers, H, cfg.heads, cfg.ffnDim)
            self.null_ctx = nn.Parameter(torch.randn(H) * 0.5)
        self.layers = nn.ModuleList(DecoderLayer(H, cfg.heads, cfg.ffnDim) for _ in range(cfg.decoderLayers))
        self.norm = nn.LayerNorm(H)
        self.head = nn.Linear(H, cfg.N * (cfg.V + 1))
        torch.random.set_rng_state(gen_state)

    # -- conditioning streams -------------------------------------------------

    def encode_text(self, batch: Batch):
        cfg = self.cfg
        M = batch.text.shape[1]
        pos = sinusoid(torch.arange(M), cfg.hiddenDim).to(self.null_text.dtype)
        x = self.text_emb(batch.text) + 0.5 * pos
        enc = self.text_encoder(x, batch.text_len)
        null = self.null_text.expand(enc.shape[0], 1, -1)
        null = F.pad(null, (0, 0, 0, M - 1))
        enc = torch.where(batch.drop_text[:, None, None], null, enc)
        if cfg.conditioningMode == "svConditioned":
            proj = self.sv_proj(batch.spk.to(enc.dtype))
            shift = torch.where(batch.drop_ctx[:, None], self.null_ctx.expand_as(proj), proj)
            enc = enc + shift[:, None, :]
        keep = (torch.arange(M)[None, :] < batch.text_len[:, None])[:, None, :]
        return enc, keep

    def encode_context(self, batch: Batch):
        C = batch.ctx.shape[1]
        pos = sinusoid(torch.arange(C), self.cfg.hiddenDim).to(self.null_ctx.dtype)
        enc = self.ctx_encoder(self.frame_emb(batch.ctx) + 0.5 * pos, batch.ctx_len)
        null = F.pad(self.null_ctx.expand(enc.shape[0], 1, -1), (0, 0, 0, C - 1))
        enc = torch.where(batch.drop_ctx[:, None, None], null, enc)
        keep = (torch.arange(C)[None, :] < batch.ctx_len[:, None])[:, None, :]
        return enc, keep

    # -- decoder --------------------------------------------------------------

    def forward(self, batch: Batch, log_prior: torch.Tensor | None = None, return_attn: bool = False):
        """Teacher-forced logits ``(B, L, N, V + 1)`` for the decoder input ``batch.dec_in``.

        ``log_prior`` (B, L, M) is added to text cross-attention scores, which
        multiplies the unnormalised attention weights by the prior.
        """
        self.forward_calls += 1
        cfg = self.cfg
        B, L, _ = batch.dec_in.shape
        dtype = self.null_text.dtype
        text_mem, text_keep = self.encode_text(batch)
        x = self.frame_emb(batch.dec_in)
        offset = 0
        if cfg.conditioningMode == "decoderContext":
            # context frames sit right-aligned in front of the start frame
            C = batch.ctx.shape[1]
            ctx = self.frame_emb(batch.ctx)
            ctx = torch.where(batch.drop_ctx[:, None, None],
                              F.pad(self.null_ctx.expand(B, 1, -1), (0, 0, 0, C - 1)), ctx)
            shift = C - batch.ctx_len
            idx = (torch.arange(C)[None, :] - shift[:, None]).clamp(min=0)
            ctx = torch.gather(ctx, 1, idx[:, :, None].expand(-1, -1, ctx.shape[-1]))
            x = torch.cat([ctx, x], dim=1)
            seq_keep = torch.cat([torch.arange(C)[None, :] >= shift[:, None],
                                  torch.ones(B, L, dtype=torch.bool)], dim=1)
            pos = (torch.arange(C + L)[None, :] - shift[:, None]).clamp(min=0)
            offset = C
        else:
            seq_keep = torch.ones(B, L, dtype=torch.bool)
            pos = torch.arange(L)[None, :].expand(B, -1)
        S = x.shape[1]
        x = x + 0.5 * sinusoid(pos, cfg.hiddenDim).to(dtype)
        causal = torch.tril(torch.ones(S, S, dtype=torch.bool))
        causal_keep = causal[None] & seq_keep[:, None, :]
        if log_prior is not None:
            log_prior = log_prior.to(dtype)
            log_prior = log_prior.masked_fill(batch.drop_text[:, None, None], 0.0)
            if offset:
                log_prior = F.pad(log_prior, (0, 0, offset, 0))
        if cfg.contextCrossAttnLayers:
            ctx_mem, ctx_keep = self.encode_context(batch)
        attn_maps = {}
        for i, layer in enumerate(self.layers):
            if i in cfg.contextCrossAttnLayers:
                x, _ = layer(x, causal_keep, ctx_mem, ctx_keep)
            else:
                x, attn = layer(x, causal_keep, text_mem, text_keep, log_prior)
                if return_attn:
                    attn_maps[i] = attn[:, :, offset:, :]
        x = self.norm(x[:, offset:])
        logits = self.head(x).view(B, L, cfg.N, cfg.V + 1)
        if return_attn:
            return logits, attn_maps
        return logits


def forward(params: CodecLM, cond: CondInput, target: np.ndarray, prior: np.ndarray | None = None):
    """Single-utterance teacher-forced pass.

    Returns ``(logits, AttentionState)``; logits have shape ``(T + 1, N, V + 1)``:
    row ``t < T`` scores target frame ``t``, row ``T`` scores the stop frame,
    and the last class of every codebook is the stop code.
    """
    cfg = params.cfg
    target = np.asarray(target, dtype=np.int64).reshape(-1, cfg.N)
    batch = make_batch(cfg, [cond], [target])
    log_prior = None
    if prior is not None:
        prior = np.asarray(prior, dtype=np.float64)
        expect = (len(target) + 1, len(cond.textTokens))
        if prior.shape != expect:
            raise ConfigError(f"prior shape {prior.shape} does not match {expect}")
        log_prior = torch.log(torch.as_tensor(prior).clamp_min(1e-30))[None]
    logits, attn = params(batch, log_prior, return_attn=True)
    state = AttentionState({(l, h): a[0, h].detach().numpy() for l, a in attn.items()
                            for h in range(a.shape[1])})
    return logits[0], state


def applyConditioningDropout(cond: CondInput, prob: float, rngSeed: int) -> CondInput:
    """Jointly drop text and context with probability ``prob``."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    u = np.random.default_rng([rngSeed, 0xD7]).random()
    return cond.dropped() if u < prob else cond


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
