"""Synthetic token world standing in for audio, codec, ASR and speaker verification.

A world maps ``(text, speaker)`` to a ``T x N`` code grid.  Each text symbol owns
one code per codebook; a speaker applies a per-codebook bijection on code values.
The default bijection family XORs the low "speaker bits" of every code with a
seeded mask, so a speaker's identity is readable from any of its frames.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SEPARATOR = 0
WORLD_FORMAT = "tokalign.world"
FORMAT_VERSION = "1.0"


class DomainError(ValueError):
    """Input outside the domain of an operation."""


@dataclass(frozen=True)
class WorldSpec:
    alphabetSize: int = 16
    numSpeakers: int = 8
    numUnseenSpeakers: int = 4
    framesPerSymbol: int = 4
    numCodebooks: int = 4
    codebookSize: int = 64
    noiseRate: float = 0.05
    seed: int = 0
    minTextLen: int = 3
    maxTextLen: int = 8
    challengeMinLen: int = 8
    challengeMaxLen: int = 10

    def __post_init__(self):
        if self.alphabetSize < 2:
            raise DomainError("alphabetSize must be >= 2")
        if self.numSpeakers < 2:
            raise DomainError("numSpeakers must be >= 2")
        if self.numUnseenSpeakers < 0:
            raise DomainError("numUnseenSpeakers must be >= 0")
        if self.framesPerSymbol < 1 or self.numCodebooks < 1:
            raise DomainError("framesPerSymbol and numCodebooks must be >= 1")
        V = self.codebookSize
        if V < 4 or V & (V - 1):
            raise DomainError("codebookSize must be a power of two >= 4")
        if self.speakerBits < 0:
            raise DomainError("codebookSize too small for this alphabet and codebook count")
        if not 0.0 <= self.noiseRate <= 1.0:
            raise DomainError("noiseRate must lie in [0, 1]")
        if not 1 <= self.minTextLen <= self.maxTextLen:
            raise DomainError("need 1 <= minTextLen <= maxTextLen")
        if not 7 <= self.challengeMinLen <= self.challengeMaxLen:
            raise DomainError("need 7 <= challengeMinLen <= challengeMaxLen")

    @property
    def totalSpeakers(self) -> int:
        return self.numSpeakers + self.numUnseenSpeakers

    @property
    def contentBits(self) -> int:
        """Bits of each code that carry the symbol.

        Enough for the symbol to be recoverable from any ``N - 1`` codebooks,
        so one corrupted codebook per frame can be outvoted.
        """
        need = math.ceil(math.log2(self.alphabetSize))
        return max(1, math.ceil(need / max(self.numCodebooks - 1, 1)))

    @property
    def speakerBits(self) -> int:
        return int(math.log2(self.codebookSize)) - self.contentBits

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Utterance:
    text: list[int]
    speakerId: int
    tokens: np.ndarray
    role: str = "target"


class World:
    """Code tables for one :class:`WorldSpec`.

    ``base[a, n]`` is the code of symbol ``a`` in codebook ``n`` before the speaker
    transform; ``perms[s, n]`` is speaker ``s``'s bijection on codebook ``n``.
    """

    def __init__(self, spec: WorldSpec, base: np.ndarray, perms: np.ndarray):
        A, N, V = spec.alphabetSize, spec.numCodebooks, spec.codebookSize
        if base.shape != (A, N) or perms.shape != (spec.totalSpeakers, N, V):
            raise DomainError("code table shapes do not match the spec")
        for row in perms.reshape(-1, V):
            if not np.array_equal(np.sort(row), np.arange(V)):
                raise DomainError("speaker transform is not a bijection")
        self.spec = spec
        self.base = base.astype(np.int64)
        self.perms = perms.astype(np.int64)
        self.inverse = np.argsort(self.perms, axis=-1)
        # table[s, a, n]: emitted code for symbol a, speaker s, codebook n
        self.table = np.take_along_axis(
            self.perms[:, None, :, :],
            np.broadcast_to(self.base[None, :, :, None], (spec.totalSpeakers, A, N, 1)),
            axis=-1,
        )[..., 0]
        counts = np.zeros((N, V))
        for n in range(N):
            np.add.at(counts[n], self.table[:, :, n].ravel(), 1.0)
        self.mean_histogram = (counts / (spec.totalSpeakers * A)).ravel()

    @classmethod
    def from_spec(cls, spec: WorldSpec) -> "World":
        return _build_world(spec)

    def seen_speakers(self) -> list[int]:
        return list(range(self.spec.numSpeakers))

    def unseen_speakers(self) -> list[int]:
        return list(range(self.spec.numSpeakers, self.spec.totalSpeakers))


def _spread_code(A: int, N: int, q: int, rng: np.random.Generator, tries: int = 200) -> np.ndarray:
    """``A`` distinct length-``N`` words over ``q`` letters with the largest minimum
    Hamming distance a seeded greedy search can reach."""
    words = np.stack(np.unravel_index(np.arange(q**N), (q,) * N), axis=1)
    for d in range(N, 0, -1):
        for _ in range(tries if d > 1 else 1):
            picked: list[np.ndarray] = []
            for w in words[rng.permutation(len(words))]:
                if all(np.count_nonzero(w != p) >= d for p in picked):
                    picked.append(w)
                    if len(picked) == A:
                        return np.stack(picked)
    raise DomainError("alphabet does not fit in the content space")


@functools.lru_cache(maxsize=32)
def _build_world(spec: WorldSpec) -> World:
    A, N, V = spec.alphabetSize, spec.numCodebooks, spec.codebookSize
    bits = spec.speakerBits
    root = np.random.SeedSequence([spec.seed, 0x70C])
    table_seq, *speaker_seqs = root.spawn(1 + spec.totalSpeakers)
    rng = np.random.default_rng(table_seq)
    base = _spread_code(A, N, 1 << spec.contentBits, rng) << bits
    perms = np.empty((spec.totalSpeakers, N, V), dtype=np.int64)
    codes = np.arange(V)
    for s, seq in enumerate(speaker_seqs):
        srng = np.random.default_rng(seq)
        masks = srng.integers(0, 1 << bits, size=N) if bits else np.zeros(N, dtype=np.int64)
        for n in range(N):
            perms[s, n] = codes ^ masks[n]
    return World(spec, base, perms)


def _as_world(world_or_spec) -> World:
    if isinstance(world_or_spec, World):
        return world_or_spec
    return World.from_spec(world_or_spec)


def synthesize(world, text: Sequence[int], speakerId: int, rngSeed: int,
               noiseRate: float | None = None) -> np.ndarray:
    """Render ``text`` spoken by ``speakerId`` as a ``(D*len(text), N)`` code grid."""
    world = _as_world(world)
    spec = world.spec
    if not 0 <= speakerId < spec.totalSpeakers:
        raise DomainError(f"speaker {speakerId} out of range")
    text = np.asarray(text, dtype=np.int64).reshape(-1)
    if text.size and (text.min() < 0 or text.max() >= spec.alphabetSize):
        raise DomainError("text symbol out of range")
    grid = np.repeat(world.table[speakerId][text], spec.framesPerSymbol, axis=0)
    rate = spec.noiseRate if noiseRate is None else noiseRate
    if rate > 0 and grid.size:
        rng = np.random.default_rng([rngSeed, speakerId, 0x5EED])
        flip = rng.random(grid.shape) < rate
        noise = rng.integers(0, spec.codebookSize, size=grid.shape)
        grid = np.where(flip, noise, grid)
    return grid.reshape(-1, spec.numCodebooks)


def frame_budget(spec: WorldSpec, text: Sequence[int]) -> int:
    """Generation cap: twice the natural length plus slack, so runaway samples are cut off."""
    return 2 * spec.framesPerSymbol * len(text) + 8


def mockAsrDecode(world, grid) -> list[int]:
    """Majority-vote decoding over windows of ``framesPerSymbol`` frames."""
    world = _as_world(world)
    spec = world.spec
    grid = np.asarray(grid, dtype=np.int64).reshape(-1, spec.numCodebooks)
    D = spec.framesPerSymbol
    K = grid.shape[0] // D
    if K == 0:
        return []
    windows = grid[: K * D].reshape(K, D, spec.numCodebooks)
    # agree[k, s, a] = cells of window k matching the (symbol a, speaker s) rendering
    agree = (windows[:, None, None, :, :] == world.table[None, :, :, None, :]).sum(axis=(3, 4))
    # speaker-major flattening would prefer low speakers first; ties go to lowest symbol
    best = agree.max(axis=1)
    return [int(a) for a in best.argmax(axis=1)]


def mockSvEmbed(world, grid) -> np.ndarray:
    world = _as_world(world)
    spec = world.spec
    grid = np.asarray(grid, dtype=np.int64).reshape(-1, spec.numCodebooks)
    if grid.shape[0] == 0:
        raise DomainError("cannot embed an empty grid")
    N, V = spec.numCodebooks, spec.codebookSize
    hist = np.zeros((N, V))
    for n in range(N):
        hist[n] = np.bincount(grid[:, n], minlength=V)[:V]
    hist /= grid.shape[0]
    vec = hist.ravel() - world.mean_histogram
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        out = np.zeros_like(vec)
        out[0] = 1.0
        return out
    return vec / norm


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def _random_word(rng, spec: WorldSpec, length: int) -> list[int]:
    return [int(x) for x in rng.integers(1, spec.alphabetSize, size=length)]


def generateRegularTexts(spec: WorldSpec, count: int, rngSeed: int) -> list[list[int]]:
    """Short texts made of words separated by symbol 0."""
    rng = np.random.default_rng([spec.seed, rngSeed, 0xA11])
    texts = []
    for _ in range(count):
        length = int(rng.integers(spec.minTextLen, spec.maxTextLen + 1))
        text: list[int] = []
        while len(text) < length:
            if text:
                text.append(SEPARATOR)
            text.extend(_random_word(rng, spec, int(rng.integers(1, 4))))
        text = text[:length]
        if text[-1] == SEPARATOR:
            text[-1] = int(rng.integers(1, spec.alphabetSize))
        texts.append(text)
    return texts


def generateChallengingTexts(spec: WorldSpec, count: int, rngSeed: int) -> list[list[int]]:
    """Texts with a run of one symbol repeated 3+ times and an alternating bigram block."""
    if count < 1:
        raise DomainError("count must be >= 1")
    rng = np.random.default_rng([spec.seed, rngSeed, 0xC4A])
    texts = []
    for _ in range(count):
        length = int(rng.integers(spec.challengeMinLen, spec.challengeMaxLen + 1))
        a, b, c = (int(x) for x in rng.choice(np.arange(1, spec.alphabetSize), size=3,
                                              replace=spec.alphabetSize < 4))
        run = [a] * int(rng.integers(3, 5))
        alt = [b, c] * 2
        pieces = [run, alt]
        if rng.random() < 0.5:
            pieces.reverse()
        text = pieces[0] + [SEPARATOR] + pieces[1]
        while len(text) < length:
            text.append(SEPARATOR if text[-1] != SEPARATOR and rng.random() < 0.3
                        else int(rng.integers(1, spec.alphabetSize)))
        text = text[:max(length, len(run) + len(alt) + 1)]
        if text[-1] == SEPARATOR:
            text[-1] = a
        texts.append(text)
    return texts


def has_challenge_structure(text: Sequence[int]) -> bool:
    """True when ``text`` holds a 3-run of a non-separator and an abab block."""
    run = any(text[i] == text[i + 1] == text[i + 2] != SEPARATOR for i in range(len(text) - 2))
    alt = any(text[i] == text[i + 2] != SEPARATOR and text[i + 1] == text[i + 3] != SEPARATOR
              and text[i] != text[i + 1] for i in range(len(text) - 3))
    return run and alt


# ---------------------------------------------------------------------------
# datasets


def make_corpus(world, texts: Iterable[Sequence[int]], speakers: Sequence[int],
                rngSeed: int, role: str = "target") -> list[Utterance]:
    """One utterance per text, speakers assigned round-robin after a seeded shuffle."""
    world = _as_world(world)
    rng = np.random.default_rng([rngSeed, 0xC0])
    out = []
    for i, text in enumerate(texts):
        s = int(speakers[int(rng.integers(len(speakers)))])
        out.append(Utterance(list(text), s, synthesize(world, text, s, rngSeed * 1_000_003 + i), role))
    return out


def write_utterances(path, spec: WorldSpec, utterances: Sequence[Utterance]) -> None:
    with open(path, "w") as fh:
        header = {"format": WORLD_FORMAT, "version": FORMAT_VERSION, "spec": spec.to_dict()}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for u in utterances:
            rec = {"text": list(map(int, u.text)), "speaker": int(u.speakerId),
                   "tokens": np.asarray(u.tokens).tolist(), "role": u.role}
            fh.write(json.dumps(rec) + "\n")


def read_utterances(path) -> tuple[WorldSpec, list[Utterance]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        check_version(header, WORLD_FORMAT)
        spec = WorldSpec(**header["spec"])
        utts = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            tokens = np.asarray(rec["tokens"], dtype=np.int64).reshape(-1, spec.numCodebooks)
            utts.append(Utterance(rec["text"], rec["speaker"], tokens, rec.get("role", "target")))
    return spec, utts


def check_version(header: dict, expected_format: str) -> None:
    if header.get("format") != expected_format:
        raise DomainError(f"expected a {expected_format} file, got {header.get('format')!r}")
    major = str(header.get("version", "")).split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise DomainError(f"unsupported {expected_format} version {header.get('version')!r}")
