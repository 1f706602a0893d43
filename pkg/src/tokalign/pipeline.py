"""End-to-end stages shared by the CLI and the experiment tests."""

from __future__ import annotations

import copy
import logging
from dataclasses import replace

import numpy as np
import torch

from .aligners import alignFinetune
from .config import RunConfig
from .decoding import CfgConfig
from .evaluation import EvalReport, EvalSplit, cfgSweep, evaluateModel, make_split
from .model import CodecLM
from .preference import PreferencePair, Prompt, buildPreferenceDataset, pair_samples, sample_grids
from .training import context_slice, make_cond, make_triplets, train_model
from .world import (Utterance, World, generateChallengingTexts, generateRegularTexts, make_corpus,
                    synthesize)

log = logging.getLogger(__name__)


def setup_torch(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def world_of(rc: RunConfig) -> World:
    return World.from_spec(rc.world)


def make_training_corpus(rc: RunConfig) -> list[Utterance]:
    world = world_of(rc)
    texts = generateRegularTexts(rc.world, rc.data.trainTexts, rc.seed("texts"))
    return make_corpus(world, texts, world.seen_speakers(), rc.seed("corpus"))


def train_base(rc: RunConfig, corpus: list[Utterance], log_path=None) -> CodecLM:
    world = world_of(rc)
    model = CodecLM(rc.model, seed=rc.seed("model"))
    triplets = make_triplets(corpus, rc.model.contextFrames, rc.seed("triplets"))
    train_model(model, world, triplets, rc.loss, replace(rc.train, seed=rc.seed("train")), log_path)
    return model


def preference_prompts(rc: RunConfig, model: CodecLM) -> list[Prompt]:
    """Challenging texts with several contexts each, plus regular texts with one.

    Contexts are slices of fresh utterances by training speakers.
    """
    world = world_of(rc)
    d = rc.data
    rng = np.random.default_rng(rc.seed("prompts"))
    speakers = world.seen_speakers()
    hard = generateChallengingTexts(rc.world, max(d.prefChallengingTexts, 1), rc.seed("hard"))
    hard = hard[: d.prefChallengingTexts]
    easy = generateRegularTexts(rc.world, d.prefRegularTexts, rc.seed("easy")) if d.prefRegularTexts else []
    plan = [t for t in hard for _ in range(d.prefContextsPerChallenging)] + easy
    ctx_texts = generateRegularTexts(rc.world, max(len(plan), 1), rc.seed("ctx"))
    prompts = []
    for i, text in enumerate(plan):
        s = int(speakers[int(rng.integers(len(speakers)))])
        ctx = context_slice(synthesize(world, ctx_texts[i], s, int(rng.integers(2**31))),
                            rc.model.contextFrames, rng)
        gt = synthesize(world, text, s, int(rng.integers(2**31)))
        prompts.append(Prompt(make_cond(model.cfg, world, text, ctx), ctx, gt))
    return prompts


def generate_preferences(rc: RunConfig, model: CodecLM, mode: str | None = None,
                         gtAsChosen: bool | None = None, P: int | None = None) -> list[PreferencePair]:
    mode = mode or rc.align.method
    gt = rc.data.gtAsChosen if gtAsChosen is None else gtAsChosen
    sampler = replace(rc.sampler, temperature=rc.data.prefTemperature, rngSeed=rc.seed("prefs"))
    prompts = preference_prompts(rc, model)
    return buildPreferenceDataset(model, world_of(rc), prompts, P or rc.data.samplesPerPrompt,
                                  sampler, mode, gtAsChosen=gt)


def generate_preference_sets(rc: RunConfig, model: CodecLM, modes=("dpo", "rpo")) -> dict[str, list[PreferencePair]]:
    """One sampling pass paired once per mode; equals ``generate_preferences`` for each mode."""
    sampler = replace(rc.sampler, temperature=rc.data.prefTemperature, rngSeed=rc.seed("prefs"))
    prompts = preference_prompts(rc, model)
    world = world_of(rc)
    grids = sample_grids(model, world, prompts, rc.data.samplesPerPrompt, sampler)
    return {m: pair_samples(world, prompts, grids, m, rc.data.gtAsChosen) for m in modes}


def align(rc: RunConfig, base: CodecLM, pairs: list[PreferencePair], method: str | None = None):
    cfg = replace(rc.align, method=method or rc.align.method, seed=rc.seed("align"))
    policy = copy.deepcopy(base)
    reference = copy.deepcopy(base)
    return alignFinetune(policy, reference, pairs, cfg)


def eval_split(rc: RunConfig, split: str | None = None, items: int | None = None) -> EvalSplit:
    return make_split(world_of(rc), split or rc.data.evalSplit, items or rc.data.evalItems,
                      rc.seed("eval-split"), rc.model.contextFrames, rc.data.evalChallenging)


def evaluate(rc: RunConfig, model: CodecLM, split: EvalSplit, gamma: float | None = None,
             runs: int | None = None) -> EvalReport:
    g = rc.cfg.gamma if gamma is None else gamma
    guidance = CfgConfig(gamma=g, enabled=rc.cfg.enabled and g != 1)
    return evaluateModel(model, world_of(rc), split, replace(rc.sampler, rngSeed=0), guidance,
                         runs or rc.data.evalRuns, rc.seed("eval"))


def sweep(rc: RunConfig, model: CodecLM, split: EvalSplit, gammas=None, runs: int | None = None):
    return cfgSweep(model, world_of(rc), split, gammas, rc.sampler, runs or rc.data.evalRuns, rc.seed("eval"))
