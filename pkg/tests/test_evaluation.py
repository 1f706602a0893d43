import math

import numpy as np
import pytest
import torch
from scipy import stats

from tokalign.decoding import CfgConfig, SamplerConfig
from tokalign.evaluation import (
    EvalItem,
    EvalSplit,
    cfgSweep,
    default_gammas,
    evaluateModel,
    format_table,
    make_split,
    run_seed,
    summarize,
    sweep_rows,
)
from tokalign.model import CodecLM, ModelConfig
from tokalign.world import DomainError, World, WorldSpec

SPEC = WorldSpec(noiseRate=0.0)
WORLD = World.from_spec(SPEC)


def tiny(seed=0):
    cfg = ModelConfig(encoderLayers=1, decoderLayers=2, hiddenDim=16, ffnDim=32, heads=2)
    return CodecLM(cfg, seed=seed).eval()


def small_split(n=4, name="unseen"):
    return make_split(WORLD, name, n, 5, 8)


def test_summarize_t_interval():
    vals = [0.1, 0.2, 0.3, 0.4, 0.5]
    s = summarize(vals)
    half = stats.t.ppf(0.975, 4) * np.std(vals, ddof=1) / math.sqrt(5)
    assert s.mean == pytest.approx(0.3)
    assert s.ci95 == pytest.approx(half)
    assert s.ci95 == pytest.approx(2.7764451 * 0.1581139 / math.sqrt(5), rel=1e-6)
    assert summarize([0.7]).ci95 is None
    assert summarize([0.2, 0.2, 0.2]).ci95 == 0.0


def test_ci_shrinks_with_more_runs():
    rng = np.random.default_rng(0)
    draws = rng.normal(size=400)
    assert summarize(draws[:200]).ci95 < summarize(draws[:10]).ci95


def test_split_construction():
    sp = small_split(6)
    assert len(sp.items) == 6
    assert {it.speakerId for it in sp.items} <= set(WORLD.unseen_speakers())
    assert all(it.context.shape == (8, SPEC.numCodebooks) for it in sp.items)
    seen = small_split(6, "seen")
    assert {it.speakerId for it in seen.items} <= set(WORLD.seen_speakers())
    again = small_split(6)
    assert all(np.array_equal(a.context, b.context) and a.text == b.text for a, b in zip(sp.items, again.items))
    with pytest.raises(DomainError):
        make_split(WORLD, "other", 3, 0, 8)


def test_run_seeds_differ():
    seeds = [run_seed(0, r) for r in range(5)]
    assert len(set(seeds)) == 5
    assert seeds == [run_seed(0, r) for r in range(5)]


def test_single_run_has_no_interval():
    rep = evaluateModel(tiny(), WORLD, small_split(), SamplerConfig(maxFrames=24), None, runCount=1)
    assert rep.runCount == 1
    for m in rep.metrics.values():
        assert m.ci95 is None and len(m.perRunValues) == 1


def test_greedy_model_has_zero_interval():
    rep = evaluateModel(tiny(), WORLD, small_split(), SamplerConfig(topK=1, maxFrames=24), CfgConfig(gamma=2.0),
                        runCount=3)
    for m in rep.metrics.values():
        assert m.ci95 == 0.0
        assert len(set(m.perRunValues)) == 1


def test_evaluation_is_pure():
    model, split = tiny(), small_split()
    s = SamplerConfig(temperature=1.3, maxFrames=24)
    a = evaluateModel(model, WORLD, split, s, CfgConfig(gamma=1.5), runCount=2, rootSeed=4)
    b = evaluateModel(model, WORLD, split, s, CfgConfig(gamma=1.5), runCount=2, rootSeed=4)
    assert a == b
    assert a.config["gamma"] == 1.5 and a.config["rootSeed"] == 4
    assert set(a.metrics) == {"cer", "wer", "ssim"}
    for m in a.metrics.values():
        assert len(m.perRunValues) == 2


def test_gamma_one_equals_no_guidance():
    model, split = tiny(), small_split()
    s = SamplerConfig(temperature=1.0, maxFrames=24)
    a = evaluateModel(model, WORLD, split, s, None, runCount=2)
    b = cfgSweep(model, WORLD, split, [1.0], s, runCount=2)[0]
    assert a.metrics == b.metrics


def test_sweep_grid_and_rows():
    assert default_gammas() == [1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6, 2.8, 3.0]
    model = tiny()
    reps = cfgSweep(model, WORLD, small_split(2), [1.0, 2.0], SamplerConfig(maxFrames=12), runCount=2)
    rows = sweep_rows(reps)
    assert [r["gamma"] for r in rows] == [1.0, 2.0]
    assert set(rows[0]) == {"gamma", "cer_mean", "cer_ci", "ssim_mean", "ssim_ci"}
    table = format_table(reps)
    assert "gamma=2" in table and "SSIM" in table
    with pytest.raises(DomainError):
        cfgSweep(model, WORLD, small_split(2), [0.5], SamplerConfig())
    with pytest.raises(DomainError):
        cfgSweep(model, WORLD, small_split(2), [], SamplerConfig())


def test_empty_split_rejected():
    with pytest.raises(DomainError):
        evaluateModel(tiny(), WORLD, EvalSplit("unseen", []), SamplerConfig())
