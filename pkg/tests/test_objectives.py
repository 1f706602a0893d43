import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import betabinom

from tokalign.model import CodecLM, CondInput, ModelConfig, make_batch
from tokalign.objectives import (
    InfeasibleAlignment,
    LossConfig,
    align_loss,
    betaBinomialPrior,
    ctcAlignLoss,
    priorSchedule,
    tokenLoss,
    totalLoss,
)
from tokalign.world import World, WorldSpec, synthesize


def brute_force_align(A):
    """-log of the summed probability of every monotone path from (0, 0) to (T-1, M-1)."""
    T, M = A.shape
    total = 0.0
    for steps in itertools.product((0, 1), repeat=T - 1):
        if sum(steps) != M - 1:
            continue
        idx = np.concatenate([[0], np.cumsum(steps)]).astype(int)
        total += np.prod(A[np.arange(T), idx])
    return -math.log(total)


def random_stochastic(rng, T, M):
    A = rng.random((T, M)) + 1e-3
    return A / A.sum(1, keepdims=True)


def test_align_matches_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        M = int(rng.integers(1, 5))
        T = int(rng.integers(M, 7))
        A = random_stochastic(rng, T, M)
        assert ctcAlignLoss(A)[0] == pytest.approx(brute_force_align(A), abs=1e-6)


def test_align_hand_case():
    # T=2, M=2: the only path is (0,0) -> (1,1)
    A = np.array([[0.8, 0.2], [0.3, 0.7]])
    assert ctcAlignLoss(A)[0] == pytest.approx(-math.log(0.8 * 0.7))
    # M=1 always costs -sum log A[:, 0] = 0 for a single-column matrix
    assert ctcAlignLoss(np.ones((4, 1)))[0] == pytest.approx(0.0)


def test_align_gradient_finite_difference():
    rng = np.random.default_rng(1)
    A = random_stochastic(rng, 5, 3)
    _, g = ctcAlignLoss(A)
    h = 1e-6
    for t in range(5):
        for m in range(3):
            up, dn = A.copy(), A.copy()
            up[t, m] += h
            dn[t, m] -= h
            fd = (brute_force_align(up) - brute_force_align(dn)) / (2 * h)
            assert g[t, m] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_align_stack_and_dict_inputs():
    rng = np.random.default_rng(2)
    As = np.stack([random_stochastic(rng, 4, 2) for _ in range(3)])
    total, g = ctcAlignLoss(As)
    assert total == pytest.approx(sum(brute_force_align(a) for a in As))
    assert g.shape == As.shape
    d = {(0, h): As[h] for h in range(3)}
    total_d, gd = ctcAlignLoss(d)
    assert total_d == pytest.approx(total)
    assert np.allclose(gd[(0, 1)], g[1])


def test_align_infeasible():
    with pytest.raises(InfeasibleAlignment):
        ctcAlignLoss(np.full((2, 3), 1 / 3))


def test_token_loss_value_and_gradient():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(3, 2, 5))
    target = np.array([[1, 4], [0, -100], [2, 2]])
    loss, grad = tokenLoss(logits, target)
    ref = torch.nn.functional.cross_entropy(torch.tensor(logits).reshape(-1, 5), torch.tensor(target).reshape(-1),
                                            ignore_index=-100)
    assert loss == pytest.approx(ref.item())
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (tokenLoss(up, target)[0] - tokenLoss(dn, target)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, abs=1e-7)
    assert np.all(grad[1, 1] == 0)
    with pytest.raises(ValueError):
        tokenLoss(logits, np.array([[5, 0], [0, 0], [0, 0]]))


def test_prior_matches_scipy():
    for T, M, w in [(1, 1, 1.0), (5, 3, 1.0), (12, 7, 0.5), (40, 9, 2.0)]:
        P = betaBinomialPrior(T, M, w)
        for t in range(T):
            ref = betabinom.pmf(np.arange(M), M - 1, w * (t + 1), w * (T - t))
            assert np.allclose(P[t], ref / ref.sum(), atol=1e-12)
        assert np.allclose(P.sum(1), 1.0, atol=1e-9)


def test_prior_drifts_along_diagonal():
    P = betaBinomialPrior(20, 5)
    means = P @ np.arange(5)
    assert np.all(np.diff(means) > 0)
    with pytest.raises(ValueError):
        betaBinomialPrior(0, 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 30), st.floats(0.1, 5.0))
def test_prior_rows_normalised(T, M, w):
    P = betaBinomialPrior(T, M, w)
    assert P.shape == (T, M)
    assert np.all(P >= 0)
    assert np.allclose(P.sum(1), 1.0, atol=1e-9)


def test_prior_schedule_regimes():
    cfg = LossConfig(priorOnUntil=100, priorAnnealUntil=150)
    P = betaBinomialPrior(8, 3)
    assert np.array_equal(priorSchedule(0, cfg, 8, 3), P)
    assert np.array_equal(priorSchedule(99, cfg, 8, 3), P)
    mid = priorSchedule(125, cfg, 8, 3)
    assert np.allclose(mid, 0.5 * P + 0.5)
    assert priorSchedule(150, cfg, 8, 3) is None
    assert priorSchedule(10_000, cfg, 8, 3) is None
    with pytest.raises(ValueError):
        priorSchedule(-1, cfg, 8, 3)
    with pytest.raises(ValueError):
        LossConfig(priorOnUntil=5, priorAnnealUntil=4)


SPEC = WorldSpec(noiseRate=0.0)
WORLD = World.from_spec(SPEC)


def small_batch(model, drop_first=False):
    conds, targets = [], []
    for i, text in enumerate(([1, 2], [3, 0, 4], [5])):
        c = CondInput(text, contextGrid=synthesize(WORLD, [7, 8], i, 0))
        conds.append(c.dropped() if drop_first and i == 0 else c)
        targets.append(synthesize(WORLD, text, i, 1))
    return make_batch(model.cfg, conds, targets)


def tiny_model():
    cfg = ModelConfig(encoderLayers=1, decoderLayers=2, hiddenDim=16, ffnDim=32, heads=2)
    return CodecLM(cfg, seed=0)


def test_batched_align_loss_matches_per_item():
    m = tiny_model()
    batch = small_batch(m, drop_first=True)
    with torch.no_grad():
        _, attn = m(batch, return_attn=True)
    batched = align_loss(attn, batch).item()
    per_item = []
    for b in (1, 2):
        T, M = int(batch.frames[b]) + 1, int(batch.text_len[b])
        per_item.append(sum(ctcAlignLoss(a[b, h, :T, :M].numpy())[0]
                            for a in attn.values() for h in range(a.shape[1])))
    assert batched == pytest.approx(np.mean(per_item), rel=1e-5)


def test_total_loss_combines_parts():
    m = tiny_model()
    batch = small_batch(m)
    cfg = LossConfig(alignCoeff=0.5)
    loss, parts = totalLoss(m, batch, 0, cfg)
    assert parts["total"] == pytest.approx(parts["token"] + 0.5 * parts["align"], rel=1e-6)
    loss.backward()
    assert all(p.grad is not None for p in m.text_encoder.parameters())
    _, parts0 = totalLoss(m, batch, 0, LossConfig(alignCoeff=0.0))
    assert parts0["align"] == 0.0 and parts0["total"] == parts0["token"]


def test_total_loss_gradient_spot_check():
    m = tiny_model().double()
    batch = small_batch(m)
    cfg = LossConfig(alignCoeff=0.1)
    loss, _ = totalLoss(m, batch, 0, cfg)
    loss.backward()
    p = m.head.weight
    h = 1e-6
    for idx in [(0, 0), (3, 5), (100, 15)]:
        with torch.no_grad():
            p[idx] += h
            up = totalLoss(m, batch, 0, cfg)[0].item()
            p[idx] -= 2 * h
            dn = totalLoss(m, batch, 0, cfg)[0].item()
            p[idx] += h
        assert p.grad[idx].item() == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-9)
