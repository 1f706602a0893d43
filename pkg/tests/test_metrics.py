import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tokalign.metrics import cer, cerWer, edit_distance, split_words
from tokalign.world import DomainError


def wagner_fischer(a, b):
    """Full-matrix reference implementation."""
    D = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    D[:, 0] = np.arange(len(a) + 1)
    D[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            D[i, j] = min(D[i - 1, j] + 1, D[i, j - 1] + 1, D[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(D[-1, -1])


def sym(word):
    return [ord(c) - ord("a") + 1 for c in word]


def test_identity():
    assert cerWer([1, 2, 0, 3], [1, 2, 0, 3]) == (0.0, 0.0)


def test_kitten_sitting():
    assert cer(sym("kitten"), sym("sitting")) == pytest.approx(3 / 7)


def test_one_word_swapped_among_four():
    ref = [1, 2, 0, 3, 0, 4, 5, 0, 6]
    hyp = [1, 2, 0, 3, 0, 7, 7, 0, 6]
    assert cerWer(hyp, ref)[1] == pytest.approx(0.25)


def test_reference_denominator_convention():
    # insertions count against the reference length, so CER can exceed 1
    assert cer([1, 2, 3, 4], [1]) == pytest.approx(3.0)
    assert cer([1], [1, 2, 3, 4]) == pytest.approx(0.75)


def test_empty_reference_is_an_error():
    with pytest.raises(DomainError):
        cer([1], [])
    with pytest.raises(DomainError):
        cerWer([], [])


def test_empty_hypothesis():
    assert cerWer([], [1, 0, 2]) == (1.0, 1.0)


def test_split_words():
    assert split_words([0, 1, 2, 0, 0, 3, 0]) == [(1, 2), (3,)]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=9), st.lists(st.integers(0, 4), max_size=9))
def test_matches_full_matrix(a, b):
    assert edit_distance(a, b) == wagner_fischer(a, b)
    assert edit_distance(a, b) == edit_distance(b, a)
