import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from branchkit import autodiff as ad
from branchkit.checks import random_ctc_instance, run_gradcheck
from branchkit.ctc import (
    AdmissibilityError,
    ctc_brute_force,
    ctc_greedy_decode,
    ctc_loss,
    edit_distance,
    format_decoded,
    init_ctc_head,
    ctc_log_probs,
    min_frames,
    token_error_rate,
)


def uniform(T, V):
    return np.full((1, T, V + 1), -math.log(V + 1))


def collapse(path):
    out = [k for k, _ in itertools.groupby(path)]
    return [k for k in out if k != 0]


def path_sum(log_probs, labels):
    """Plain-python path enumeration, independent of the vectorised oracle."""
    T, width = log_probs.shape
    total = 0.0
    for path in itertools.product(range(width), repeat=T):
        if collapse(path) == list(labels):
            total += math.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -math.log(total)


def random_log_probs(rng, T, V):
    z = rng.normal(scale=2.0, size=(T, V + 1))
    return z - np.logaddexp.reduce(z, axis=-1, keepdims=True)


def test_single_frame_single_label():
    assert abs(ctc_loss(uniform(1, 1), [[1]]).item() - math.log(2)) < 1e-12


def test_two_frames_single_label():
    loss = ctc_loss(uniform(2, 1), [[1]]).item()
    assert abs(loss - (-math.log(0.75))) < 1e-12
    assert abs(loss - 0.287682) < 1e-6
    assert abs(ctc_brute_force(uniform(2, 1)[0], [1]) - loss) < 1e-12


def test_empty_label():
    assert abs(ctc_loss(uniform(2, 1), [[]]).item() - math.log(4)) < 1e-12
    assert abs(ctc_loss(uniform(2, 1), [[]]).item() - 1.386294) < 1e-6


def test_single_frame_arbitrary_distribution(rng):
    lp = random_log_probs(rng, 1, 3)
    assert abs(ctc_brute_force(lp, [2]) + lp[0, 2]) < 1e-12
    assert abs(ctc_loss(lp[None], [[2]]).item() + lp[0, 2]) < 1e-12


def test_repeats_need_a_separating_blank():
    assert min_frames([1, 1]) == 3 and min_frames([1, 2]) == 2 and min_frames([]) == 0
    with pytest.raises(AdmissibilityError):
        ctc_loss(uniform(2, 2), [[1, 1]])
    with pytest.raises(AdmissibilityError):
        ctc_brute_force(uniform(2, 2)[0], [1, 2, 1])
    assert np.isfinite(ctc_loss(uniform(3, 2), [[1, 1]]).item())


def test_blank_in_labels_rejected():
    with pytest.raises(ValueError):
        ctc_loss(uniform(3, 2), [[0, 1]])


def test_brute_force_bounds():
    with pytest.raises(ValueError):
        ctc_brute_force(uniform(9, 1)[0], [1])
    with pytest.raises(ValueError):
        ctc_brute_force(uniform(2, 5)[0], [1])


def test_vectorised_oracle_matches_plain_enumeration(rng):
    for _ in range(20):
        T, V = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        lp = random_log_probs(rng, T, V)
        labels = list(rng.integers(1, V + 1, size=int(rng.integers(0, T + 1))))
        if min_frames(labels) > T:
            continue
        assert abs(ctc_brute_force(lp, labels) - path_sum(lp, labels)) < 1e-10


def test_loss_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        lp, labels = random_ctc_instance(rng)
        worst = max(worst, abs(ctc_loss(lp[None], [labels]).item() - ctc_brute_force(lp, labels)))
    assert worst <= 1e-9


def test_batched_loss_is_mean_of_items(rng):
    lps = [random_log_probs(rng, 6, 3) for _ in range(3)]
    labels = [[1, 2], [3, 3, 1], []]
    lengths = [6, 5, 4]
    padded = np.stack(lps)
    batch = ctc_loss(padded, labels, lengths).item()
    each = [ctc_brute_force(lp[:n], lab) for lp, lab, n in zip(lps, labels, lengths)]
    assert abs(batch - np.mean(each)) < 1e-10
    arr = np.array([[1, 2, 0], [3, 3, 1], [0, 0, 0]])
    assert abs(ctc_loss(padded, arr, lengths, [2, 3, 0]).item() - batch) < 1e-14


@given(st.integers(0, 10_000))
def test_relabelling_covariance(seed):
    rng = np.random.default_rng(seed)
    lp, labels = random_ctc_instance(rng)
    V = lp.shape[1] - 1
    perm = np.concatenate([[0], 1 + rng.permutation(V)])  # old token k becomes perm[k]
    relabelled = np.empty_like(lp)
    relabelled[:, perm] = lp
    a = ctc_loss(lp[None], [labels]).item()
    b = ctc_loss(relabelled[None], [[int(perm[k]) for k in labels]]).item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_extra_uniform_frame_keeps_loss_finite(rng):
    for _ in range(50):
        lp, labels = random_ctc_instance(rng)
        longer = np.concatenate([lp, np.full((1, lp.shape[1]), -math.log(lp.shape[1]))])
        assert np.isfinite(ctc_loss(longer[None], [labels]).item())


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck(seed):
    assert run_gradcheck("ctc_loss", seed) < 1e-4


def test_gradient_flows_to_head(rng):
    head = init_ctc_head(rng, 4, 3)
    x = ad.Tensor(rng.normal(size=(2, 5, 4)))
    loss = ctc_loss(ctc_log_probs(x, head), [[1, 2], [3]])
    ad.backward(loss)
    assert head.proj.weight.grad is not None and np.abs(head.proj.weight.grad).max() > 0
    assert head.vocab_size == 3


def onehot(ids, V=3):
    lp = np.full((len(ids), V + 1), -10.0)
    lp[np.arange(len(ids)), ids] = 0.0
    return lp


def test_greedy_decode_collapse_rules():
    assert ctc_greedy_decode(onehot([0, 1, 1, 0, 2])) == [[1, 2]]
    assert ctc_greedy_decode(onehot([0, 0, 0])) == [[]]
    assert ctc_greedy_decode(onehot([1, 0, 1])) == [[1, 1]]
    batch = np.stack([onehot([1, 2, 3]), onehot([3, 3, 0])])
    assert ctc_greedy_decode(batch, lengths=[2, 3]) == [[1, 2], [3]]


def test_error_rate_and_formatting():
    assert edit_distance([1, 2, 3], [1, 3]) == 1
    assert edit_distance([], [4, 4]) == 2
    assert token_error_rate([[1, 2], [3, 4]], [[1, 2], [4]]) == 0.25
    assert token_error_rate([[]], [[]]) == 0.0
    assert format_decoded([[1, 2], []]) == "1 2\n\n"
    assert format_decoded([[1, 2]], ["<b>", "x", "y"]) == "x y\n"
