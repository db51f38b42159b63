import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctcreorder.ctc_core import (
    Vocabulary, collapse, ctc_forward_backward, ctc_grad, ctc_log_likelihood,
    ctc_log_likelihood_bruteforce, greedy_decode, load_lattice, log_normalize,
    min_frames, save_lattice, token_frames,
)
from ctcreorder.errors import DataError, InstanceTooLarge, NumericalError

A, B = 1, 2
BL = 0


def random_lattice(rng, T, V, scale=2.0):
    return log_normalize(rng.normal(size=(T, V)) * scale)


def uniform(T, V):
    return np.log(np.full((T, V), 1.0 / V))


# --- collapse / min_frames -------------------------------------------------

@pytest.mark.parametrize("path, expected", [
    ([A, A, BL, B], [A, B]),
    ([BL, BL, BL], []),
    ([A, BL, A], [A, A]),
    ([A, A, A], [A]),
    ([], []),
])
def test_collapse(path, expected):
    assert collapse(path) == expected


def test_collapse_rejects_bad_ids():
    with pytest.raises(DataError):
        collapse([0, 5], vocab_size=3)
    with pytest.raises(DataError):
        collapse([-1])


@pytest.mark.parametrize("target, expected", [([A, B], 2), ([A, A], 3), ([], 0), ([A, A, A, B], 6)])
def test_min_frames(target, expected):
    assert min_frames(target) == expected


def test_vocabulary_invariants():
    v = Vocabulary(("<b>", "a", "b"))
    assert v.encode(["a", "b"]) == [1, 2]
    assert v.decode([2, 1]) == ["b", "a"]
    with pytest.raises(DataError):
        Vocabulary(("<b>",))
    with pytest.raises(DataError):
        Vocabulary(("<b>", "a", "a"))
    with pytest.raises(DataError):
        v.index("zzz")


# --- likelihood ------------------------------------------------------------

def test_two_frame_uniform_single_label():
    # paths a-, -a, aa out of four
    assert ctc_log_likelihood(uniform(2, 2), [A]) == pytest.approx(math.log(0.75), abs=1e-12)


def test_three_frame_uniform_two_labels():
    # aab, abb, ab-, a-b, -ab out of 27
    assert ctc_log_likelihood(uniform(3, 3), [A, B]) == pytest.approx(math.log(5 / 27), abs=1e-12)


def test_infeasible_repeat_is_minus_inf():
    assert ctc_log_likelihood(uniform(2, 2), [A, A]) == -math.inf


def test_bruteforce_values():
    assert ctc_log_likelihood_bruteforce(uniform(2, 2), [A]) == pytest.approx(math.log(0.75), abs=1e-12)
    assert ctc_log_likelihood_bruteforce(uniform(2, 3), [A, B, A]) == -math.inf
    lat = random_lattice(np.random.default_rng(3), 1, 3)
    assert ctc_log_likelihood_bruteforce(lat, []) == pytest.approx(lat[0, BL], abs=1e-15)


def test_bruteforce_size_guard():
    with pytest.raises(InstanceTooLarge):
        ctc_log_likelihood_bruteforce(uniform(15, 3), [A])


def test_dp_matches_bruteforce_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T, V = int(rng.integers(1, 7)), int(rng.integers(2, 4))
        lat = random_lattice(rng, T, V)
        y = [int(v) for v in rng.integers(1, V, size=int(rng.integers(0, 5)))]
        dp, bf = ctc_log_likelihood(lat, y), ctc_log_likelihood_bruteforce(lat, y)
        if bf == -math.inf:
            assert dp == -math.inf
        else:
            assert abs(dp - bf) <= 1e-9


def test_total_probability_over_all_targets():
    rng = np.random.default_rng(1)
    T, V = 5, 3
    lat = random_lattice(rng, T, V)
    total = sum(
        math.exp(ctc_log_likelihood(lat, list(y)))
        for n in range(T + 1) for y in itertools.product(range(1, V), repeat=n)
    )
    assert total == pytest.approx(1.0, abs=1e-9)


def test_relabeling_invariance():
    rng = np.random.default_rng(2)
    lat = random_lattice(rng, 6, 4)
    perm = [0, 3, 1, 2]  # non-blank ids permuted, blank fixed
    relabeled = np.empty_like(lat)
    for k in range(4):
        relabeled[:, perm[k]] = lat[:, k]
    y = [1, 2, 2, 3]
    assert ctc_log_likelihood(lat, y) == pytest.approx(
        ctc_log_likelihood(relabeled, [perm[k] for k in y]), abs=1e-12)


def test_dimension_mismatch_errors():
    with pytest.raises(DataError):
        ctc_log_likelihood(uniform(3, 3), [5])
    with pytest.raises(DataError):
        ctc_log_likelihood(np.zeros(4), [1])
    with pytest.raises(DataError):
        ctc_forward_backward(uniform(3, 3)[None], [3, 3], [[1]])


def test_batched_equals_single_with_padding():
    rng = np.random.default_rng(5)
    lats = [random_lattice(rng, T, 4) for T in (3, 7, 5)]
    ys = [[1], [2, 2, 3], []]
    batch = np.zeros((3, 7, 4))
    for b, lat in enumerate(lats):
        batch[b, : len(lat)] = lat
    ll, gamma = ctc_forward_backward(batch, [3, 7, 5], ys)
    for b, lat in enumerate(lats):
        assert ll[b] == pytest.approx(ctc_log_likelihood(lat, ys[b]), abs=1e-12)
        g = ctc_grad(lat, ys[b])
        np.testing.assert_allclose(np.exp(lat) - gamma[b, : len(lat)], g, atol=1e-12)
        assert np.all(gamma[b, len(lat):] == 0)


# --- gradient --------------------------------------------------------------

def finite_difference_grad(logits, y, h=1e-5):
    num = np.zeros_like(logits)
    for t in range(logits.shape[0]):
        for k in range(logits.shape[1]):
            up, down = logits.copy(), logits.copy()
            up[t, k] += h
            down[t, k] -= h
            num[t, k] = -(ctc_log_likelihood(log_normalize(up), y)
                          - ctc_log_likelihood(log_normalize(down), y)) / (2 * h)
    return num


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 20:
        T, V = int(rng.integers(1, 8)), int(rng.integers(2, 5))
        logits = rng.normal(size=(T, V))
        y = [int(v) for v in rng.integers(1, V, size=int(rng.integers(0, 4)))]
        if min_frames(y) > T:
            continue
        g = ctc_grad(logits, y)
        assert max_rel_err(g, finite_difference_grad(logits, y)) <= 1e-4
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-8)
        checked += 1


def test_grad_vanishes_at_optimum():
    lat = np.log(np.array([[1e-12, 1.0 - 1e-12]]))
    assert np.abs(ctc_grad(lat, [A])).max() < 1e-10


def test_grad_of_infeasible_target_errors():
    with pytest.raises(NumericalError):
        ctc_grad(uniform(2, 2), [A, A])


# --- greedy ----------------------------------------------------------------

def lattice_from_path(path, V, peak=5.0):
    logits = np.zeros((len(path), V))
    logits[np.arange(len(path)), path] = peak
    return log_normalize(logits)


def test_greedy_collapses_path():
    seq, path = greedy_decode(lattice_from_path([A, A, BL, B], 3))
    assert path == [A, A, BL, B]
    assert seq == [A, B]


def test_greedy_all_blank():
    seq, path = greedy_decode(lattice_from_path([BL, BL], 3))
    assert seq == [] and path == [BL, BL]


def test_greedy_tie_breaks_low():
    lat = np.log(np.array([[0.1, 0.4, 0.1, 0.4]]))
    assert greedy_decode(lat)[1] == [1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_greedy_output_has_no_blanks_or_merged_repeats(path):
    seq, got = greedy_decode(lattice_from_path(path, 4))
    assert got == path
    assert BL not in seq
    groups = token_frames(path)
    assert len(groups) == len(seq)
    for g in groups:
        assert all(path[f] == path[g[0]] for f in g)
        assert g == list(range(g[0], g[-1] + 1))


# --- lattice files ---------------------------------------------------------

def test_lattice_binary_roundtrip(tmp_path):
    lat = random_lattice(np.random.default_rng(9), 5, 4)
    p = tmp_path / "lat.bin"
    save_lattice(p, lat)
    raw = p.read_bytes()
    assert raw[:4] == b"CTCL" and len(raw) == 16 + 8 * 20
    back = load_lattice(p)
    assert np.array_equal(back, lat)
    save_lattice(tmp_path / "again.bin", back)
    assert (tmp_path / "again.bin").read_bytes() == raw


def test_lattice_json_fixture(tmp_path):
    p = tmp_path / "lat.json"
    p.write_text(json.dumps({"T": 2, "V": 2, "logprobs": uniform(2, 2).tolist()}))
    assert ctc_log_likelihood(load_lattice(p), [A]) == pytest.approx(math.log(0.75))
    p.write_text(json.dumps({"T": 3, "V": 2, "logprobs": uniform(2, 2).tolist()}))
    with pytest.raises(DataError):
        load_lattice(p)
