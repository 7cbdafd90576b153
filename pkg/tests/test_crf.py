import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from focusre import tensor as T
from focusre.crf import (
    NEG_LARGE,
    CrfHead,
    bieos_constraint_init,
    crf_nll,
    log_partition,
    sequence_score,
    viterbi_decode,
)
from focusre.data import TAGS
from focusre.tensor import Tensor

from oracles import brute_log_partition, brute_viterbi, path_score


def draw(rng, T_len, n):
    return rng.normal(size=(T_len, n)) * 2, rng.normal(size=(n + 1, n)) * 2


class TestScore:
    def test_zero_params(self):
        E, A = np.zeros((3, 4)), np.zeros((5, 4))
        assert sequence_score(Tensor(E), [1, 2, 3], Tensor(A)).item() == 0.0

    def test_single_word(self, rng):
        E, A = draw(rng, 1, 3)
        assert sequence_score(Tensor(E), [2], Tensor(A)).item() == pytest.approx(A[3, 2] + E[0, 2], abs=1e-14)

    def test_matches_hand_sum(self, rng):
        E, A = draw(rng, 5, 4)
        tags = [0, 3, 3, 1, 2]
        assert sequence_score(Tensor(E), tags, Tensor(A)).item() == pytest.approx(path_score(E, A, tags), abs=1e-12)


class TestPartition:
    def test_uniform(self):
        assert log_partition(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 3)))).item() == pytest.approx(4 * math.log(3))

    def test_oracle(self, rng):
        for _ in range(30):
            T_len, n = int(rng.integers(1, 6)), int(rng.integers(1, 5))
            E, A = draw(rng, T_len, n)
            assert abs(log_partition(Tensor(E), Tensor(A)).item() - brute_log_partition(E, A)) < 1e-8

    def test_constant_shift(self, rng):
        E, A = draw(rng, 5, 3)
        base = log_partition(Tensor(E), Tensor(A)).item()
        assert log_partition(Tensor(E + 0.7), Tensor(A)).item() == pytest.approx(base + 5 * 0.7, abs=1e-12)

    def test_distribution_sums_to_one(self, rng):
        E, A = draw(rng, 4, 3)
        logZ = log_partition(Tensor(E), Tensor(A)).item()
        total = sum(math.exp(path_score(E, A, p) - logZ) for p in itertools.product(range(3), repeat=4))
        assert abs(total - 1) < 1e-10

    def test_score_below_partition(self, rng):
        E, A = draw(rng, 4, 3)
        logZ = log_partition(Tensor(E), Tensor(A)).item()
        for p in itertools.product(range(3), repeat=4):
            assert sequence_score(Tensor(E), list(p), Tensor(A)).item() <= logZ + 1e-12

    def test_batched_with_lengths_matches_unbatched(self, rng):
        n, lengths = 3, [5, 2, 4]
        E = rng.normal(size=(3, 5, n))
        A = rng.normal(size=(n + 1, n))
        batched = log_partition(Tensor(E), Tensor(A), np.array(lengths)).data
        for b, L in enumerate(lengths):
            assert batched[b] == pytest.approx(brute_log_partition(E[b, :L], A), abs=1e-10)


class TestNll:
    def test_single_tag_is_zero(self, rng):
        E, A = draw(rng, 4, 1)
        assert crf_nll(Tensor(E), [0] * 4, Tensor(A)).item() == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        T_len, n = int(r.integers(1, 7)), int(r.integers(1, 6))
        E, A = draw(r, T_len, n)
        tags = r.integers(0, n, size=T_len)
        assert crf_nll(Tensor(E), tags, Tensor(A)).item() >= -1e-12

    def test_monotone_descent(self, rng):
        E = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        A = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        gold = [1, 2, 2, 0, 3]
        losses = []
        for _ in range(10):
            E.zero_grad(), A.zero_grad()
            loss = crf_nll(E, gold, A)
            T.backward(loss)
            losses.append(loss.item())
            E.data -= 0.05 * E.grad
            A.data -= 0.05 * A.grad
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_gradient_equals_marginals_minus_gold(self, rng):
        # dNLL/dE[t, k] = P(y_t = k) - [gold_t == k]
        n, T_len = 3, 4
        E, A = draw(rng, T_len, n)
        gold = [0, 2, 1, 1]
        E_t = Tensor(E.copy(), requires_grad=True)
        T.backward(crf_nll(E_t, gold, Tensor(A)))
        logZ = brute_log_partition(E, A)
        marg = np.zeros((T_len, n))
        for p in itertools.product(range(n), repeat=T_len):
            w = math.exp(path_score(E, A, p) - logZ)
            marg[np.arange(T_len), list(p)] += w
        marg[np.arange(T_len), gold] -= 1
        np.testing.assert_allclose(E_t.grad, marg, atol=1e-10)


class TestViterbi:
    def test_oracle(self, rng):
        for _ in range(30):
            T_len, n = int(rng.integers(1, 6)), int(rng.integers(1, 5))
            E, A = draw(rng, T_len, n)
            path, score = brute_viterbi(E, A)
            got = viterbi_decode(E, A)
            assert got == path
            assert path_score(E, A, got) == score

    def test_decoupled_chain(self, rng):
        E = rng.normal(size=(6, 4))
        E[np.arange(6), [3, 1, 0, 2, 2, 1]] += 100
        assert viterbi_decode(E, np.zeros((5, 4))) == [3, 1, 0, 2, 2, 1]

    def test_all_zero_ties_go_low(self):
        assert viterbi_decode(np.zeros((5, 3)), np.zeros((4, 3))) == [0] * 5

    def test_tie_on_integer_grid(self):
        # integer-valued params create many exact ties; compare against the lexicographic oracle
        r = np.random.default_rng(3)
        for _ in range(50):
            E = r.integers(-1, 2, size=(4, 3)).astype(float)
            A = r.integers(-1, 2, size=(4, 3)).astype(float)
            assert viterbi_decode(E, A) == brute_viterbi(E, A)[0]

    def test_empty(self):
        with pytest.raises(ValueError):
            viterbi_decode(np.zeros((0, 3)), np.zeros((4, 3)))


class TestHead:
    def test_zero_projection(self, rng):
        head = CrfHead(8, 5, rng)
        head.params["crf.weight"].data[:] = 0
        em = head.emissions(Tensor(rng.normal(size=(1, 6, 8))), 4)
        assert em.shape == (1, 4, 5) and not em.data.any()

    def test_identity_slice(self, rng):
        head = CrfHead(4, 4, rng)
        head.params["crf.weight"].data[:] = np.eye(4)
        H = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(head.emissions(Tensor(H), 1).data, H[1:2])

    def test_empty_range(self, rng):
        with pytest.raises(ValueError):
            CrfHead(4, 3, rng).emissions(Tensor(np.zeros((3, 4))), 0)

    def test_constraint_init(self):
        A = bieos_constraint_init(list(TAGS))
        n = len(TAGS)
        o, b_neg, i_neg = TAGS.index("O"), TAGS.index("B-Negation"), TAGS.index("I-Negation")
        assert A[o, i_neg] == NEG_LARGE and A[n, i_neg] == NEG_LARGE
        assert A[b_neg, i_neg] == 0 and A[b_neg, o] == NEG_LARGE
        assert A[b_neg, TAGS.index("I-Degree")] == NEG_LARGE

    def test_constrained_decode_avoids_forbidden_moves(self, rng):
        A = bieos_constraint_init(list(TAGS))
        n = len(TAGS)
        for _ in range(20):
            path = viterbi_decode(rng.normal(size=(10, n)) * 3, A)
            prev = [n] + path[:-1]
            assert all(A[i, j] == 0 for i, j in zip(prev, path))
