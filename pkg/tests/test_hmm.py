from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.errors import InputError, LengthError, StructureError
from artifact.hmm import Hmm, make_eos_absorbing, random_hmm
from artifact.logspace import logsumexp


def path_enumeration(hmm: Hmm, prefix) -> np.ndarray:
    """log Pr(x_{1:t}, z_t) by summing over every hidden path explicitly."""
    t = len(prefix)
    out = np.zeros(hmm.num_states)
    for path in itertools.product(range(hmm.num_states), repeat=t):
        p = hmm.initial[path[0]] * hmm.emission[path[0], prefix[0]]
        for i in range(1, t):
            p *= hmm.transition[path[i - 1], path[i]] * hmm.emission[path[i], prefix[i]]
        out[path[-1]] += p
    with np.errstate(divide="ignore"):
        return np.log(out)


def all_sequences_logprob(hmm: Hmm) -> np.ndarray:
    seqs = list(itertools.product(range(hmm.vocab_size), repeat=hmm.max_len))
    return np.array([hmm.prefix_logprob(s) for s in seqs])


class TestForward:
    def test_single_state_is_unigram_product(self):
        # a third token serves as EOS and is never emitted
        hmm = Hmm.from_probs([1.0], [[1.0]], [[0.7, 0.3, 0.0]], max_len=4)
        assert hmm.prefix_logprob([0, 1]) == pytest.approx(np.log(0.21), abs=1e-12)
        np.testing.assert_allclose(hmm.forward_pass([0, 1])[-1], [np.log(0.21)])

    def test_base_case(self):
        hmm = random_hmm(3, 4, 5, seed=0)
        fwd = hmm.forward_pass([2])
        np.testing.assert_allclose(fwd[0], hmm.log_initial + hmm.log_emission[:, 2])

    def test_matches_path_enumeration(self):
        hmm = random_hmm(3, 4, 6, seed=1)
        rng = np.random.default_rng(2)
        for _ in range(5):
            prefix = rng.integers(0, 3, size=5).tolist()
            fwd = hmm.forward_pass(prefix)
            np.testing.assert_allclose(fwd[-1], path_enumeration(hmm, prefix), rtol=1e-12)
            assert hmm.prefix_logprob(prefix) == pytest.approx(
                logsumexp(path_enumeration(hmm, prefix)), abs=1e-9)

    def test_every_row_of_forward_is_a_prefix(self):
        hmm = random_hmm(3, 4, 6, seed=3)
        prefix = [0, 2, 1, 1]
        fwd = hmm.forward_pass(prefix)
        for t in range(1, len(prefix) + 1):
            np.testing.assert_allclose(fwd[t - 1], hmm.forward_pass(prefix[:t])[-1])

    def test_normalization_over_all_sequences(self):
        hmm = random_hmm(3, 4, 5, seed=4)
        total = logsumexp(all_sequences_logprob(hmm))
        assert abs(total) < 1e-9

    def test_next_token_marginalization(self):
        hmm = random_hmm(4, 5, 6, seed=5)
        prefix = [1, 0, 3]
        lp = hmm.prefix_logprob(prefix)
        ext = [hmm.prefix_logprob(prefix + [v]) for v in range(5)]
        assert logsumexp(ext) == pytest.approx(lp, abs=1e-12)
        fwd = hmm.forward_pass(prefix)[-1]
        np.testing.assert_allclose(hmm.next_token_logprobs(fwd), ext, atol=1e-12)

    def test_markov_property(self):
        # Pr(x_{t:n} | z_t, x_{1:t-1}) does not depend on x_{1:t-1}
        # checked by enumerating full sequences and hidden paths
        hmm = random_hmm(2, 3, 4, seed=6)
        h, t = hmm.num_states, 3

        def joint(seq, path):
            p = hmm.initial[path[0]] * hmm.emission[path[0], seq[0]]
            for i in range(1, len(seq)):
                p *= hmm.transition[path[i - 1], path[i]] * hmm.emission[path[i], seq[i]]
            return p

        future = (0, 1)
        for z in range(h):
            conditionals = []
            for history in [(0, 0), (1, 0), (0, 1)]:
                num = den = 0.0
                for path in itertools.product(range(h), repeat=hmm.max_len):
                    if path[t - 1] != z:
                        continue
                    for rest in itertools.product(range(3), repeat=hmm.max_len - len(history)):
                        p = joint(history + rest, path)
                        den += p
                        if rest == future:
                            num += p
                conditionals.append(num / den)
            np.testing.assert_allclose(conditionals, conditionals[0], rtol=1e-10)

    def test_empty_prefix(self):
        hmm = random_hmm(2, 3, 4, seed=7)
        assert hmm.prefix_logprob([]) == 0.0
        with pytest.raises(InputError):
            hmm.forward_pass([])

    def test_errors(self):
        hmm = random_hmm(2, 3, 4, seed=8)
        with pytest.raises(InputError):
            hmm.forward_pass([0, 3])
        with pytest.raises(InputError):
            hmm.forward_pass([-1])
        with pytest.raises(LengthError):
            hmm.forward_pass([0] * 5)


class TestValidation:
    def test_rows_must_normalize(self):
        with pytest.raises(StructureError):
            Hmm.from_probs([0.5, 0.6], np.eye(2), [[0.5, 0.5], [0.5, 0.5]], 3)
        with pytest.raises(StructureError):
            Hmm.from_probs([1.0], [[1.0]], [[0.5, 0.4]], 3, eos_token=0)

    def test_eos_outside_absorbing_set_rejected(self):
        with pytest.raises(StructureError):
            Hmm.from_probs([1.0, 0.0], [[0.5, 0.5], [0.0, 1.0]],
                           [[0.5, 0.5], [0.0, 1.0]], 3)

    def test_absorbing_state_cannot_leave(self):
        with pytest.raises(StructureError):
            Hmm.from_probs([1.0, 0.0], [[0.5, 0.5], [0.5, 0.5]],
                           [[1.0, 0.0], [0.0, 1.0]], 3)

    def test_zero_length_rejected(self):
        with pytest.raises(StructureError):
            Hmm.from_probs([1.0], [[1.0]], [[1.0, 0.0]], 0)

    def test_degenerate_sizes(self):
        # one state emitting only EOS: the single state is absorbing
        hmm = Hmm.from_probs([1.0], [[1.0]], [[1.0]], 3)
        assert hmm.prefix_logprob([0, 0, 0]) == 0.0
        assert list(hmm.absorbing_states) == [0]


class TestSampling:
    def test_deterministic_given_seed(self):
        hmm = random_hmm(4, 6, 10, seed=9)
        assert hmm.sample_sequence(123) == hmm.sample_sequence(123)
        assert len(hmm.sample_sequence(5)) == 10

    def test_degenerate_emission(self):
        hmm = Hmm.from_probs([1.0], [[1.0]], [[1.0, 0.0]], max_len=6)
        assert hmm.sample_sequence(0) == [0] * 6

    def test_only_eos_after_eos(self):
        hmm = random_hmm(4, 5, 12, seed=10)
        seqs = hmm.sample_sequences(2000, 11)
        eos = seqs == hmm.eos_token
        seen = np.logical_or.accumulate(eos, axis=1)
        assert not np.any(seen & ~eos)
        assert eos.any()

    def test_unigram_frequencies_match_marginals(self):
        hmm = random_hmm(3, 4, 6, seed=12)
        seqs = hmm.sample_sequences(100_000, 13)
        marg = hmm.state_marginals() @ hmm.emission  # (n, V)
        expected = marg.mean(axis=0)
        observed = np.bincount(seqs.ravel(), minlength=4) / seqs.size
        np.testing.assert_allclose(observed, expected, atol=0.01)

    def test_never_samples_zero_probability_tokens(self):
        emission = [[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
        hmm = Hmm.from_probs([1.0, 0.0], [[0.9, 0.1], [0.0, 1.0]], emission, 8)
        seqs = hmm.sample_sequences(5000, 0)
        assert not np.any(seqs == 2)


class TestEosAbsorbing:
    def test_output_is_valid(self):
        rng = np.random.default_rng(0)
        emission = rng.dirichlet(np.ones(4), size=3)
        emission[:, 3] = 0.0
        emission /= emission.sum(axis=1, keepdims=True)
        raw = Hmm.from_probs(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3), size=3), emission, 5)
        hmm = make_eos_absorbing(raw)
        assert list(hmm.absorbing_states) == [2]
        np.testing.assert_array_equal(hmm.emission[2], [0, 0, 0, 1])
        assert np.all(hmm.emission[:2, 3] == 0)

    def test_non_eos_after_eos_has_zero_probability(self):
        hmm = random_hmm(3, 3, 4, seed=1)
        eos = hmm.eos_token
        assert hmm.prefix_logprob([0, eos, 1]) == -np.inf
        assert hmm.prefix_logprob([0, eos, eos]) > -np.inf

    def test_legal_sequences_carry_all_mass(self):
        hmm = random_hmm(3, 3, 4, seed=2)
        eos = hmm.eos_token
        total = 0.0
        for seq in itertools.product(range(3), repeat=4):
            legal = all(seq[i] == eos for i in range(4) if eos in seq[:i])
            if legal:
                total += np.exp(hmm.prefix_logprob(seq))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_needs_two_states(self):
        with pytest.raises(StructureError):
            make_eos_absorbing(Hmm.from_probs([1.0], [[1.0]], [[0.5, 0.5, 0.0]], 3))


class TestSerialization:
    def test_binary_round_trip_is_bit_exact(self, tmp_path):
        hmm = random_hmm(5, 7, 9, seed=3)
        path = tmp_path / "m.bin"
        hmm.save(path)
        back = Hmm.load(path)
        for name in ("log_initial", "log_transition", "log_emission"):
            assert getattr(back, name).tobytes() == getattr(hmm, name).tobytes()
        assert path.read_bytes()[:4] == b"GLT1"
        assert back.to_bytes() == hmm.to_bytes()

    def test_json_round_trip(self, tmp_path):
        hmm = random_hmm(5, 7, 9, seed=4)
        path = tmp_path / "m.json"
        hmm.save(path)
        back = Hmm.load(path)
        np.testing.assert_allclose(back.emission, hmm.emission, rtol=0, atol=1e-12)
        np.testing.assert_allclose(back.transition, hmm.transition, rtol=0, atol=1e-12)
        assert (back.max_len, back.eos_token) == (9, hmm.eos_token)

    def test_corrupt_files(self, tmp_path):
        hmm = random_hmm(2, 3, 4, seed=5)
        path = tmp_path / "m.bin"
        path.write_bytes(hmm.to_bytes()[:-3])
        with pytest.raises(InputError):
            Hmm.load(path)
        path.write_text("{not json")
        with pytest.raises(InputError):
            Hmm.load(path)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 4), V=st.integers(2, 5), n=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_forward_consistency_property(h, V, n, seed):
    hmm = random_hmm(h, V, n, seed=seed, absorbing=h >= 2)
    rng = np.random.default_rng(seed)
    prefix = hmm.sample_sequence(seed)[: int(rng.integers(0, n))]
    ext = [hmm.prefix_logprob(prefix + [v]) for v in range(V)]
    assert logsumexp(ext) == pytest.approx(hmm.prefix_logprob(prefix), abs=1e-10)
