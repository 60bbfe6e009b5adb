from __future__ import annotations

import itertools
import json

import numpy as np
import pytest

from artifact.constraints import Cnf, satisfies, satisfies_ordered
from artifact.dp import DpCache
from artifact.errors import InputError, OracleGuardError
from artifact.hmm import random_hmm
from artifact.logspace import logsumexp
from artifact.oracle import (
    OracleReport,
    brute_joint,
    brute_next_token_joint,
    brute_prefix_logprob,
    coverage,
    naive_satisfied,
    oracle_check,
    success_rate,
)

from _instances import random_cnf


def loop_joint(hmm, cnf, prefix):
    """Per-sequence loop using the forward pass and the automaton matcher."""
    k = hmm.max_len - len(prefix)
    vals = []
    for tail in itertools.product(range(hmm.vocab_size), repeat=k):
        seq = list(prefix) + list(tail)
        if satisfies(seq, cnf, hmm.eos_token):
            vals.append(hmm.prefix_logprob(seq))
    return logsumexp(vals) if vals else -np.inf


class TestEnumeration:
    def test_empty_constraint_is_prefix_probability(self):
        hmm = random_hmm(3, 4, 5, seed=0)
        for prefix in ([], [1], [0, 2, 1]):
            assert brute_prefix_logprob(hmm, prefix) == pytest.approx(hmm.prefix_logprob(prefix), abs=1e-12)
            assert brute_joint(hmm, Cnf([]), prefix) == pytest.approx(hmm.prefix_logprob(prefix), abs=1e-12)

    def test_keystring_longer_than_horizon(self):
        hmm = random_hmm(2, 3, 3, seed=1)
        assert brute_joint(hmm, Cnf([[[0, 1, 0, 1]]])) == -np.inf

    def test_matches_sequence_loop(self):
        rng = np.random.default_rng(2)
        for i in range(10):
            hmm = random_hmm(3, 4, 5, seed=10 + i)
            cnf = random_cnf(rng, 4, hmm.eos_token)
            prefix = [int(t) for t in rng.integers(0, 3, size=rng.integers(0, 3))]
            assert brute_joint(hmm, cnf, prefix) == pytest.approx(loop_joint(hmm, cnf, prefix), abs=1e-12)

    def test_next_token_marginalizes(self):
        hmm = random_hmm(3, 4, 5, seed=3)
        cnf = Cnf([[[1]], [[2, 0]]])
        nxt = brute_next_token_joint(hmm, cnf, [0])
        assert logsumexp(nxt) == pytest.approx(brute_joint(hmm, cnf, [0]), abs=1e-12)
        with pytest.raises(InputError):
            brute_next_token_joint(hmm, cnf, [0] * 5)

    def test_block_boundaries(self):
        # more completions than a single block holds
        hmm = random_hmm(2, 5, 8, seed=4)
        assert brute_prefix_logprob(hmm, []) == pytest.approx(0.0, abs=1e-10)

    def test_guard(self):
        hmm = random_hmm(2, 10, 8, seed=5)
        with pytest.raises(OracleGuardError):
            brute_joint(hmm, Cnf([[[1]]]), guard=10**6)

    def test_bad_prefix(self):
        hmm = random_hmm(2, 3, 3, seed=6)
        with pytest.raises(InputError):
            brute_joint(hmm, Cnf([]), [0, 0, 0, 0])
        with pytest.raises(InputError):
            brute_joint(hmm, Cnf([]), [7])


class TestNaiveMatcher:
    def test_agrees_with_automaton(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            cnf = random_cnf(rng, 5, 4, clauses=(1, 3))
            seqs = rng.integers(0, 5, size=(20, 7))
            got = naive_satisfied(seqs, cnf, 4)
            np.testing.assert_array_equal(got, [satisfies(s, cnf, 4) for s in seqs.tolist()])

    def test_ordered_agrees_with_automaton(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            cnf = random_cnf(rng, 5, 4, clauses=(1, 3), ordered=True)
            order = rng.permutation(cnf.num_clauses).tolist()
            seqs = rng.integers(0, 5, size=(20, 7))
            got = naive_satisfied(seqs, cnf, 4, order)
            np.testing.assert_array_equal(got, [satisfies_ordered(s, cnf, order, 4) for s in seqs.tolist()])

    def test_ordered_needs_strictly_later_end(self):
        cnf = Cnf([[[1]], [[2]]])
        assert naive_satisfied([[1, 2, 0]], cnf, None, [0, 1])[0]
        assert not naive_satisfied([[2, 1, 0]], cnf, None, [0, 1])[0]


class TestMetrics:
    def test_coverage(self):
        cnf = Cnf([[[1]], [[2]], [[3]], [[0]]])
        assert coverage([[1, 2, 5, 5]], [cnf], eos_token=5) == 0.5
        assert coverage([[1, 5, 2, 3]], [cnf], eos_token=5) == 0.25
        assert coverage([[1], [1, 2, 3, 0]], [cnf, cnf]) == pytest.approx((0.25 + 1.0) / 2)
        assert coverage([[7]], [Cnf([])]) == 1.0

    def test_success_rate(self):
        cnf = Cnf([[[1]], [[2]]])
        seqs = [[1, 2], [2, 1], [1, 1], [0, 0]]
        assert success_rate(seqs, [cnf] * 4) == 0.5
        assert success_rate(seqs, [cnf] * 4, orders=[[0, 1]] * 4) == 0.25

    def test_recount_matches_loop(self):
        rng = np.random.default_rng(9)
        cnfs = [random_cnf(rng, 5, 4) for _ in range(50)]
        seqs = rng.integers(0, 5, size=(50, 6)).tolist()
        expected = np.mean([satisfies(s, c, 4) for s, c in zip(seqs, cnfs)])
        assert success_rate(seqs, cnfs, 4) == expected

    def test_coverage_matches_recount(self):
        rng = np.random.default_rng(10)
        cnfs = [random_cnf(rng, 5, 4, clauses=(1, 4)) for _ in range(50)]
        seqs = rng.integers(0, 5, size=(50, 6)).tolist()
        fractions = []
        for seq, cnf in zip(seqs, cnfs):
            met = sum(satisfies(seq, Cnf([clause]), 4) for clause in cnf.clauses)
            fractions.append(met / cnf.num_clauses)
        assert coverage(seqs, cnfs, 4) == pytest.approx(np.mean(fractions), abs=1e-15)

    def test_misaligned(self):
        with pytest.raises(InputError):
            coverage([[1]], [])
        with pytest.raises(InputError):
            success_rate([], [])


class TestReport:
    def test_oracle_check_is_exact(self):
        hmm = random_hmm(3, 4, 5, seed=10)
        cache = DpCache(hmm, Cnf([[[1, 2]], [[0]]]))
        report = oracle_check(cache, [[], [1], [1, 2, 0, 3, 3]])
        assert report.max_error < 1e-10
        assert len(report.queries) == 3 + 2 * 4

    def test_json_encoding_of_infinities(self):
        report = OracleReport()
        report.add("a", -np.inf, -np.inf)
        report.add("b", -1.0, -1.5)
        doc = json.loads(json.dumps(report.to_dict()))
        assert doc["queries"][0]["exact"] == "-inf"
        assert doc["queries"][0]["abs_error"] == 0.0
        assert doc["max_abs_error"] == 0.5
        report.add("c", -np.inf, -2.0)
        assert report.to_dict()["max_abs_error"] == "inf"
