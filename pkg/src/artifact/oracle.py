"""Brute-force reference values and evaluation metrics.

Everything here enumerates completions explicitly and matches keystrings
by plain array comparison, so it shares no code with the automaton or the
DP it is used to check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constraints import Cnf, ordered_progress, remaining_mask
from .errors import InputError, OracleGuardError
from .hmm import Hmm

ENUM_GUARD = 10**7
_BLOCK = 1 << 16


def _completion_blocks(V: int, k: int):
    """All ``V**k`` completions in odometer order, in blocks of bounded size."""
    tail = 0
    while tail < k and V ** (tail + 1) <= _BLOCK:
        tail += 1
    if tail == 0 and k > 0:
        tail = 1
    tails = np.array(list(itertools.product(range(V), repeat=tail)), dtype=np.int64).reshape(V ** tail, tail)
    for head in itertools.product(range(V), repeat=k - tail):
        block = np.empty((tails.shape[0], k), dtype=np.int64)
        block[:, :k - tail] = head
        block[:, k - tail:] = tails
        yield block


def _batch_logprob(hmm: Hmm, seqs: np.ndarray) -> np.ndarray:
    """Joint log-probability of every row, scaled linear-space forward pass."""
    alpha = hmm.initial[None, :] * hmm.emission[:, seqs[:, 0]].T
    log_scale = np.zeros(seqs.shape[0])
    for t in range(1, seqs.shape[1]):
        s = alpha.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_scale += np.log(s)
            alpha = np.where(s[:, None] > 0, alpha / s[:, None], 0.0)
        alpha = (alpha @ hmm.transition) * hmm.emission[:, seqs[:, t]].T
    with np.errstate(divide="ignore"):
        return log_scale + np.log(alpha.sum(axis=1))


def _occurrence_ends(seqs: np.ndarray, keystring: Sequence[int], eos_token: int | None) -> np.ndarray:
    """Boolean ``(B, n)``: keystring occurrence ending at each position, inside the text."""
    B, n = seqs.shape
    L = len(keystring)
    ends = np.zeros((B, n), dtype=bool)
    if L <= n:
        hit = np.ones((B, n - L + 1), dtype=bool)
        for k, tok in enumerate(keystring):
            hit &= seqs[:, k:n - L + 1 + k] == tok
        ends[:, L - 1:] = hit
    if eos_token is not None:
        is_eos = seqs == eos_token
        first = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1), n)
        ends &= np.arange(n)[None, :] <= first[:, None]
    return ends


def _clause_ends(seqs: np.ndarray, cnf: Cnf, eos_token: int | None) -> list[np.ndarray]:
    out = []
    for clause in cnf.clauses:
        acc = np.zeros(seqs.shape, dtype=bool)
        for ks in clause:
            acc |= _occurrence_ends(seqs, ks, eos_token)
        out.append(acc)
    return out


def naive_satisfied(seqs: np.ndarray, cnf: Cnf, eos_token: int | None = None,
                    order: Sequence[int] | None = None) -> np.ndarray:
    """Per-row constraint check by direct substring comparison.

    With ``order``, clause ``order[k+1]`` needs an occurrence ending strictly
    after some occurrence of ``order[k]`` that itself is part of such a chain.
    """
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    ends = _clause_ends(seqs, cnf, eos_token)
    if order is None:
        ok = np.ones(seqs.shape[0], dtype=bool)
        for e in ends:
            ok &= e.any(axis=1)
        return ok
    if len(order) == 0:
        return np.ones(seqs.shape[0], dtype=bool)
    reach = ends[order[0]]
    for c in order[1:]:
        # some chain ends strictly before position j
        before = np.zeros(seqs.shape, dtype=bool)
        before[:, 1:] = np.logical_or.accumulate(reach, axis=1)[:, :-1]
        reach = ends[c] & before
    return reach.any(axis=1)


def _enumerate(hmm: Hmm, cnf: Cnf, prefix: Sequence[int], n: int, order, guard: int):
    prefix = [int(t) for t in prefix]
    if len(prefix) > n:
        raise InputError(f"prefix longer than horizon {n}")
    if any(not 0 <= t < hmm.vocab_size for t in prefix):
        raise InputError("prefix token out of range")
    k = n - len(prefix)
    if hmm.vocab_size ** k > guard:
        raise OracleGuardError(f"{hmm.vocab_size}^{k} completions exceed the guard {guard}")
    for block in _completion_blocks(hmm.vocab_size, k):
        seqs = np.empty((block.shape[0], n), dtype=np.int64)
        seqs[:, :len(prefix)] = prefix
        seqs[:, len(prefix):] = block
        yield seqs, _batch_logprob(hmm, seqs), naive_satisfied(seqs, cnf, hmm.eos_token, order)


def _logsum(parts: list[np.ndarray]) -> float:
    if not parts:
        return -np.inf
    vals = np.concatenate(parts)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return -np.inf
    m = vals.max()
    return float(m + np.log(np.exp(vals - m).sum()))


def brute_joint(hmm: Hmm, cnf: Cnf, prefix: Sequence[int] = (), n: int | None = None,
                order: Sequence[int] | None = None, guard: int = ENUM_GUARD) -> float:
    """``log Pr(x_{1:t}, constraint)`` by summing over every completion to length ``n``."""
    n = hmm.max_len if n is None else n
    parts = [lp[ok] for _, lp, ok in _enumerate(hmm, cnf, prefix, n, order, guard)]
    return _logsum(parts)


def brute_next_token_joint(hmm: Hmm, cnf: Cnf, prefix: Sequence[int] = (), n: int | None = None,
                           order: Sequence[int] | None = None, guard: int = ENUM_GUARD) -> np.ndarray:
    n = hmm.max_len if n is None else n
    prefix = list(prefix)
    if len(prefix) >= n:
        raise InputError("no next token at the horizon")
    return np.array([brute_joint(hmm, cnf, prefix + [v], n, order, guard)
                     for v in range(hmm.vocab_size)])


def brute_prefix_logprob(hmm: Hmm, prefix: Sequence[int], n: int | None = None,
                         guard: int = ENUM_GUARD) -> float:
    """Prefix probability by summing full sequences (no constraint)."""
    return brute_joint(hmm, Cnf([]), prefix, n, None, guard)


# -- metrics --------------------------------------------------------------


def _check_aligned(sequences, cnfs) -> None:
    if len(sequences) != len(cnfs):
        raise InputError(f"{len(sequences)} sequences but {len(cnfs)} constraints")
    if not sequences:
        raise InputError("no sequences to evaluate")


def coverage(sequences: Sequence[Sequence[int]], cnfs: Sequence[Cnf],
             eos_token: int | None = None) -> float:
    """Mean fraction of clauses satisfied per sequence."""
    _check_aligned(sequences, cnfs)
    total = 0.0
    for seq, cnf in zip(sequences, cnfs):
        if cnf.num_clauses == 0:
            total += 1.0
            continue
        pending = bin(remaining_mask(seq, cnf, eos_token)).count("1")
        total += (cnf.num_clauses - pending) / cnf.num_clauses
    return total / len(sequences)


def success_rate(sequences: Sequence[Sequence[int]], cnfs: Sequence[Cnf],
                 eos_token: int | None = None, orders: Sequence[Sequence[int] | None] | None = None) -> float:
    """Fraction of sequences satisfying their whole constraint."""
    _check_aligned(sequences, cnfs)
    hits = 0
    for i, (seq, cnf) in enumerate(zip(sequences, cnfs)):
        order = None if orders is None else orders[i]
        if order is None:
            hits += remaining_mask(seq, cnf, eos_token) == 0
        else:
            hits += ordered_progress(seq, cnf, list(order), eos_token) == len(order)
    return hits / len(sequences)


# -- reports --------------------------------------------------------------


@dataclass
class OracleReport:
    queries: list[dict] = field(default_factory=list)

    def add(self, label: str, exact: float, engine: float) -> None:
        if exact == engine:  # covers matching infinities
            err = 0.0
        else:
            err = abs(exact - engine)
        self.queries.append({"query": label, "exact": exact, "engine": engine, "abs_error": err})

    @property
    def max_error(self) -> float:
        return max((q["abs_error"] for q in self.queries), default=0.0)

    def to_dict(self) -> dict:
        def enc(x):
            return x if np.isfinite(x) else ("-inf" if x < 0 else "inf")
        return {
            "max_abs_error": enc(self.max_error),
            "queries": [{k: (enc(v) if isinstance(v, float) else v) for k, v in q.items()}
                        for q in self.queries],
        }


def oracle_check(cache, prefixes: Sequence[Sequence[int]], guard: int = ENUM_GUARD) -> OracleReport:
    """Compare the DP against enumeration for each prefix (joint and next-token joint)."""
    report = OracleReport()
    order = cache.masks.order
    for prefix in prefixes:
        prefix = list(prefix)
        state = cache.state_for(prefix)
        exact = brute_joint(cache.hmm, cache.cnf, prefix, cache.n, order, guard)
        report.add(f"joint {prefix}", exact, cache.joint(state))
        if len(prefix) < cache.n:
            exact_next = brute_next_token_joint(cache.hmm, cache.cnf, prefix, cache.n, order, guard)
            engine_next = cache.next_token_joint(state)
            for v in range(cache.hmm.vocab_size):
                report.add(f"next {prefix}+{v}", float(exact_next[v]), float(engine_next[v]))
    return report
