"""Exact conditioning of an HMM on a CNF lexical constraint.

The cache holds, for every position ``l`` (1-based, up to ``n + 1``),
every clause mask ``psi``, every keystring suffix ``x`` (or the empty
string) and every hidden state ``z``::

    table[l, psi, x, z] = log Pr(X_{l:l+|x|-1} = x, psi satisfied within X_{l:n} | Z_l = z)

where "satisfied within X_{l:n}" counts only keystring occurrences lying
entirely inside positions ``l..n``. Entries are filled from ``l = n`` down
to ``l = 1``.

Placing a nonempty string ``x`` at ``l..r`` splits on what follows it.
Let ``S`` be the continuations of ``x`` (strings ``s`` such that a suffix
of ``x`` followed by ``s`` spells a keystring ``w_s``) and ``psi'`` the mask
after removing clauses already satisfied inside ``x``::

    Pr(x, psi | z_l) = sum_{z'} Pr(x, Z_{r+1} = z' | z_l) * (
        E[r+1, psi'](z')
        + sum_{s in S} table[r+1, psi' - w_s, s](z')
        - sum_{s in S} table[r+1, psi', s](z') )

The empty-string entry enumerates the token at ``l``. Tokens that start
no keystring all share one product::

    (sum_{neutral v} Pr(v | z_l)) * (sum_{z'} Pr(z' | z_l) E[l+1, psi](z'))

and each keystring-initial token goes through the rule above. The
continuation sets are prefix-free under the overlap checks in
:mod:`artifact.constraints`, which is what makes the subtraction exact.

Generation queries reuse the same rule with ``x`` set to the whole
prefix, so the prefix only enters through its forward vector, its
residual mask and its automaton node.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constraints import ROOT, Cnf, require_nonoverlap
from .errors import ArtifactError, HorizonError, InputError, LengthError
from .hmm import Hmm
from .logspace import log_vecmat, logsumexp, safe_log

ROUNDOFF = 1e-12
EMPTY = 0  # suffix slot of the empty string; keystring suffix i lives at i + 1


class MaskSpace:
    """The clause masks a cache is indexed by, and how completions move between them.

    Unordered constraints use all ``2^m`` subsets (index == bitmask).
    Ordered constraints only ever have a suffix of the clause order pending,
    so there are ``m + 1`` masks and completing a keystring only counts
    when it belongs to the next pending clause.
    """

    def __init__(self, cnf: Cnf, order: Sequence[int] | None = None):
        m = cnf.num_clauses
        nk = len(cnf.keystrings)
        self.ordered = order is not None
        if order is None:
            self.masks = list(range(1 << m))
            self.reduce_table = np.empty((len(self.masks), nk), dtype=np.int64)
            for w, bits in enumerate(cnf.clause_bits):
                self.reduce_table[:, w] = np.arange(len(self.masks)) & ~bits
            self.order = None
        else:
            order = [int(c) for c in order]
            if sorted(order) != list(range(m)):
                raise InputError(f"order {order} is not a permutation of the {m} clauses")
            self.order = tuple(order)
            self.masks = [sum(1 << c for c in order[k:]) for k in range(m + 1)]
            self.reduce_table = np.empty((m + 1, nk), dtype=np.int64)
            for k in range(m + 1):
                for w, bits in enumerate(cnf.clause_bits):
                    advance = k < m and bits >> order[k] & 1
                    self.reduce_table[k, w] = k + 1 if advance else k
        self.index = {mask: i for i, mask in enumerate(self.masks)}
        self.full = self.index[cnf.full_mask]
        self.empty = self.index[0]

    def __len__(self) -> int:
        return len(self.masks)

    def fold(self, mask_idx: int, keystrings: Sequence[int]) -> int:
        for w in keystrings:
            mask_idx = int(self.reduce_table[mask_idx, w])
        return mask_idx


@dataclass(frozen=True)
class GenerationState:
    """A generated prefix as the DP sees it.

    ``forward`` is ``log Pr(x_{1:t}, z_t)`` (``None`` for the empty prefix),
    ``mask`` an index into the cache's mask space (clauses still pending)
    and ``node`` the automaton node (the live partial keystring match).
    """

    prefix: tuple[int, ...]
    forward: np.ndarray | None
    mask: int
    node: int

    @property
    def length(self) -> int:
        return len(self.prefix)


class _Placed:
    """Strings whose placement probabilities are computed at every position."""

    def __init__(self, hmm: Hmm, cnf: Cnf, masks: MaskSpace):
        strings = list(cnf.suffixes)
        self.num_suffixes = len(strings)
        index = dict(cnf.suffix_index)
        probe_tokens = cnf.first_tokens()
        for v in probe_tokens:
            if (v,) not in index:
                index[(v,)] = len(strings)
                strings.append((v,))
        self.strings = strings
        self.probe_rows = np.array([index[(v,)] for v in probe_tokens], dtype=np.int64)
        self.lengths = np.array([len(s) for s in strings], dtype=np.int64)

        h = hmm.num_states
        self.mats = np.empty((len(strings), h, h))
        for p, s in enumerate(strings):
            mat = np.eye(h)
            for tok in s:
                mat = (mat * hmm.emission[:, tok][None, :]) @ hmm.transition
            self.mats[p] = mat

        # residual mask after the occurrences inside each string, per input mask
        self.inner = np.empty((len(strings), len(masks)), dtype=np.int64)
        for p, s in enumerate(strings):
            occ = [w for _, w in cnf.occurrences(s)]
            for k in range(len(masks)):
                self.inner[p, k] = masks.fold(k, occ)

        rows, sufs, kws = [], [], []
        for p, s in enumerate(strings):
            for cont, w in cnf.node_continuations[cnf.run(s)]:
                rows.append(p)
                sufs.append(cnf.suffix_index[cont] + 1)
                kws.append(w)
        self.cont_rows = np.array(rows, dtype=np.int64)
        self.cont_slots = np.array(sufs, dtype=np.int64)
        self.cont_keys = np.array(kws, dtype=np.int64)


def _combine(base: np.ndarray, plus: np.ndarray, minus: np.ndarray,
             rows: np.ndarray, nrows: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear-space ``base + sum(plus) - sum(minus)`` per row, with a per-row shift.

    ``base`` is ``(nrows, h)`` in log space; ``plus``/``minus`` are ``(k, h)``
    log-space terms added into ``rows``. Returns the shifted linear values
    (round-off negatives clamped to 0) and the shift per row.
    """
    shift = base.max(axis=1)
    if rows.size:
        np.maximum.at(shift, rows, np.maximum(plus.max(axis=1), minus.max(axis=1)))
    shift = np.where(np.isfinite(shift), shift, 0.0)
    lin = np.exp(base - shift[:, None])
    if rows.size:
        np.add.at(lin, rows, np.exp(plus - shift[rows, None]) - np.exp(minus - shift[rows, None]))
        low = lin.min()
        if low < -ROUNDOFF:
            raise ArtifactError(f"internal error: negative probability {low:.3g} in the recurrence")
        np.maximum(lin, 0.0, out=lin)
    return lin, shift


class DpCache:
    """Precomputed constraint probabilities for one (model, constraint) pair.

    ``table`` has shape ``(n + 2, masks, suffixes + 1, h)``; position index
    ``l`` is used directly (row 0 is unused). ``bucket[l, psi]`` holds
    ``log sum_{z'} Pr(z' | z) Pr(psi_{l+1:n} | z')`` and ``neutral_mass`` the
    per-state emission mass of tokens that start no keystring.
    """

    def __init__(self, hmm: Hmm, cnf: Cnf, n: int | None = None, order: Sequence[int] | None = None):
        if n is None:
            n = hmm.max_len
        if not 1 <= n <= hmm.max_len:
            raise LengthError(f"horizon {n} outside [1, {hmm.max_len}]")
        cnf.check_vocab(hmm.vocab_size)
        for ks in cnf.keystrings:
            if hmm.eos_token in ks[:-1]:
                raise InputError(f"keystring {list(ks)} has EOS before its last token")
        require_nonoverlap(cnf, ordered=order is not None)
        self.hmm = hmm
        self.cnf = cnf
        self.n = n
        self.masks = MaskSpace(cnf, order)
        self.placed = _Placed(hmm, cnf, self.masks)
        neutral = np.ones(hmm.vocab_size, dtype=bool)
        neutral[list(cnf.first_tokens())] = False
        self.neutral_tokens = neutral
        self.neutral_mass = hmm.emission[:, neutral].sum(axis=1)
        self._fill()

    @property
    def ordered(self) -> bool:
        return self.masks.ordered

    @property
    def num_masks(self) -> int:
        return len(self.masks)

    def _fill(self) -> None:
        hmm, n, pl = self.hmm, self.n, self.placed
        h = hmm.num_states
        nm = len(self.masks)
        ns = pl.num_suffixes
        table = np.full((n + 2, nm, ns + 1, h), -np.inf)
        bucket = np.full((n + 1, nm, h), -np.inf)
        table[n + 1, self.masks.empty, EMPTY, :] = 0.0
        log_neutral = safe_log(self.neutral_mass)
        trans_t = hmm.transition.T
        reduce_table = self.masks.reduce_table
        nplaced = len(pl.strings)
        probe = pl.probe_rows

        for l in range(n, 0, -1):
            ends = l + pl.lengths
            fits = ends <= n + 1
            ends = np.minimum(ends, n + 1)
            cont_ok = fits[pl.cont_rows]
            cont_ends = ends[pl.cont_rows]
            for k in range(nm):
                inner = pl.inner[:, k]
                base = table[ends, inner, EMPTY]
                c_in = inner[pl.cont_rows]
                c_out = reduce_table[c_in, pl.cont_keys]
                live = cont_ok & (c_out != c_in)
                rows = pl.cont_rows[live]
                plus = table[cont_ends[live], c_out[live], pl.cont_slots[live]]
                minus = table[cont_ends[live], c_in[live], pl.cont_slots[live]]
                lin, shift = _combine(base, plus, minus, rows, nplaced)
                vals = safe_log(np.einsum("pij,pj->pi", pl.mats, lin)) + shift[:, None]
                vals[~fits] = -np.inf
                table[l, k, 1:] = vals[:ns]

                bucket[l, k] = log_vecmat(table[l + 1, k, EMPTY], trans_t)
                terms = [log_neutral + bucket[l, k]]
                if probe.size:
                    terms.append(vals[probe])
                table[l, k, EMPTY] = logsumexp(np.vstack(terms), axis=0)
        self.table = table
        self.bucket = bucket
        table.setflags(write=False)
        bucket.setflags(write=False)

    # -- lookups ----------------------------------------------------------

    def entry(self, l: int, suffix: Sequence[int] | None, mask: int, z: int | None = None):
        """Table entry by position, suffix (``None``/empty for the empty string), bitmask."""
        slot = EMPTY if not suffix else self.cnf.suffix_index[tuple(suffix)] + 1
        row = self.table[l, self.masks.index[mask], slot]
        return row if z is None else float(row[z])

    def _bracket(self, level: int, mask_idx: int, node: int) -> np.ndarray:
        """Log of the Case-1 bracket at ``level`` for a prefix ending in ``node``."""
        base = self.table[level, mask_idx, EMPTY][None, :]
        plus, minus = [], []
        for cont, w in self.cnf.node_continuations[node]:
            out = int(self.masks.reduce_table[mask_idx, w])
            if out == mask_idx or level + len(cont) > self.n + 1:
                continue
            slot = self.cnf.suffix_index[cont] + 1
            plus.append(self.table[level, out, slot])
            minus.append(self.table[level, mask_idx, slot])
        if not plus:
            return base[0]
        rows = np.zeros(len(plus), dtype=np.int64)
        lin, shift = _combine(base, np.array(plus), np.array(minus), rows, 1)
        return safe_log(lin[0]) + shift[0]

    # -- generation-time queries ------------------------------------------

    def initial_state(self) -> GenerationState:
        return GenerationState((), None, self.masks.full, ROOT)

    def advance(self, state: GenerationState, token: int) -> GenerationState:
        if state.length >= self.n:
            raise HorizonError(f"prefix already has the full length {self.n}")
        token = int(token)
        if not 0 <= token < self.hmm.vocab_size:
            raise InputError(f"token id {token} out of range")
        node = self.cnf.step(state.node, token)
        mask = self.masks.fold(state.mask, reversed(self.cnf.node_outputs[node]))
        forward = self.hmm.step_forward(state.forward, token)
        return GenerationState(state.prefix + (token,), forward, mask, node)

    def state_for(self, prefix: Sequence[int]) -> GenerationState:
        state = self.initial_state()
        for tok in prefix:
            state = self.advance(state, tok)
        return state

    def _prior(self, state: GenerationState) -> np.ndarray:
        """``log Pr(x_{1:t}, Z_{t+1})``."""
        if state.forward is None:
            return self.hmm.log_initial
        return log_vecmat(state.forward, self.hmm.transition)

    def joint(self, state: GenerationState) -> float:
        """``log Pr(x_{1:t}, constraint satisfied within X_{1:n})``."""
        t = state.length
        if t == 0:
            return float(logsumexp(self.hmm.log_initial + self.table[1, state.mask, EMPTY]))
        if t == self.n:
            # no position t + 1: the prefix alone decides
            done = state.mask == self.masks.empty
            return float(logsumexp(state.forward)) if done else -np.inf
        return float(logsumexp(self._prior(state) + self._bracket(t + 1, state.mask, state.node)))

    def next_token_joint(self, state: GenerationState) -> np.ndarray:
        """``log Pr(x_{1:t}, X_{t+1} = v, constraint)`` for every token ``v``."""
        t = state.length
        if t >= self.n:
            raise HorizonError(f"no next token after position {self.n}")
        hmm, cnf = self.hmm, self.cnf
        prior = self._prior(state)
        level = t + 2

        # tokens that move the automaton off the root are handled one group
        # per (node, mask); everything else shares the neutral bucket
        movers: dict[tuple[int, int], list[int]] = {}
        chain = state.node
        candidates = set(cnf._goto[ROOT])
        while chain != ROOT:
            candidates.update(cnf._goto[chain])
            chain = cnf._fail[chain]
        for v in candidates:
            node = cnf.step(state.node, v)
            mask = self.masks.fold(state.mask, reversed(cnf.node_outputs[node]))
            movers.setdefault((node, mask), []).append(v)

        out = np.full(hmm.vocab_size, -np.inf)
        neutral = np.ones(hmm.vocab_size, dtype=bool)
        neutral[list(candidates)] = False
        if neutral.any():
            # the (ROOT, mask) bracket pushed through one transition is the bucket
            y = self.bucket[t + 1, state.mask]
            out[neutral] = log_vecmat(prior + y, hmm.emission[:, neutral])
        for (node, mask), toks in movers.items():
            y = log_vecmat(self._bracket(level, mask, node), hmm.transition.T)
            out[toks] = log_vecmat(prior + y, hmm.emission[:, toks])
        return out

    def conditional_next(self, state: GenerationState) -> np.ndarray:
        """``log Pr(X_{t+1} = v | x_{1:t}, constraint)``."""
        joint = self.joint(state)
        if joint == -np.inf:
            return np.full(self.hmm.vocab_size, -np.inf)
        return self.next_token_joint(state) - joint

    def pending_clauses(self, state: GenerationState) -> list[int]:
        return self.cnf.mask_clauses(self.masks.masks[state.mask])

    # -- debugging --------------------------------------------------------

    def dump_csv(self, path) -> None:
        labels = [()] + list(self.cnf.suffixes)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["l", "suffix", "mask", "z", "logprob"])
            for l in range(1, self.n + 2):
                for k, mask in enumerate(self.masks.masks):
                    for slot, label in enumerate(labels):
                        for z, val in enumerate(self.table[l, k, slot]):
                            writer.writerow([l, " ".join(map(str, label)), mask, z, repr(float(val))])


def precompute(hmm: Hmm, cnf: Cnf, n: int | None = None) -> DpCache:
    return DpCache(hmm, cnf, n=n)


def precompute_ordered(hmm: Hmm, cnf: Cnf, order: Sequence[int] | None = None,
                       n: int | None = None) -> DpCache:
    if order is None:
        order = range(cnf.num_clauses)
    return DpCache(hmm, cnf, n=n, order=list(order))


def joint_with_constraint(cache: DpCache, state: GenerationState | Sequence[int]) -> float:
    if not isinstance(state, GenerationState):
        state = cache.state_for(state)
    return cache.joint(state)


def next_token_joint(cache: DpCache, state: GenerationState | Sequence[int]) -> np.ndarray:
    if not isinstance(state, GenerationState):
        state = cache.state_for(state)
    return cache.next_token_joint(state)
