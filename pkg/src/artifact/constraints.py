"""CNF lexical constraints over token strings.

A constraint is a conjunction of clauses; a clause is a disjunction of
keystrings; a keystring is satisfied when it occurs contiguously in the
text (before the first EOS). Clause masks are integers whose bit ``i`` is
set while clause ``i`` is still unsatisfied.

Matching runs on an Aho-Corasick automaton over the keystrings. Each
automaton node is a keystring prefix, and the node reached after reading
some text is the longest suffix of that text which is still a keystring
prefix. Walking its failure chain enumerates every suffix that could
still grow into a keystring, which is exactly what the continuation set
needs.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CapacityError, ConstraintError, InputError

Keystring = tuple[int, ...]

DEFAULT_MAX_CLAUSES = 16
ROOT = 0


@dataclass(frozen=True)
class Overlap:
    kind: str  # "prefix-suffix", "self-overlap" or "containment"
    first: Keystring
    second: Keystring
    witness: Keystring

    def describe(self) -> str:
        if self.kind == "prefix-suffix":
            return (f"prefix {list(self.witness)} of {list(self.first)} is a suffix of "
                    f"{list(self.second)}")
        if self.kind == "self-overlap":
            return f"{list(self.first)} starts and ends with {list(self.witness)}"
        return f"{list(self.first)} occurs inside {list(self.second)}"


@dataclass
class OverlapReport:
    violations: list[Overlap] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


class Cnf:
    """A compiled constraint: clauses, keystring table, automaton, suffix table.

    Keystrings that appear in several clauses are stored once; completing
    such a keystring satisfies every clause containing it.
    """

    def __init__(self, clauses: Iterable[Iterable[Sequence[int]]],
                 max_clauses: int = DEFAULT_MAX_CLAUSES):
        normalized: list[tuple[Keystring, ...]] = []
        for i, clause in enumerate(clauses):
            seen: dict[Keystring, None] = {}
            for ks in clause:
                ks = tuple(int(t) for t in ks)
                if not ks:
                    raise InputError(f"clause {i} contains an empty keystring")
                if min(ks) < 0:
                    raise InputError(f"clause {i} contains a negative token id")
                seen[ks] = None
            if not seen:
                raise InputError(f"clause {i} is empty")
            normalized.append(tuple(seen))
        if len(normalized) > max_clauses:
            raise CapacityError(f"{len(normalized)} clauses exceed the cap of {max_clauses}")
        self.clauses = tuple(normalized)
        self.num_clauses = len(self.clauses)
        self.full_mask = (1 << self.num_clauses) - 1

        index: dict[Keystring, int] = {}
        bits: list[int] = []
        for ci, clause in enumerate(self.clauses):
            for ks in clause:
                if ks not in index:
                    index[ks] = len(index)
                    bits.append(0)
                bits[index[ks]] |= 1 << ci
        self.keystrings: tuple[Keystring, ...] = tuple(index)
        self.keystring_index = index
        self.clause_bits: tuple[int, ...] = tuple(bits)
        self.max_keystring_len = max((len(k) for k in self.keystrings), default=0)

        suffixes: dict[Keystring, int] = {}
        for ks in self.keystrings:
            for start in range(len(ks)):
                suffixes.setdefault(ks[start:], len(suffixes))
        self.suffixes: tuple[Keystring, ...] = tuple(suffixes)
        self.suffix_index = suffixes

        self._build_automaton()

    # -- automaton --------------------------------------------------------

    def _build_automaton(self) -> None:
        goto: list[dict[int, int]] = [{}]
        depth = [0]
        label: list[Keystring] = [()]
        ends: list[int] = [-1]
        for wi, ks in enumerate(self.keystrings):
            node = ROOT
            for tok in ks:
                nxt = goto[node].get(tok)
                if nxt is None:
                    nxt = len(goto)
                    goto[node][tok] = nxt
                    goto.append({})
                    depth.append(depth[node] + 1)
                    label.append(label[node] + (tok,))
                    ends.append(-1)
                node = nxt
            ends[node] = wi

        fail = [ROOT] * len(goto)
        order = []
        queue = deque(goto[ROOT].values())
        while queue:
            node = queue.popleft()
            order.append(node)
            for tok, child in goto[node].items():
                f = fail[node]
                while f != ROOT and tok not in goto[f]:
                    f = fail[f]
                target = goto[f].get(tok, ROOT)
                fail[child] = target if target != child else ROOT
                queue.append(child)

        # keystrings ending at each node, longest first
        outputs: list[tuple[int, ...]] = [()] * len(goto)
        for node in order:
            own = (ends[node],) if ends[node] >= 0 else ()
            outputs[node] = own + outputs[fail[node]]

        # keystrings reachable below each node (the node is a proper prefix of them)
        below: list[list[int]] = [[] for _ in goto]
        for wi, ks in enumerate(self.keystrings):
            node = ROOT
            for tok in ks[:-1]:
                node = goto[node][tok]
                below[node].append(wi)

        # the root stands for "no partial match", so it has no continuations;
        # the empty-text case is handled by the caller
        continuations: list[tuple[tuple[Keystring, int], ...]] = [()] * len(goto)
        for node in order:
            conts = []
            chain = node
            while chain != ROOT:
                for wi in below[chain]:
                    conts.append((self.keystrings[wi][depth[chain]:], wi))
                chain = fail[chain]
            continuations[node] = tuple(conts)

        self._goto = goto
        self._fail = fail
        self._step_cache: dict[tuple[int, int], int] = {}
        self.node_depth = tuple(depth)
        self.node_label = tuple(label)
        self.node_outputs = tuple(outputs)
        self.node_continuations = tuple(continuations)
        self.num_nodes = len(goto)

    def step(self, node: int, token: int) -> int:
        """Automaton transition: the node reached after reading ``token``."""
        key = (node, token)
        hit = self._step_cache.get(key)
        if hit is not None:
            return hit
        cur = node
        while cur != ROOT and token not in self._goto[cur]:
            cur = self._fail[cur]
        nxt = self._goto[cur].get(token, ROOT)
        self._step_cache[key] = nxt
        return nxt

    def run(self, tokens: Iterable[int], node: int = ROOT) -> int:
        for tok in tokens:
            node = self.step(node, int(tok))
        return node

    def occurrences(self, tokens: Sequence[int]) -> list[tuple[int, int]]:
        """``(end_position, keystring_index)`` for every occurrence, in text order."""
        out = []
        node = ROOT
        for pos, tok in enumerate(tokens):
            node = self.step(node, int(tok))
            for wi in reversed(self.node_outputs[node]):
                out.append((pos, wi))
        return out

    def first_tokens(self) -> tuple[int, ...]:
        """Tokens that start some keystring."""
        return tuple(sorted(self._goto[ROOT]))

    # -- misc -------------------------------------------------------------

    def check_vocab(self, vocab_size: int) -> None:
        for ks in self.keystrings:
            if max(ks) >= vocab_size:
                raise InputError(f"keystring {list(ks)} uses a token id >= vocabulary size {vocab_size}")

    def mask_clauses(self, mask: int) -> list[int]:
        return [i for i in range(self.num_clauses) if mask >> i & 1]

    def to_dict(self) -> dict:
        """Normalized form, for debugging dumps."""
        return {
            "clauses": [[list(ks) for ks in clause] for clause in self.clauses],
            "keystrings": [list(ks) for ks in self.keystrings],
            "clause_incidence": [self.mask_clauses(b) for b in self.clause_bits],
            "suffixes": [list(s) for s in self.suffixes],
        }

    def __repr__(self) -> str:
        body = " & ".join("(" + " | ".join(str(list(k)) for k in c) + ")" for c in self.clauses)
        return f"Cnf({body or 'true'})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Cnf) and self.clauses == other.clauses

    def __hash__(self) -> int:
        return hash(self.clauses)


# -- operations -----------------------------------------------------------


def validate_nonoverlap(cnf: Cnf, ordered: bool = False) -> OverlapReport:
    """Check the structural conditions under which the DP is exact.

    Three kinds of violation are reported:

    * prefix-suffix: a nonempty prefix of one keystring equals a suffix of
      a different keystring;
    * self-overlap: a keystring has a border of length >= 2 (a proper
      prefix that is also a suffix);
    * containment: a keystring of length >= 2 occurs inside a different
      keystring (with ``ordered``, any length).

    Together these make every continuation set prefix-free, which is what
    the inclusion-exclusion step of the recurrence relies on. Ordered
    matching also needs single-token containment ruled out, otherwise a
    keystring could count for a later clause while sitting inside the
    occurrence that satisfied an earlier one.
    """
    min_inner = 1 if ordered else 2
    report = OverlapReport()
    ks = cnf.keystrings
    depth = cnf.node_depth
    below_nodes: dict[int, list[int]] = {}
    for wi, w in enumerate(ks):
        node = ROOT
        for tok in w:
            node = cnf._goto[node][tok]
            below_nodes.setdefault(node, []).append(wi)

    for bi, b in enumerate(ks):
        # every suffix of b that is a keystring prefix lies on the fail chain
        node = cnf.run(b)
        while node != ROOT:
            d = depth[node]
            for ai in below_nodes.get(node, ()):
                if ai != bi:
                    report.violations.append(Overlap("prefix-suffix", ks[ai], b, b[-d:]))
                elif 2 <= d < len(b):
                    report.violations.append(Overlap("self-overlap", b, b, b[-d:]))
            node = cnf._fail[node]
        for end, ai in cnf.occurrences(b):
            if ai != bi and len(ks[ai]) >= min_inner and end < len(b) - 1 \
                    and end - len(ks[ai]) + 1 > 0:
                report.violations.append(Overlap("containment", ks[ai], b, ks[ai]))
    return report


def require_nonoverlap(cnf: Cnf, ordered: bool = False) -> None:
    report = validate_nonoverlap(cnf, ordered)
    if not report.ok:
        detail = "; ".join(v.describe() for v in report.violations[:5])
        raise ConstraintError(f"overlapping keystrings: {detail}")


def suffix_continuations(x: Sequence[int], cnf: Cnf) -> set[tuple[Keystring, Keystring]]:
    """All ``(s, w)`` such that a suffix of ``x`` followed by ``s`` spells keystring ``w``.

    For a nonempty ``x`` only nonempty suffixes count and ``s`` is nonempty;
    for an empty ``x`` every keystring is its own continuation.
    """
    if len(x) == 0:
        return {(ks, ks) for ks in cnf.keystrings}
    node = cnf.run(x)
    return {(s, cnf.keystrings[wi]) for s, wi in cnf.node_continuations[node]}


def reduce(cnf: Cnf, mask: int, completed: Sequence[int]) -> int:
    """Clear the bits of every clause that contains ``completed``."""
    wi = cnf.keystring_index.get(tuple(completed))
    if wi is None:
        raise InputError(f"{list(completed)} is not a keystring of {cnf!r}")
    return mask & ~cnf.clause_bits[wi]


def _text(sequence: Sequence[int], eos_token: int | None) -> list[int]:
    # the first EOS stays so that keystrings ending in EOS (trailing
    # separators) can match; nothing after it is text
    seq = [int(t) for t in sequence]
    if eos_token is not None and eos_token in seq:
        seq = seq[:seq.index(eos_token) + 1]
    return seq


def remaining_mask(sequence: Sequence[int], cnf: Cnf, eos_token: int | None = None) -> int:
    mask = cnf.full_mask
    for _, wi in cnf.occurrences(_text(sequence, eos_token)):
        mask &= ~cnf.clause_bits[wi]
    return mask


def satisfies(sequence: Sequence[int], cnf: Cnf, eos_token: int | None = None) -> bool:
    """True iff every clause has a keystring occurring in the text.

    The text ends at the first EOS (inclusive), so padding never matches.
    """
    return remaining_mask(sequence, cnf, eos_token) == 0


def ordered_progress(sequence: Sequence[int], cnf: Cnf, order: Sequence[int],
                     eos_token: int | None = None) -> int:
    """Number of leading clauses of ``order`` satisfied in order.

    Clause ``order[k + 1]`` must be completed (its keystring occurrence
    must end) strictly after the position where ``order[k]`` was completed.
    Greedy earliest completion is optimal for this.
    """
    done = 0
    last_end = -1
    for end, wi in cnf.occurrences(_text(sequence, eos_token)):
        if done == len(order):
            break
        if end > last_end and cnf.clause_bits[wi] >> order[done] & 1:
            done += 1
            last_end = end
    return done


def satisfies_ordered(sequence: Sequence[int], cnf: Cnf, order: Sequence[int] | None = None,
                      eos_token: int | None = None) -> bool:
    if order is None:
        order = range(cnf.num_clauses)
    order = list(order)
    return ordered_progress(sequence, cnf, order, eos_token) == len(order)


# -- files ----------------------------------------------------------------


def compile_constraint(doc: dict, max_clauses: int = DEFAULT_MAX_CLAUSES,
                       check: bool = True) -> Cnf:
    """Build a Cnf from the JSON document form.

    With ``separators`` present every keystring ``w`` is replaced by the
    set ``{w + [sep]}``, so a keyword only counts when a separator follows.
    """
    if not isinstance(doc, dict) or "clauses" not in doc:
        raise InputError("constraint document needs a 'clauses' field")
    clauses = doc["clauses"]
    seps = doc.get("separators") or []
    try:
        if seps:
            clauses = [[list(ks) + [int(s)] for ks in clause for s in seps] for clause in clauses]
        cnf = Cnf(clauses, max_clauses=max_clauses)
    except TypeError as exc:
        raise InputError(f"malformed clauses: {exc}") from None
    if check:
        require_nonoverlap(cnf)
    return cnf


def load_constraint(path, max_clauses: int = DEFAULT_MAX_CLAUSES) -> Cnf:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    try:
        return compile_constraint(doc, max_clauses=max_clauses)
    except InputError as exc:
        raise type(exc)(f"{path}: {exc}") from None
