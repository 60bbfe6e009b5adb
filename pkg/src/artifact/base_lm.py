"""Base language models: the next-token distribution that guidance is fused with.

Three providers share one interface: a smoothed fixed-order n-gram model,
an adapter that exposes an HMM as a language model, and a bridge to an
external process speaking a line protocol over stdin/stdout::

    SCORE <ids...>         ->  V natural-log probabilities
    SAMPLE <seed> <maxlen> ->  token ids
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import sys
from abc import ABC, abstractmethod
from collections import defaultdict
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .errors import BridgeError, InputError, LengthError, SourceError
from .hmm import Hmm
from .logspace import logsumexp

log = logging.getLogger(__name__)

NORM_TOL = 1e-6
RENORM_LIMIT = 1e-3
_BOS = -1


def _draw(rng: np.random.Generator, logprobs: np.ndarray) -> int:
    """Inverse-CDF draw that never returns a zero-probability token."""
    p = np.exp(logprobs - logsumexp(logprobs))
    cdf = np.cumsum(p)
    cdf[int(np.flatnonzero(p > 0)[-1]):] = np.inf
    return int(np.searchsorted(cdf, rng.random(), side="right"))


class BaseLm(ABC):
    """Autoregressive next-token log-probabilities over ``vocab_size`` tokens."""

    vocab_size: int
    eos_token: int | None = None

    @abstractmethod
    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        """``log Pr(x_{t+1} = v | x_{1:t})`` for all ``v``."""

    def sample(self, seed, max_len: int) -> list[int]:
        """Ancestral sample of at most ``max_len`` tokens, stopping after EOS."""
        rng = np.random.default_rng(seed)
        out: list[int] = []
        while len(out) < max_len:
            tok = _draw(rng, self.next_logprobs(out))
            out.append(tok)
            if tok == self.eos_token:
                break
        return out

    def sample_many(self, count: int, seed, max_len: int) -> list[list[int]]:
        seeds = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
        return [self.sample(s, max_len) for s in seeds.spawn(count)]

    def sequence_logprob(self, tokens: Sequence[int]) -> float:
        """Chain-rule log-probability of ``tokens``."""
        total = 0.0
        for t, tok in enumerate(tokens):
            total += float(self.next_logprobs(tokens[:t])[tok])
        return total

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- n-gram ---------------------------------------------------------------


class NgramLm(BaseLm):
    """Fixed-order n-gram model with additive smoothing and no backoff.

    Contexts shorter than ``order - 1`` are left-padded with a start marker.
    After EOS the model emits EOS with probability one.
    """

    def __init__(self, order: int, vocab_size: int, delta: float,
                 counts: dict[tuple[int, ...], np.ndarray], eos_token: int | None = None):
        if order < 1:
            raise InputError("n-gram order must be at least 1")
        if delta <= 0:
            raise InputError("smoothing delta must be positive")
        self.order = order
        self.vocab_size = vocab_size
        self.delta = float(delta)
        self.counts = counts
        self.eos_token = eos_token
        self._eos_row = None
        if eos_token is not None:
            self._eos_row = np.full(vocab_size, -np.inf)
            self._eos_row[eos_token] = 0.0
        self._uniform = np.full(vocab_size, -np.log(vocab_size))

    def context(self, prefix: Sequence[int]) -> tuple[int, ...]:
        k = self.order - 1
        if k == 0:
            return ()
        padded = [_BOS] * k + [int(t) for t in prefix]
        return tuple(padded[-k:])

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        if self.eos_token is not None and self.eos_token in prefix:
            return self._eos_row.copy()
        row = self.counts.get(self.context(prefix))
        if row is None:
            return self._uniform.copy()
        smoothed = row + self.delta
        return np.log(smoothed / smoothed.sum())

    def to_dict(self) -> dict:
        return {
            "kind": "ngram",
            "order": self.order,
            "V": self.vocab_size,
            "delta": self.delta,
            "eos": self.eos_token,
            "counts": [[list(ctx), row.tolist()] for ctx, row in sorted(self.counts.items())],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> NgramLm:
        try:
            counts = {tuple(ctx): np.asarray(row, dtype=np.float64) for ctx, row in doc["counts"]}
            return cls(int(doc["order"]), int(doc["V"]), float(doc["delta"]), counts, doc.get("eos"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed n-gram model: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> NgramLm:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None


def ngram_fit(corpus, order: int, delta: float, vocab_size: int,
              eos_token: int | None = None) -> NgramLm:
    """Count k-grams over each sequence's text (through its first EOS)."""
    seqs = getattr(corpus, "sequences", corpus)
    if len(seqs) == 0:
        raise InputError("cannot fit an n-gram model on an empty corpus")
    if eos_token is None:
        eos_token = getattr(corpus, "eos_token", None)
    table: dict[tuple[int, ...], np.ndarray] = defaultdict(lambda: np.zeros(vocab_size))
    k = order - 1
    for seq in seqs:
        toks = [int(t) for t in seq]
        if eos_token is not None and eos_token in toks:
            toks = toks[:toks.index(eos_token) + 1]
        padded = [_BOS] * k + toks
        for i, tok in enumerate(toks):
            if not 0 <= tok < vocab_size:
                raise InputError(f"token id {tok} outside [0, {vocab_size})")
            table[tuple(padded[i:i + k])][tok] += 1
    return NgramLm(order, vocab_size, delta, dict(table), eos_token)


# -- HMM adapter ----------------------------------------------------------


class HmmLm(BaseLm):
    """Exact next-token law of an HMM, ``Pr(x_{1:t+1}) / Pr(x_{1:t})``."""

    _CACHE_LIMIT = 4096

    def __init__(self, hmm: Hmm):
        self.hmm = hmm
        self.vocab_size = hmm.vocab_size
        self.eos_token = hmm.eos_token
        self._forward: dict[tuple[int, ...], np.ndarray] = {}

    def _forward_of(self, prefix: tuple[int, ...]) -> np.ndarray:
        hit = self._forward.get(prefix)
        if hit is not None:
            return hit
        parent = self._forward_of(prefix[:-1]) if len(prefix) > 1 else None
        tok = prefix[-1]
        if not 0 <= tok < self.vocab_size:
            raise InputError(f"token id {tok} out of range")
        fwd = self.hmm.step_forward(parent, tok)
        if len(self._forward) >= self._CACHE_LIMIT:
            self._forward.clear()
        self._forward[prefix] = fwd
        return fwd

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        prefix = tuple(int(t) for t in prefix)
        if len(prefix) >= self.hmm.max_len:
            raise LengthError(f"no next token after position {self.hmm.max_len}")
        fwd = self._forward_of(prefix) if prefix else None
        joint = self.hmm.next_token_logprobs(fwd)
        total = logsumexp(joint)
        if not np.isfinite(total):
            raise InputError(f"prefix {list(prefix)} has probability zero under the model")
        return joint - total

    def sample(self, seed, max_len: int) -> list[int]:
        seq = self.hmm.sample_sequence(seed)[:max_len]
        if self.eos_token in seq:
            seq = seq[:seq.index(self.eos_token) + 1]
        return seq

    def sample_many(self, count: int, seed, max_len: int) -> list[list[int]]:
        rows = self.hmm.sample_sequences(count, seed)[:, :max_len].tolist()
        out = []
        for seq in rows:
            if self.eos_token in seq:
                seq = seq[:seq.index(self.eos_token) + 1]
            out.append(seq)
        return out


def hmm_as_lm(hmm: Hmm) -> HmmLm:
    return HmmLm(hmm)


# -- external process -----------------------------------------------------


class ExternalLm(BaseLm):
    """Language model served by a child process over the line protocol.

    One request is in flight at a time. Score vectors whose mass is off by
    more than ``NORM_TOL`` but at most ``RENORM_LIMIT`` are renormalized with
    a warning; anything further off is a protocol error.
    """

    def __init__(self, command: str | Sequence[str], vocab_size: int | None = None,
                 eos_token: int | None = None):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise InputError("empty command for external language model")
        self.argv = argv
        try:
            self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          text=True, encoding="utf-8", bufsize=1)
        except OSError as exc:
            raise SourceError(f"cannot start {argv[0]}: {exc}") from None
        self.eos_token = eos_token
        self.vocab_size = vocab_size if vocab_size is not None else len(self._score(()))
        if eos_token is None:
            self.eos_token = self.vocab_size - 1

    def _request(self, line: str) -> str:
        proc = self._proc
        if proc.poll() is not None:
            raise SourceError(f"language model process exited with code {proc.returncode}")
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
            reply = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise SourceError(f"language model process failed: {exc}") from None
        if not reply:
            code = proc.wait(timeout=5)
            raise SourceError(f"language model process exited with code {code}")
        return reply.rstrip("\n")

    def _score(self, prefix: Sequence[int]) -> np.ndarray:
        reply = self._request("SCORE " + " ".join(str(int(t)) for t in prefix))
        try:
            vec = np.array([float(x) for x in reply.split()], dtype=np.float64)
        except ValueError:
            raise BridgeError(f"non-numeric score line: {reply!r}") from None
        if vec.size == 0 or np.any(np.isnan(vec)) or np.any(vec == np.inf):
            raise BridgeError(f"invalid score line: {reply!r}")
        return vec

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        vec = self._score(prefix)
        if vec.size != self.vocab_size:
            raise BridgeError(f"expected {self.vocab_size} scores, got {vec.size}: {_head(vec)}")
        total = logsumexp(vec)
        drift = abs(np.expm1(total)) if np.isfinite(total) else np.inf
        if drift > RENORM_LIMIT:
            raise BridgeError(f"score vector mass {np.exp(total):.6g} is not a distribution")
        if drift > NORM_TOL:
            log.warning("renormalizing score vector with mass %.9g", np.exp(total))
            vec = vec - total
        return vec

    def sample(self, seed, max_len: int) -> list[int]:
        if not isinstance(seed, (int, np.integer)):
            seed = int(np.random.default_rng(seed).integers(2**63))
        reply = self._request(f"SAMPLE {int(seed)} {int(max_len)}")
        try:
            toks = [int(x) for x in reply.split()]
        except ValueError:
            raise BridgeError(f"non-integer sample line: {reply!r}") from None
        if len(toks) > max_len or any(not 0 <= t < self.vocab_size for t in toks):
            raise BridgeError(f"invalid sample line: {reply!r}")
        return toks

    def close(self) -> None:
        proc = getattr(self, "_proc", None)
        if proc is None or proc.poll() is not None:
            return
        try:
            proc.stdin.close()
            proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()

    def __del__(self):
        self.close()


def _head(vec: np.ndarray) -> str:
    return " ".join(f"{x:.4g}" for x in vec[:8]) + (" ..." if vec.size > 8 else "")


def external_lm(command: str | Sequence[str], vocab_size: int | None = None,
                eos_token: int | None = None) -> ExternalLm:
    return ExternalLm(command, vocab_size, eos_token)


def serve(lm: BaseLm, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> None:
    """Answer protocol requests for ``lm`` until end of input."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        parts = line.split()
        try:
            if parts and parts[0] == "SCORE":
                vec = lm.next_logprobs([int(t) for t in parts[1:]])
                reply = " ".join(repr(float(x)) for x in vec)
            elif len(parts) == 3 and parts[0] == "SAMPLE":
                reply = " ".join(map(str, lm.sample(int(parts[1]), int(parts[2]))))
            else:
                reply = f"ERROR unknown request {line.strip()!r}"
        except (ValueError, InputError) as exc:
            reply = f"ERROR {exc}"
        stdout.write(reply + "\n")
        stdout.flush()


# -- loading --------------------------------------------------------------


def load_lm(source: str, default_hmm: Hmm | None = None) -> BaseLm:
    """Build a language model from ``kind:argument``.

    ``hmm:PATH`` loads an HMM, ``ngram:PATH`` an n-gram JSON file, and
    ``cmd:COMMAND`` starts an external process. Plain ``hmm`` reuses
    ``default_hmm``.
    """
    kind, _, arg = source.partition(":")
    if kind == "hmm":
        if arg:
            return HmmLm(Hmm.load(arg))
        if default_hmm is None:
            raise InputError("'hmm' language model needs a model")
        return HmmLm(default_hmm)
    if kind == "ngram" and arg:
        return NgramLm.load(arg)
    if kind == "cmd" and arg:
        return ExternalLm(arg)
    raise InputError(f"unrecognized language model source {source!r}")


def lm_files(source: str) -> list[str]:
    """Paths a language-model source reads, for digests."""
    kind, _, arg = source.partition(":")
    return [arg] if kind in ("hmm", "ngram") and arg else []

