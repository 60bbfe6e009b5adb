"""Baum-Welch training and distillation from a teacher model."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ArtifactError, InputError, LengthError, SourceError
from .hmm import Hmm
from .logspace import logsumexp, safe_log


@dataclass
class Corpus:
    """Token sequences padded with EOS to a common length ``n``."""

    sequences: np.ndarray
    eos_token: int

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        if seqs.ndim != 2:
            raise InputError("corpus must be a 2-d array of token ids")
        if seqs.size and seqs.min() < 0:
            raise InputError("negative token id in corpus")
        is_eos = seqs == self.eos_token
        # once EOS appears every later token must be EOS
        seen = np.logical_or.accumulate(is_eos, axis=1)
        bad = np.flatnonzero((seen & ~is_eos).any(axis=1))
        if bad.size:
            raise InputError(f"sequence {int(bad[0])} has a non-EOS token after EOS")
        self.sequences = seqs

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def max_len(self) -> int:
        return self.sequences.shape[1]

    @classmethod
    def from_sequences(cls, sequences: Sequence[Sequence[int]], n: int, eos_token: int) -> Corpus:
        out = np.full((len(sequences), n), eos_token, dtype=np.int64)
        for i, seq in enumerate(sequences):
            if len(seq) > n:
                raise LengthError(f"sequence {i} has length {len(seq)} > {n}")
            out[i, :len(seq)] = seq
        return cls(out, eos_token)

    @classmethod
    def load(cls, path, n: int, eos_token: int, vocab_size: int | None = None) -> Corpus:
        """One sequence per line, whitespace-separated ids; blank lines are skipped."""
        path = Path(path)
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    toks = [int(t) for t in line.split()]
                except ValueError:
                    raise InputError(f"{path}:{lineno}: non-integer token") from None
                if len(toks) > n:
                    raise LengthError(f"{path}:{lineno}: {len(toks)} tokens > max length {n}")
                if vocab_size is not None and any(not 0 <= t < vocab_size for t in toks):
                    raise InputError(f"{path}:{lineno}: token id outside [0, {vocab_size})")
                rows.append(toks)
        try:
            return cls.from_sequences(rows, n, eos_token)
        except InputError as exc:
            raise type(exc)(f"{path}: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.sequences:
                fh.write(" ".join(map(str, row.tolist())) + "\n")


@dataclass
class TrainConfig:
    epochs: int = 10
    resample_per_epoch: int | None = None
    smoothing: float = 1e-4
    seed: int = 0
    heldout: int = 1000
    samples: int = 1000  # corpus size when it is sampled only once

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be positive")
        if self.smoothing < 0:
            raise InputError("smoothing must be nonnegative")
        if self.resample_per_epoch is not None and self.resample_per_epoch < 1:
            raise InputError("resample_per_epoch must be positive")


@dataclass
class _Counts:
    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    loglik: np.ndarray

    def __add__(self, other: _Counts) -> _Counts:
        return _Counts(self.initial + other.initial, self.transition + other.transition,
                       self.emission + other.emission, np.concatenate([self.loglik, other.loglik]))


def forward_backward(hmm: Hmm, seqs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log forward and backward arrays, each ``(B, n, h)``, and per-sequence log-likelihoods."""
    B, n = seqs.shape
    h = hmm.num_states
    log_emit = hmm.log_emission[:, seqs].transpose(1, 2, 0)  # (B, n, h)
    T = hmm.transition
    alpha = np.empty((B, n, h))
    beta = np.empty((B, n, h))
    alpha[:, 0] = hmm.log_initial + log_emit[:, 0]
    for t in range(1, n):
        prev = alpha[:, t - 1]
        m = _rowmax(prev)
        alpha[:, t] = safe_log(np.exp(prev - m) @ T) + m + log_emit[:, t]
    beta[:, n - 1] = 0.0
    for t in range(n - 2, -1, -1):
        nxt = beta[:, t + 1] + log_emit[:, t + 1]
        m = _rowmax(nxt)
        beta[:, t] = safe_log(np.exp(nxt - m) @ T.T) + m
    loglik = logsumexp(alpha[:, -1], axis=1)
    return alpha, beta, loglik


def _rowmax(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=-1, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def expected_counts(hmm: Hmm, seqs: np.ndarray) -> _Counts:
    """Posterior expected initial, transition and emission counts summed over ``seqs``."""
    h, V = hmm.num_states, hmm.vocab_size
    seqs = np.asarray(seqs, dtype=np.int64)
    B, n = seqs.shape
    alpha, beta, loglik = forward_backward(hmm, seqs)
    if not np.all(np.isfinite(loglik)):
        bad = int(np.flatnonzero(~np.isfinite(loglik))[0])
        raise InputError(f"sequence {bad} has probability zero under the model")
    gamma = np.exp(alpha + beta - loglik[:, None, None])  # (B, n, h)

    trans = np.zeros((h, h))
    log_emit = hmm.log_emission[:, seqs].transpose(1, 2, 0)
    for t in range(n - 1):
        a = alpha[:, t]
        b = beta[:, t + 1] + log_emit[:, t + 1]
        ma, mb = _rowmax(a), _rowmax(b)
        scale = np.exp(ma + mb - loglik[:, None])
        trans += (np.exp(a - ma) * scale).T @ np.exp(b - mb)
    trans *= hmm.transition

    emit = np.empty((h, V))
    flat = seqs.reshape(-1)
    g = gamma.reshape(-1, h)
    for z in range(h):
        emit[z] = np.bincount(flat, weights=g[:, z], minlength=V)
    return _Counts(gamma[:, 0].sum(axis=0), trans, emit, loglik)


def _normalize_rows(counts: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = counts / totals
    # rows that never received mass keep their previous parameters
    return np.where(totals > 0, out, fallback)


def _chunks(n_items: int, parts: int) -> list[slice]:
    parts = max(1, min(parts, n_items))
    bounds = np.linspace(0, n_items, parts + 1).astype(int)
    return [slice(bounds[i], bounds[i + 1]) for i in range(parts)]


def em_step(hmm: Hmm, corpus: Corpus | np.ndarray, smoothing: float = 1e-4,
            threads: int = 1) -> tuple[Hmm, float]:
    """One EM update. Returns the new model and the mean log-likelihood *before* the update.

    Structural zeros are kept: absorbing states stay pinned to EOS and to
    the absorbing set, and no other state gains EOS mass from smoothing.
    """
    seqs = corpus.sequences if isinstance(corpus, Corpus) else np.asarray(corpus, dtype=np.int64)
    if seqs.ndim != 2 or seqs.shape[0] == 0:
        raise InputError("em_step needs a nonempty corpus")
    if seqs.shape[1] != hmm.max_len:
        raise LengthError(f"corpus length {seqs.shape[1]} != model max_len {hmm.max_len}")
    if seqs.min() < 0 or seqs.max() >= hmm.vocab_size:
        raise InputError(f"corpus token id outside [0, {hmm.vocab_size})")
    if smoothing < 0:
        raise InputError("smoothing must be nonnegative")

    if threads > 1:
        parts = _chunks(seqs.shape[0], threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: expected_counts(hmm, seqs[s]), parts))
        counts = results[0]
        for r in results[1:]:
            counts = counts + r
    else:
        counts = expected_counts(hmm, seqs)

    h, V, eos = hmm.num_states, hmm.vocab_size, hmm.eos_token
    absorbing = np.zeros(h, dtype=bool)
    absorbing[hmm.absorbing_states] = True

    init = counts.initial + smoothing
    trans = counts.transition + smoothing
    emit = counts.emission + smoothing
    emit[~absorbing, eos] = 0.0
    emit[absorbing] = 0.0
    emit[absorbing, eos] = 1.0
    trans[np.ix_(absorbing, ~absorbing)] = 0.0

    new = Hmm.from_probs(
        _normalize_rows(init, hmm.initial),
        _normalize_rows(trans, hmm.transition),
        _normalize_rows(emit, hmm.emission),
        max_len=hmm.max_len,
        eos_token=eos,
    )
    return new, float(counts.loglik.mean())


def mean_loglik(hmm: Hmm, corpus: Corpus | np.ndarray) -> float:
    seqs = corpus.sequences if isinstance(corpus, Corpus) else np.asarray(corpus, dtype=np.int64)
    _, _, ll = forward_backward(hmm, seqs)
    return float(ll.mean())


@dataclass
class EpochRecord:
    epoch: int
    train_ll: float
    heldout_ll: float | None = None

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_ll": self.train_ll, "heldout_ll": self.heldout_ll}


@dataclass
class TrainResult:
    hmm: Hmm
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def heldout_trace(self) -> list[float]:
        return [r.heldout_ll for r in self.history]

    def write_metrics(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec.to_dict()) + "\n")


def train(hmm: Hmm, corpus: Corpus, config: TrainConfig, heldout: Corpus | None = None,
          threads: int = 1, on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Run ``config.epochs`` EM steps on a fixed corpus.

    ``train_ll`` of an epoch is the mean log-likelihood of the model that
    epoch started from; ``heldout_ll`` is measured after the update.
    """
    result = TrainResult(hmm)
    for epoch in range(1, config.epochs + 1):
        hmm, train_ll = em_step(hmm, corpus, config.smoothing, threads)
        rec = EpochRecord(epoch, train_ll, mean_loglik(hmm, heldout) if heldout is not None else None)
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    result.hmm = hmm
    return result


def sample_corpus(teacher, count: int, n: int, eos_token: int, seed) -> Corpus:
    """Draw ``count`` sequences of length at most ``n`` from a teacher language model."""
    try:
        seqs = teacher.sample_many(count, seed, n)
    except ArtifactError:
        raise
    except Exception as exc:  # a broken teacher is a data-source failure
        raise SourceError(f"teacher failed while sampling: {exc}") from exc
    return Corpus.from_sequences(seqs, n, eos_token)


def distill(teacher, student_init: Hmm, config: TrainConfig, threads: int = 1,
            on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit ``student_init`` to samples of ``teacher`` by repeated EM.

    A fixed validation set is drawn first. Each epoch trains on a fresh
    sample of ``resample_per_epoch`` sequences, or on one corpus of
    ``config.samples`` sequences drawn once when resampling is off.
    """
    n, eos = student_init.max_len, student_init.eos_token
    if teacher.vocab_size != student_init.vocab_size:
        raise InputError(f"teacher vocabulary {teacher.vocab_size} != student {student_init.vocab_size}")
    heldout_seed, *epoch_seeds = np.random.SeedSequence(config.seed).spawn(config.epochs + 1)
    heldout = sample_corpus(teacher, config.heldout, n, eos, heldout_seed)
    corpus = None
    if config.resample_per_epoch is None:
        corpus = sample_corpus(teacher, config.samples, n, eos, epoch_seeds[0])

    hmm = student_init
    result = TrainResult(hmm)
    for epoch in range(1, config.epochs + 1):
        if config.resample_per_epoch is not None:
            corpus = sample_corpus(teacher, config.resample_per_epoch, n, eos, epoch_seeds[epoch - 1])
        hmm, train_ll = em_step(hmm, corpus, config.smoothing, threads)
        rec = EpochRecord(epoch, train_ll, mean_loglik(hmm, heldout))
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    result.hmm = hmm
    return result
