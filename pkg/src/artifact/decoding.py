"""Constraint-guided decoding: fuse exact HMM guidance with a base LM.

Two fusion rules are supported. ``unsupervised`` weights the LM's next
token by the HMM probability that the constraint can still be met::

    p(v) ∝ Pr_hmm(constraint | x_{1:t}, v) * Pr_lm(v | x_{1:t})

``supervised`` takes a weighted geometric mean of the HMM's
constraint-conditioned next-token law and the LM's::

    p(v) ∝ Pr_hmm(v | x_{1:t}, constraint)^w * Pr_lm(v | x_{1:t})^(1 - w)

In both, a token the HMM rules out gets probability exactly zero, so
every finished sequence satisfies the constraint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .base_lm import BaseLm
from .constraints import satisfies, satisfies_ordered
from .dp import DpCache, GenerationState
from .errors import ArtifactError, BridgeError, DeadEndError, HorizonError, InfeasibleError, InputError
from .logspace import log_vecmat, logsumexp

MODES = ("unsupervised", "supervised")
STRATEGIES = ("sample", "beam")


@dataclass
class DecodeConfig:
    mode: str = "unsupervised"
    w: float = 0.3
    beam_size: int = 4
    max_len: int | None = None
    seed: int = 0
    strategy: str = "sample"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.strategy not in STRATEGIES:
            raise InputError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode == "supervised" and not 0 < self.w < 1:
            raise InputError(f"w must lie in (0, 1), got {self.w}")
        if self.beam_size < 1:
            raise InputError("beam_size must be positive")
        if self.max_len is not None and self.max_len < 1:
            raise InputError("max_len must be positive")


def check_horizon(cfg: DecodeConfig, cache: DpCache) -> int:
    """The decoding length is the cache horizon; a differing ``max_len`` is an error."""
    if cfg.max_len is not None and cfg.max_len != cache.n:
        raise HorizonError(f"max_len {cfg.max_len} differs from the cache horizon {cache.n}; "
                           "precompute the cache with n = max_len")
    return cache.n


def _lm_logprobs(lm: BaseLm, prefix: Sequence[int], V: int) -> np.ndarray:
    vec = np.asarray(lm.next_logprobs(list(prefix)), dtype=np.float64)
    if vec.shape != (V,):
        raise BridgeError(f"language model returned {vec.size} scores for a vocabulary of {V}")
    return vec


def fused_next(cfg: DecodeConfig, state: GenerationState, cache: DpCache, lm: BaseLm) -> np.ndarray:
    """Normalized log next-token distribution under the configured fusion rule."""
    if state.length >= check_horizon(cfg, cache):
        raise HorizonError(f"no next token after position {cache.n}")
    hmm = cache.hmm
    lm_lp = _lm_logprobs(lm, state.prefix, hmm.vocab_size)
    joint_next = cache.next_token_joint(state)
    allowed = np.isfinite(joint_next)
    hmm_side = np.full(hmm.vocab_size, -np.inf)
    if cfg.mode == "unsupervised":
        # Pr(constraint | x_{1:t}, v) = joint / Pr(x_{1:t}, v)
        prior = hmm.log_initial if state.forward is None else log_vecmat(state.forward, hmm.transition)
        marginal = log_vecmat(prior, hmm.emission)
        hmm_side[allowed] = joint_next[allowed] - marginal[allowed]
        scores = hmm_side + lm_lp
    else:
        joint = cache.joint(state)
        if np.isfinite(joint):
            hmm_side[allowed] = joint_next[allowed] - joint
        scores = np.full(hmm.vocab_size, -np.inf)
        scores[allowed] = cfg.w * hmm_side[allowed] + (1.0 - cfg.w) * lm_lp[allowed]
    scores[~allowed] = -np.inf
    total = logsumexp(scores)
    if not np.isfinite(total):
        pending = cache.pending_clauses(state)
        raise DeadEndError(f"no token can continue prefix {list(state.prefix)}; "
                           f"pending clauses {pending}")
    return scores - total


def _draw(rng: np.random.Generator, logp: np.ndarray) -> int:
    p = np.exp(logp)
    cdf = np.cumsum(p)
    cdf[int(np.flatnonzero(p > 0)[-1]):] = np.inf
    return int(np.searchsorted(cdf, rng.random(), side="right"))


def _require_feasible(cache: DpCache) -> GenerationState:
    state = cache.initial_state()
    if cache.joint(state) == -np.inf:
        raise InfeasibleError(f"constraint has probability zero within {cache.n} tokens")
    return state


def _pad(tokens: list[int], n: int, eos: int) -> list[int]:
    return tokens + [eos] * (n - len(tokens))


def sample_constrained(cfg: DecodeConfig, cache: DpCache, lm: BaseLm, seed=None) -> list[int]:
    """Draw one sequence token by token from the fused distribution.

    Generation stops at the first EOS and the result is EOS-padded to the
    horizon. ``seed`` overrides ``cfg.seed`` and may be a numpy Generator.
    """
    n = check_horizon(cfg, cache)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        cfg.seed if seed is None else seed)
    eos = cache.hmm.eos_token
    state = _require_feasible(cache)
    while state.length < n:
        try:
            logp = fused_next(cfg, state, cache, lm)
        except DeadEndError as exc:
            # exact guidance never leads into a dead end from a feasible start
            raise ArtifactError(f"internal error: dead end during sampling ({exc})") from exc
        tok = _draw(rng, logp)
        state = cache.advance(state, tok)
        if tok == eos:
            break
    return _pad(list(state.prefix), n, eos)


def fused_sequence_logprob(cfg: DecodeConfig, tokens: Sequence[int], cache: DpCache, lm: BaseLm) -> float:
    """Log-probability of a full sequence under the chain of fused distributions."""
    state = cache.initial_state()
    total = 0.0
    for tok in tokens:
        total += float(fused_next(cfg, state, cache, lm)[tok])
        if total == -np.inf:
            return total
        state = cache.advance(state, tok)
    return total


@dataclass
class Beam:
    state: GenerationState
    score: float = 0.0
    lm_score: float = 0.0
    finished: bool = False

    def tokens(self, n: int, eos: int) -> list[int]:
        return _pad(list(self.state.prefix), n, eos)


def beam_search_constrained(cfg: DecodeConfig, cache: DpCache, lm: BaseLm) -> list[Beam]:
    """Beam search over summed fused log-probabilities.

    Candidates are ranked by score, then smaller token id, then smaller
    parent beam index. A beam that emitted EOS is finished: it is carried
    forward unchanged (as if extended by EOS, which it must be) and its LM
    score stops accumulating.
    """
    n = check_horizon(cfg, cache)
    eos = cache.hmm.eos_token
    beams = [Beam(_require_feasible(cache))]
    for _ in range(n):
        if all(b.finished for b in beams):
            break
        candidates = []
        for bi, beam in enumerate(beams):
            if beam.finished:
                candidates.append((-beam.score, eos, bi, None, 0.0))
                continue
            try:
                logp = fused_next(cfg, beam.state, cache, lm)
            except DeadEndError:
                continue
            lm_lp = _lm_logprobs(lm, beam.state.prefix, cache.hmm.vocab_size)
            for v in np.flatnonzero(np.isfinite(logp)):
                candidates.append((-(beam.score + float(logp[v])), int(v), bi, logp[v], float(lm_lp[v])))
        if not candidates:
            raise InfeasibleError("every beam reached a dead end")
        candidates.sort(key=lambda c: c[:3])
        next_beams = []
        for neg, v, bi, step, lm_step in candidates[:cfg.beam_size]:
            parent = beams[bi]
            if step is None:
                next_beams.append(Beam(parent.state, parent.score, parent.lm_score, True))
                continue
            state = cache.advance(parent.state, v)
            next_beams.append(Beam(state, -neg, parent.lm_score + lm_step, v == eos))
        beams = next_beams
    return beams


def rerank_by_lm(beams: Sequence[Beam]) -> list[Beam]:
    """Stable sort by accumulated base-LM log-likelihood, best first."""
    if not beams:
        raise InputError("nothing to rerank")
    return sorted(beams, key=lambda b: -b.lm_score)


def rescore_lm(beams: Sequence[Beam], lm: BaseLm, eos: int) -> list[float]:
    """Recompute each beam's LM log-likelihood over its text (through the first EOS)."""
    out = []
    for b in beams:
        toks = list(b.state.prefix)
        if eos in toks:
            toks = toks[:toks.index(eos) + 1]
        out.append(lm.sequence_logprob(toks))
    return out


def check_output(tokens: Sequence[int], cache: DpCache) -> bool:
    eos = cache.hmm.eos_token
    if cache.ordered:
        return satisfies_ordered(tokens, cache.cnf, cache.masks.order, eos)
    return satisfies(tokens, cache.cnf, eos)


def decode(cfg: DecodeConfig, cache: DpCache, lm: BaseLm, count: int = 1) -> list[dict]:
    """Run the configured strategy; one record per output sequence."""
    n = check_horizon(cfg, cache)
    eos = cache.hmm.eos_token
    records = []
    if cfg.strategy == "sample":
        seeds = np.random.SeedSequence(cfg.seed).spawn(count)
        for s in seeds:
            toks = sample_constrained(cfg, cache, lm, seed=np.random.default_rng(s))
            records.append({"tokens": toks,
                            "fused_logprob": fused_sequence_logprob(cfg, toks, cache, lm)})
    else:
        ranked = rerank_by_lm(beam_search_constrained(cfg, cache, lm))
        for b in ranked[:count]:
            records.append({"tokens": b.tokens(n, eos), "fused_logprob": b.score, "lm_logprob": b.lm_score})
    for rec in records:
        rec["satisfied"] = check_output(rec["tokens"], cache)
    return records
