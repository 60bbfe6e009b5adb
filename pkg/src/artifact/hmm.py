"""Homogeneous hidden Markov models over fixed-length token sequences.

Parameters live in natural-log space; ``-inf`` is an exact zero. A model
describes sequences of exactly ``n`` tokens. Variable-length text is
represented by padding with an EOS token that, by construction of the
model, can only ever be followed by more EOS tokens.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, LengthError, StructureError
from .logspace import log_vecmat, logsumexp, safe_log

JSON_VERSION = 1
BINARY_MAGIC = b"GLT1"
_HEADER = struct.Struct("<4sqqqq")
_NORM_TOL = 1e-9


class Hmm:
    """An immutable HMM with initial, transition and emission log-probabilities.

    ``log_transition[i, j]`` is ``log Pr(z_t = j | z_{t-1} = i)`` and
    ``log_emission[z, v]`` is ``log Pr(x_t = v | z_t = z)``. Linear-space
    copies are kept as ``initial``, ``transition`` and ``emission`` for the
    dense matrix products used by the inference code.
    """

    def __init__(
        self,
        log_initial,
        log_transition,
        log_emission,
        max_len: int,
        eos_token: int | None = None,
    ):
        log_initial = np.array(log_initial, dtype=np.float64)
        log_transition = np.array(log_transition, dtype=np.float64)
        log_emission = np.array(log_emission, dtype=np.float64)
        if log_initial.ndim != 1 or log_initial.size == 0:
            raise StructureError("initial must be a nonempty vector")
        h = log_initial.size
        if log_transition.shape != (h, h):
            raise StructureError(f"transition must be {h}x{h}, got {log_transition.shape}")
        if log_emission.ndim != 2 or log_emission.shape[0] != h or log_emission.shape[1] == 0:
            raise StructureError(f"emission must be {h}xV, got {log_emission.shape}")
        if int(max_len) < 1:
            raise StructureError("max_len must be a positive integer")
        V = log_emission.shape[1]
        if eos_token is None:
            eos_token = V - 1
        if not 0 <= int(eos_token) < V:
            raise StructureError(f"eos_token {eos_token} outside [0, {V})")

        self.num_states = h
        self.vocab_size = V
        self.max_len = int(max_len)
        self.eos_token = int(eos_token)
        self.log_initial = log_initial
        self.log_transition = log_transition
        self.log_emission = log_emission
        self.initial = np.exp(log_initial)
        self.transition = np.exp(log_transition)
        self.emission = np.exp(log_emission)
        for arr in (self.log_initial, self.log_transition, self.log_emission,
                    self.initial, self.transition, self.emission):
            arr.setflags(write=False)
        self._check_stochastic()
        self.absorbing_states = self._find_absorbing()

    @classmethod
    def from_probs(cls, initial, transition, emission, max_len: int, eos_token: int | None = None) -> Hmm:
        return cls(safe_log(initial), safe_log(transition), safe_log(emission), max_len, eos_token)

    # -- validation -------------------------------------------------------

    def _check_stochastic(self) -> None:
        if np.any(np.isnan(self.log_initial)) or np.any(np.isnan(self.log_transition)) \
                or np.any(np.isnan(self.log_emission)):
            raise StructureError("parameters contain NaN")
        if np.any(self.log_initial > 0) or np.any(self.log_transition > 0) or np.any(self.log_emission > 0):
            raise StructureError("log-probabilities must be <= 0")
        checks = [("initial", self.initial[None, :]), ("transition", self.transition),
                  ("emission", self.emission)]
        for name, rows in checks:
            err = np.abs(rows.sum(axis=1) - 1.0)
            if np.any(err > _NORM_TOL):
                bad = int(np.argmax(err))
                raise StructureError(f"{name} row {bad} sums to {rows[bad].sum():.12g}, not 1")

    def _find_absorbing(self) -> np.ndarray:
        eos = self.eos_token
        others = np.delete(self.log_emission, eos, axis=1)
        absorbing = np.all(others == -np.inf, axis=1)
        if np.any(np.isfinite(self.log_emission[~absorbing, eos])):
            bad = int(np.flatnonzero(~absorbing & np.isfinite(self.log_emission[:, eos]))[0])
            raise StructureError(
                f"state {bad} emits EOS but is not absorbing; EOS could be followed by other tokens")
        leaks = np.isfinite(self.log_transition[np.ix_(absorbing, ~absorbing)])
        if np.any(leaks):
            raise StructureError("an absorbing EOS state transitions out of the absorbing set")
        return np.flatnonzero(absorbing)

    # -- inference --------------------------------------------------------

    def check_tokens(self, tokens: Sequence[int], allow_empty: bool = False) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if arr.size == 0 and not allow_empty:
            raise InputError("token sequence must be nonempty")
        if arr.size > self.max_len:
            raise LengthError(f"sequence of length {arr.size} exceeds max_len {self.max_len}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise InputError(f"token id out of range [0, {self.vocab_size})")
        return arr

    def forward_pass(self, prefix: Sequence[int]) -> np.ndarray:
        """Forward vectors ``log Pr(x_{1:t}, z_t)`` for every prefix length.

        Returns an array of shape ``(t, h)``; row ``i`` holds the vector for
        the prefix of length ``i + 1``.
        """
        tokens = self.check_tokens(prefix)
        out = np.empty((tokens.size, self.num_states))
        out[0] = self.log_initial + self.log_emission[:, tokens[0]]
        for i in range(1, tokens.size):
            out[i] = self.step_forward(out[i - 1], tokens[i])
        return out

    def step_forward(self, forward: np.ndarray | None, token: int) -> np.ndarray:
        """Extend a forward vector by one token (``None`` means empty prefix)."""
        if forward is None:
            return self.log_initial + self.log_emission[:, token]
        return log_vecmat(forward, self.transition) + self.log_emission[:, token]

    def prefix_logprob(self, prefix: Sequence[int]) -> float:
        """``log Pr(x_{1:t})``; the empty prefix has log-probability 0."""
        if len(prefix) == 0:
            return 0.0
        return float(logsumexp(self.forward_pass(prefix)[-1]))

    def next_token_logprobs(self, forward: np.ndarray | None) -> np.ndarray:
        """``log Pr(x_{1:t}, X_{t+1} = v)`` for all v, given the forward vector at t."""
        if forward is None:
            prior = self.log_initial
        else:
            prior = log_vecmat(forward, self.transition)
        return log_vecmat(prior, self.emission)

    def state_marginals(self) -> np.ndarray:
        """``Pr(Z_t = z)`` for t = 1..n, shape ``(n, h)``."""
        out = np.empty((self.max_len, self.num_states))
        out[0] = self.initial
        for t in range(1, self.max_len):
            out[t] = out[t - 1] @ self.transition
        return out

    # -- sampling ---------------------------------------------------------

    def sample_sequences(self, count: int, seed) -> np.ndarray:
        """Draw ``count`` full-length sequences by ancestral sampling.

        Uses numpy's PCG64 generator (``np.random.default_rng(seed)``) and
        inverse-CDF draws, two uniforms per position: one for the state,
        one for the token. Output shape is ``(count, n)``.
        """
        rng = np.random.default_rng(seed)
        n = self.max_len
        init_cdf = _cdf(self.initial[None, :])[0]
        trans_cdf = _cdf(self.transition)
        emit_cdf = _cdf(self.emission)
        u = rng.random((count, n, 2))
        states = np.empty((count, n), dtype=np.int64)
        tokens = np.empty((count, n), dtype=np.int64)
        states[:, 0] = (u[:, 0, 0, None] >= init_cdf).sum(axis=1)
        for t in range(1, n):
            rows = trans_cdf[states[:, t - 1]]
            states[:, t] = (u[:, t, 0, None] >= rows).sum(axis=1)
        for t in range(n):
            rows = emit_cdf[states[:, t]]
            tokens[:, t] = (u[:, t, 1, None] >= rows).sum(axis=1)
        return tokens

    def sample_sequence(self, seed) -> list[int]:
        return self.sample_sequences(1, seed)[0].tolist()

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": JSON_VERSION,
            "h": self.num_states,
            "V": self.vocab_size,
            "n": self.max_len,
            "eos_token": self.eos_token,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "emission": self.emission.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Hmm:
        try:
            version = doc["version"]
            if version != JSON_VERSION:
                raise InputError(f"unsupported model version {version}")
            model = cls.from_probs(doc["initial"], doc["transition"], doc["emission"],
                                   doc["n"], doc["eos_token"])
        except KeyError as exc:
            raise InputError(f"model document missing field {exc}") from None
        if (model.num_states, model.vocab_size) != (doc["h"], doc["V"]):
            raise InputError("model header disagrees with parameter shapes")
        return model

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(BINARY_MAGIC, self.num_states, self.vocab_size,
                              self.max_len, self.eos_token)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.log_initial, self.log_transition, self.log_emission))
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> Hmm:
        if len(data) < _HEADER.size:
            raise InputError("binary model truncated")
        magic, h, V, n, eos = _HEADER.unpack_from(data)
        if magic != BINARY_MAGIC:
            raise InputError(f"bad magic bytes {magic!r}")
        expected = _HEADER.size + 8 * (h + h * h + h * V)
        if len(data) != expected:
            raise InputError(f"binary model has {len(data)} bytes, expected {expected}")
        flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
        init = flat[:h]
        trans = flat[h:h + h * h].reshape(h, h)
        emit = flat[h + h * h:].reshape(h, V)
        return cls(init, trans, emit, n, eos)

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict()))
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Hmm:
        path = Path(path)
        data = path.read_bytes()
        if data[:4] == BINARY_MAGIC:
            return cls.from_bytes(data)
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: not a model file ({exc})") from None
        return cls.from_dict(doc)

    def __repr__(self) -> str:
        return (f"Hmm(h={self.num_states}, V={self.vocab_size}, n={self.max_len}, "
                f"eos={self.eos_token})")


def make_eos_absorbing(hmm: Hmm) -> Hmm:
    """Reserve the last state as the only state that emits EOS.

    The reserved state emits EOS with probability 1 and loops to itself.
    EOS mass is removed from every other state's emission row, which is then
    renormalized. Transitions into the reserved state are left as they are;
    they decide where sequences end.
    """
    h, V, eos = hmm.num_states, hmm.vocab_size, hmm.eos_token
    if h < 2:
        raise StructureError("an EOS-absorbing model needs at least 2 states")
    if V < 2:
        raise StructureError("an EOS-absorbing model needs a non-EOS token")
    emission = hmm.emission.copy()
    emission[:, eos] = 0.0
    sums = emission.sum(axis=1, keepdims=True)
    fallback = np.full(V, 1.0 / (V - 1))
    fallback[eos] = 0.0
    emission = np.where(sums > 0, emission / np.where(sums > 0, sums, 1.0), fallback)
    emission[-1] = 0.0
    emission[-1, eos] = 1.0
    transition = hmm.transition.copy()
    transition[-1] = 0.0
    transition[-1, -1] = 1.0
    return Hmm.from_probs(hmm.initial, transition, emission, hmm.max_len, eos)


def random_hmm(h: int, V: int, n: int, seed, eos_token: int | None = None,
               concentration: float = 1.0, absorbing: bool = True) -> Hmm:
    """Dirichlet-initialized model, made EOS-absorbing unless told otherwise."""
    rng = np.random.default_rng(seed)
    alpha_h = np.full(h, concentration)
    initial = rng.dirichlet(alpha_h)
    transition = rng.dirichlet(alpha_h, size=h)
    emission = rng.dirichlet(np.full(V, concentration), size=h)
    if eos_token is None:
        eos_token = V - 1
    if not absorbing:
        # keep EOS out of the picture entirely so the structure check passes
        emission[:, eos_token] = 0.0
        emission /= emission.sum(axis=1, keepdims=True)
        return Hmm.from_probs(initial, transition, emission, n, eos_token)
    # EOS mass is renormalized away from the non-absorbing states anyway
    return make_eos_absorbing(Hmm.from_probs(initial, transition, _no_eos(emission, eos_token),
                                             n, eos_token))


def _cdf(rows: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(rows, axis=1)
    # round-off can leave the total just below 1; everything from the last
    # positive entry on catches the remainder so zero-mass outcomes stay unreachable
    last = rows.shape[1] - 1 - np.argmax(rows[:, ::-1] > 0, axis=1)
    cdf[np.arange(rows.shape[1])[None, :] >= last[:, None]] = np.inf
    return cdf


def _no_eos(emission: np.ndarray, eos: int) -> np.ndarray:
    out = emission.copy()
    if out.shape[1] > 1:
        out[:, eos] = 0.0
        out /= out.sum(axis=1, keepdims=True)
    return out
