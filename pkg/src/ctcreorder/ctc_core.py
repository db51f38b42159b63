"""Exact CTC likelihood, gradients, greedy decoding and the collapsing function.

Everything here works on natural-log probabilities in float64. The blank token
is always vocabulary index 0.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, InstanceTooLarge, NumericalError

BLANK_ID = 0
NEG_INF = -np.inf
BRUTEFORCE_LIMIT = 10**7

LATTICE_MAGIC = b"CTCL"
LATTICE_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    blank_id: int = BLANK_ID

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise DataError("vocabulary needs at least a blank and one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary tokens must be unique")
        if not 0 <= self.blank_id < len(self.tokens):
            raise DataError(f"blank_id {self.blank_id} out of range")

    def __len__(self):
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self._lookup[token]
        except KeyError:
            raise DataError(f"unknown token {token!r}") from None

    @property
    def _lookup(self) -> dict[str, int]:
        lookup = self.__dict__.get("_lookup_cache")
        if lookup is None:
            lookup = {tok: i for i, tok in enumerate(self.tokens)}
            object.__setattr__(self, "_lookup_cache", lookup)
        return lookup

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def _as_lattice(lattice) -> np.ndarray:
    arr = np.asarray(lattice, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise DataError(f"lattice must be T x V with T >= 1, V >= 2; got shape {arr.shape}")
    return arr


def _check_target(target: Sequence[int], vocab_size: int) -> list[int]:
    ids = [int(t) for t in target]
    for t in ids:
        if t == BLANK_ID or not 0 <= t < vocab_size:
            raise DataError(f"target id {t} is blank or outside vocabulary of size {vocab_size}")
    return ids


def log_normalize(logits) -> np.ndarray:
    """Row-wise log-softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))


def check_normalized(lattice, atol: float = 1e-9) -> None:
    arr = _as_lattice(lattice)
    sums = np.logaddexp.reduce(arr, axis=1)
    if not np.all(np.abs(sums) <= atol):
        raise DataError("lattice rows do not log-sum-exp to 0")


def collapse(path: Sequence[int], vocab_size: int | Vocabulary | None = None) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    if isinstance(vocab_size, Vocabulary):
        vocab_size = len(vocab_size)
    out = []
    prev = None
    for a in path:
        a = int(a)
        if a < 0 or (vocab_size is not None and a >= vocab_size):
            raise DataError(f"path id {a} outside vocabulary")
        if a != prev and a != BLANK_ID:
            out.append(a)
        prev = a
    return out


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames a path collapsing to ``target`` can have."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    skip = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        skip[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
    return skip


def ctc_forward_backward(
    log_probs: np.ndarray,
    input_lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
    need_posteriors: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Batched CTC forward-backward in log space.

    Args:
        log_probs: (B, T_max, V) per-frame log-probabilities; frames past an
            example's length are ignored.
        input_lengths: valid frame count per example.
        targets: label id sequences (no blanks).
        need_posteriors: also run the backward pass.

    Returns:
        ``(loglik, gamma)`` where ``loglik`` has shape (B,) and ``gamma`` is the
        (B, T_max, V) expected token occupancy, i.e. d loglik / d log_probs.
        ``gamma`` rows of infeasible examples are NaN.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    B, T_max, V = log_probs.shape
    lengths = np.asarray(input_lengths, dtype=np.int64)
    if lengths.shape != (B,) or len(targets) != B:
        raise DataError("batch size mismatch between lattice, lengths and targets")
    if np.any(lengths < 1) or np.any(lengths > T_max):
        raise DataError("input lengths out of range")

    S_max = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.zeros((B, S_max), dtype=np.int64)
    skip = np.zeros((B, S_max), dtype=bool)
    valid = np.zeros((B, S_max), dtype=bool)
    S = np.zeros(B, dtype=np.int64)
    for b, tgt in enumerate(targets):
        tgt = _check_target(tgt, V)
        e = _extend(tgt)
        S[b] = len(e)
        ext[b, : len(e)] = e
        skip[b, : len(e)] = _skip_allowed(e)
        valid[b, : len(e)] = True

    rows = np.arange(B)[:, None]
    # emissions[b, t, s] = log p(ext[b, s] | frame t)
    emit = log_probs[rows, :, ext].transpose(0, 2, 1)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T_max, S_max), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S_max > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T_max):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        if S_max > 2:
            hop = np.where(skip[:, 2:], prev[:, :-2], NEG_INF)
            acc[:, 2:] = np.logaddexp(acc[:, 2:], hop)
        alpha[:, t] = acc + emit[:, t]

    last = lengths - 1
    b_idx = np.arange(B)
    end_blank = alpha[b_idx, last, S - 1]
    end_label = np.where(S > 1, alpha[b_idx, last, np.maximum(S - 2, 0)], NEG_INF)
    loglik = np.logaddexp(end_blank, end_label)

    if not need_posteriors:
        return loglik, None

    # beta[b, t, s]: log prob of emitting the rest of the path after frame t, given state s at t
    beta = np.full((B, T_max, S_max), NEG_INF)
    init = np.full((B, S_max), NEG_INF)
    init[b_idx, S - 1] = 0.0
    has_label = S > 1
    init[b_idx[has_label], S[has_label] - 2] = 0.0
    for t in range(T_max - 1, -1, -1):
        if t == T_max - 1:
            cur = np.full((B, S_max), NEG_INF)
        else:
            nxt = beta[:, t + 1] + emit[:, t + 1]
            cur = nxt.copy()
            cur[:, :-1] = np.logaddexp(cur[:, :-1], nxt[:, 1:])
            if S_max > 2:
                hop = np.where(skip[:, 2:], nxt[:, 2:], NEG_INF)
                cur[:, :-2] = np.logaddexp(cur[:, :-2], hop)
        at_end = last == t
        cur[at_end] = init[at_end]
        cur[last < t] = NEG_INF
        beta[:, t] = cur

    feasible = np.isfinite(loglik)
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - np.where(feasible, loglik, 0.0)[:, None, None])
    gamma = np.zeros((B, T_max, V))
    for b in range(B):
        if not feasible[b]:
            gamma[b] = np.nan
            continue
        np.add.at(gamma[b].T, ext[b, : S[b]], occ[b, :, : S[b]].T)
    gamma[np.arange(T_max)[None, :] >= lengths[:, None]] = 0.0
    return loglik, gamma


def ctc_log_likelihood(lattice, target: Sequence[int]) -> float:
    """log p(target | lattice) summed over every path that collapses to target.

    Returns ``-inf`` when the lattice has too few frames for the target.
    """
    lat = _as_lattice(lattice)
    ll, _ = ctc_forward_backward(lat[None], [lat.shape[0]], [list(target)], need_posteriors=False)
    return float(ll[0])


def ctc_log_likelihood_bruteforce(lattice, target: Sequence[int]) -> float:
    """Reference value by enumerating all V**T paths. Test oracle only."""
    lat = _as_lattice(lattice)
    T, V = lat.shape
    target = _check_target(target, V)
    if V**T > BRUTEFORCE_LIMIT:
        raise InstanceTooLarge(f"V**T = {V}**{T} exceeds enumeration limit {BRUTEFORCE_LIMIT}")
    scores = [
        sum(lat[t, a] for t, a in enumerate(path))
        for path in itertools.product(range(V), repeat=T)
        if collapse(path) == target
    ]
    if not scores:
        return float(NEG_INF)
    return float(np.logaddexp.reduce(np.array(scores)))


def ctc_grad(lattice, target: Sequence[int]) -> np.ndarray:
    """Gradient of -log p(target) w.r.t. the pre-softmax logits (lattice treated as logits).

    Raises NumericalError for infeasible targets.
    """
    lat = log_normalize(_as_lattice(lattice))
    ll, gamma = ctc_forward_backward(lat[None], [lat.shape[0]], [list(target)])
    if not np.isfinite(ll[0]):
        raise NumericalError("gradient undefined: target is infeasible for this lattice")
    return np.exp(lat) - gamma[0]


def greedy_decode(lattice) -> tuple[list[int], list[int]]:
    """Best-path decoding. Returns (collapsed label ids, frame-level path)."""
    lat = _as_lattice(lattice)
    path = [int(i) for i in np.argmax(lat, axis=1)]  # argmax picks the lowest index on ties
    return collapse(path), path


def token_frames(path: Sequence[int]) -> list[list[int]]:
    """Frames emitting each decoded token occurrence, in output order."""
    groups: list[list[int]] = []
    prev = None
    for t, a in enumerate(path):
        if a != BLANK_ID:
            if a == prev:
                groups[-1].append(t)
            else:
                groups.append([t])
        prev = a
    return groups


# ---------------------------------------------------------------------------
# lattice files


def save_lattice(path, lattice) -> None:
    lat = _as_lattice(lattice)
    T, V = lat.shape
    with open(path, "wb") as fh:
        fh.write(LATTICE_MAGIC)
        fh.write(struct.pack("<III", LATTICE_VERSION, T, V))
        fh.write(lat.astype("<f8").tobytes(order="C"))


def load_lattice(path) -> np.ndarray:
    """Read a binary CTCL lattice, or a JSON ``{"T", "V", "logprobs"}`` fixture."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == LATTICE_MAGIC:
        if len(raw) < 16:
            raise DataError(f"{path}: truncated lattice header")
        version, T, V = struct.unpack("<III", raw[4:16])
        if version != LATTICE_VERSION:
            raise DataError(f"{path}: unsupported lattice version {version}")
        body = raw[16:]
        if len(body) != 8 * T * V:
            raise DataError(f"{path}: expected {T}x{V} values, got {len(body) // 8}")
        return np.frombuffer(body, dtype="<f8").reshape(T, V).astype(np.float64)
    try:
        obj = json.loads(raw.decode("utf-8"))
        T, V = int(obj["T"]), int(obj["V"])
        arr = np.asarray(obj["logprobs"], dtype=np.float64)
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a CTCL or JSON lattice ({exc})") from exc
    if arr.shape != (T, V):
        raise DataError(f"{path}: logprobs shape {arr.shape} != ({T}, {V})")
    return arr
