"""Reordering metrics (Kendall's tau disagreement, reordering correctness and
difficulty), difficulty binning, corpus BLEU and WER."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class AlignmentMap:
    """Partial map from source positions to target positions (0-based)."""

    pairs: tuple[tuple[int, int], ...]
    source_len: int
    target_len: int

    def __post_init__(self):
        pairs = tuple(sorted((int(s), int(t)) for s, t in self.pairs))
        object.__setattr__(self, "pairs", pairs)
        for s, t in pairs:
            if not (0 <= s < self.source_len and 0 <= t < self.target_len):
                raise DataError(f"alignment link ({s}, {t}) out of range "
                                f"{self.source_len}x{self.target_len}")

    @property
    def is_bijective(self) -> bool:
        src = [s for s, _ in self.pairs]
        tgt = [t for _, t in self.pairs]
        return len(set(src)) == len(src) and len(set(tgt)) == len(tgt)

    def as_dict(self) -> dict[int, int]:
        if not self.is_bijective:
            raise DataError("alignment is not bijective; simplify it first")
        return dict(self.pairs)

    @classmethod
    def from_permutation(cls, positions: Sequence[int], target_len: int | None = None):
        """Source position k is aligned to ``positions[k]``."""
        n = len(positions)
        return cls(tuple(enumerate(positions)), n, n if target_len is None else target_len)

    @classmethod
    def monotonic(cls, n: int):
        return cls.from_permutation(range(n))

    def to_json(self, utt_id: str) -> dict:
        return {"id": utt_id, "src_len": self.source_len, "tgt_len": self.target_len,
                "pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_json(cls, obj: dict) -> "AlignmentMap":
        try:
            return cls(tuple(tuple(p) for p in obj["pairs"]), int(obj["src_len"]), int(obj["tgt_len"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad alignment record: {exc}") from exc


def simplify_to_bijection(raw: AlignmentMap) -> AlignmentMap:
    """Reduce a many-to-many alignment to a bijective partial map.

    Each source keeps its lowest target; among sources competing for one
    target the lowest source wins. Unaligned sources are simply absent.
    """
    first_target: dict[int, int] = {}
    for s, t in raw.pairs:  # pairs are sorted, so the first seen target is the lowest
        first_target.setdefault(s, t)
    owner: dict[int, int] = {}
    for s, t in sorted(first_target.items()):
        owner.setdefault(t, s)
    return AlignmentMap(tuple((s, t) for t, s in owner.items()), raw.source_len, raw.target_len)


def _common_positions(pi: AlignmentMap, sigma: AlignmentMap) -> tuple[list[int], list[int]]:
    p, q = pi.as_dict(), sigma.as_dict()
    common = sorted(set(p) & set(q))
    return [p[k] for k in common], [q[k] for k in common]


def count_discordant_naive(a: Sequence[int], b: Sequence[int]) -> int:
    """Literal double sum of z_ij = [a_i < a_j and b_i > b_j]."""
    n = len(a)
    return sum(1 for i in range(n) for j in range(n) if a[i] < a[j] and b[i] > b[j])


def count_discordant(a: Sequence[int], b: Sequence[int]) -> int:
    """O(n log n) discordant-pair count by merge-sort inversion counting.

    Pairs tied in ``a`` never count. Pairs tied in ``b`` never count either.
    """
    # ties in a are ordered by ascending b so they never form an inversion
    order = sorted(range(len(a)), key=lambda i: (a[i], b[i]))
    seq = [b[i] for i in order]
    return _inversions(seq)


def _inversions(seq: list[int]) -> int:
    if len(seq) < 2:
        return 0
    mid = len(seq) // 2
    left, right = seq[:mid], seq[mid:]
    inv = _inversions(left) + _inversions(right)
    left.sort()
    right.sort()
    j = 0
    # count pairs (x in left, y in right) with x > y
    for x in left:
        while j < len(right) and right[j] < x:
            j += 1
        inv += j
    seq[:] = sorted(seq)
    return inv


def kendall_disagreement(pi: AlignmentMap, sigma: AlignmentMap) -> float:
    """Fraction of source-position pairs that the two alignments order differently.

    Only source positions aligned in both maps take part; fewer than two such
    positions give 0.
    """
    a, b = _common_positions(pi, sigma)
    n = len(a)
    if n < 2:
        return 0.0
    return count_discordant(a, b) / (n * (n - 1) / 2)


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len <= 0:
        return 0.0
    if hyp_len <= ref_len:
        return math.exp(1.0 - ref_len / hyp_len)
    return 1.0


def reorder_correctness(pi: AlignmentMap, sigma: AlignmentMap, hyp_len: int, ref_len: int) -> float:
    if ref_len < 1:
        raise DataError("reference length must be positive")
    if hyp_len == 0:
        return 0.0
    return (1.0 - math.sqrt(kendall_disagreement(pi, sigma))) * brevity_penalty(hyp_len, ref_len)


def reorder_correctness_multi(pis: Sequence[AlignmentMap], sigmas: Sequence[AlignmentMap],
                              hyp_len: int, ref_lens: Sequence[int]) -> float:
    """Best correctness over several references; BP uses the winning reference's length."""
    return max(reorder_correctness(p, s, hyp_len, n) for p, s, n in zip(pis, sigmas, ref_lens))


def reorder_difficulty(pi: AlignmentMap) -> float:
    """Disagreement between ``pi`` and the identity alignment on its domain."""
    mono = AlignmentMap(tuple((s, s) for s, _ in pi.pairs), pi.source_len, pi.source_len)
    return kendall_disagreement(pi, mono)


def lexicon_alignment(source: Sequence[str], hypothesis: Sequence[str],
                      lexicon: dict[str, str]) -> AlignmentMap:
    """Align source tokens to every hypothesis token that is their translation,
    then simplify. Stands in for an external word aligner on synthetic data."""
    pairs = [(k, j) for k, s in enumerate(source) for j, h in enumerate(hypothesis)
             if lexicon.get(s) == h]
    return simplify_to_bijection(AlignmentMap(tuple(pairs), len(source), max(len(hypothesis), 1)))


@dataclass
class EvalTriplet:
    id: str
    transcription: list[str]
    hypothesis: list[str]
    reference: list[str]
    pi: AlignmentMap
    sigma: AlignmentMap

    def __post_init__(self):
        if self.pi.source_len != len(self.transcription) or self.sigma.source_len != len(self.transcription):
            raise DataError(f"{self.id}: alignment source length does not match transcription")
        if self.pi.target_len != len(self.reference):
            raise DataError(f"{self.id}: reference alignment length does not match reference")

    @property
    def difficulty(self) -> float:
        return reorder_difficulty(self.pi)

    @property
    def correctness(self) -> float:
        return reorder_correctness(self.pi, self.sigma, len(self.hypothesis), len(self.reference))


def random_permutation_baseline(triplets: Sequence[EvalTriplet], seed: int, trials: int) -> float:
    """Mean correctness when sigma is a uniformly random shuffle of the reference positions."""
    if trials < 1:
        raise DataError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for _ in range(trials):
        for tr in triplets:
            srcs = [s for s, _ in tr.pi.pairs]
            tgts = [t for _, t in tr.pi.pairs]
            perm = [tgts[i] for i in rng.permutation(len(tgts))]
            sigma = AlignmentMap(tuple(zip(srcs, perm)), tr.pi.source_len, tr.pi.target_len)
            n = len(tr.reference)
            total += reorder_correctness(tr.pi, sigma, n, n)
            count += 1
    return total / count


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int] = field(default_factory=lambda: [0] * 4)
    totals: list[int] = field(default_factory=lambda: [0] * 4)
    hyp_len: int = 0
    ref_len: int = 0

    def add(self, hyp: Sequence[str], ref: Sequence[str]) -> None:
        self.hyp_len += len(hyp)
        self.ref_len += len(ref)
        for n in range(1, 5):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            self.matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            self.totals[n - 1] += max(len(hyp) - n + 1, 0)

    def score(self) -> float:
        if self.hyp_len == 0 or min(self.matches) == 0:
            return 0.0
        log_prec = sum(math.log(m / t) for m, t in zip(self.matches, self.totals)) / 4
        bp = 1.0 if self.hyp_len > self.ref_len else math.exp(1 - self.ref_len / self.hyp_len)
        return bp * math.exp(log_prec)


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Unsmoothed corpus BLEU-4 in [0, 1] over whitespace-split token lists."""
    if len(hypotheses) != len(references):
        raise DataError("hypothesis and reference counts differ")
    if not hypotheses:
        raise DataError("empty hypothesis set")
    stats = BleuStats()
    for h, r in zip(hypotheses, references):
        if not r:
            raise DataError("empty reference")
        stats.add(list(h), list(r))
    return stats.score()


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    if not reference:
        raise DataError("empty reference")
    return edit_distance(list(hypothesis), list(reference)) / len(reference)


def corpus_wer(hypotheses: Iterable[Sequence[str]], references: Iterable[Sequence[str]]) -> float:
    """Total edits over total reference tokens."""
    edits = words = 0
    for h, r in zip(hypotheses, references):
        if not r:
            raise DataError("empty reference")
        edits += edit_distance(list(h), list(r))
        words += len(r)
    if words == 0:
        raise DataError("empty reference set")
    return edits / words


@dataclass
class DifficultyBin:
    index: int
    r_pi_min: float
    r_pi_max: float
    ids: list[str]
    bleu: float
    mean_r_acc: float

    def to_json(self) -> dict:
        return {"bin": self.index, "r_pi_min": self.r_pi_min, "r_pi_max": self.r_pi_max,
                "count": len(self.ids), "ids": list(self.ids), "bleu": self.bleu,
                "mean_r_acc": self.mean_r_acc}


def bin_by_difficulty(triplets: Sequence[EvalTriplet], num_bins: int) -> list[DifficultyBin]:
    """Equal-count bins of increasing reference reordering difficulty."""
    if num_bins < 1:
        raise DataError("need at least one bin")
    if len(triplets) < num_bins:
        raise DataError(f"{len(triplets)} examples cannot fill {num_bins} bins")
    scored = sorted(((tr.difficulty, tr.id, tr) for tr in triplets), key=lambda x: (x[0], x[1]))
    bins = []
    for b, chunk in enumerate(np.array_split(np.arange(len(scored)), num_bins)):
        members = [scored[i] for i in chunk]
        trs = [m[2] for m in members]
        bins.append(DifficultyBin(
            index=b,
            r_pi_min=members[0][0],
            r_pi_max=members[-1][0],
            ids=[tr.id for tr in trs],
            bleu=corpus_bleu([tr.hypothesis for tr in trs], [tr.reference for tr in trs]),
            mean_r_acc=float(np.mean([tr.correctness for tr in trs])),
        ))
    return bins
