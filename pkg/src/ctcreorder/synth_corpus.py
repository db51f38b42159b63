"""Seeded synthetic "speech translation" corpora with exact reference alignments.

Every utterance draws distinct source symbols, so the symbol-level mapping
between source, transcription and translation positions is unambiguous and the
reference alignment is exact.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc_core import Vocabulary, min_frames
from .errors import ConfigError, DataError
from .reorder_metrics import AlignmentMap, reorder_difficulty

KINDS = ("copy", "substitute", "local_swap", "window_permute", "reverse")
FEAT_MAGIC = b"FEAT"


@dataclass
class TaskSpec:
    kind: str = "substitute"
    src_vocab_size: int = 20
    tgt_vocab_size: int = 20
    min_len: int = 5
    max_len: int = 12
    swap_prob: float = 0.3
    window_size: int = 3
    permutation: list[int] | None = None
    frames_per_symbol: int = 8
    feat_dim: int = 16
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.src_vocab_size < 2:
            raise ConfigError("src_vocab_size must be >= 2")
        if self.kind != "copy" and self.tgt_vocab_size < self.src_vocab_size:
            raise ConfigError("substitution lexicon needs tgt_vocab_size >= src_vocab_size")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.max_len > self.src_vocab_size:
            raise ConfigError("max_len cannot exceed src_vocab_size (symbols are distinct per utterance)")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ConfigError("swap_prob must lie in [0, 1]")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.permutation is not None:
            if sorted(self.permutation) != list(range(len(self.permutation))):
                raise ConfigError("permutation must be a permutation of 0..w-1")
            self.window_size = len(self.permutation)
        if self.frames_per_symbol < 1 or self.feat_dim < 1 or self.noise_std < 0:
            raise ConfigError("frames_per_symbol, feat_dim must be positive and noise_std >= 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskSpec":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad task spec: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    id: str
    source: list[str]
    transcription: list[str]
    translation: list[str]
    pi: AlignmentMap
    r_pi: float
    features: np.ndarray  # (frames, feat_dim) float32
    distilled_translation: list[str] | None = None

    def to_json(self, features_ref: str | None = None) -> dict:
        return {
            "id": self.id,
            "source": list(self.source),
            "transcription": list(self.transcription),
            "translation": list(self.translation),
            "pi": {"src_len": self.pi.source_len, "tgt_len": self.pi.target_len,
                   "pairs": [list(p) for p in self.pi.pairs]},
            "r_pi": self.r_pi,
            "features": features_ref if features_ref is not None
            else [[float(v) for v in row] for row in self.features],
            "distilled_translation": self.distilled_translation,
        }


@dataclass
class CorpusManifest:
    spec: TaskSpec
    utterances: list[Utterance]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    lexicon: dict[str, str]
    split: str = "train"

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise DataError("utterance ids must be unique")

    def __len__(self):
        return len(self.utterances)

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}


# ---------------------------------------------------------------------------
# task-level tables (shared by every split generated from the same spec)


def _task_rng(spec: TaskSpec, purpose: str) -> np.random.Generator:
    return np.random.default_rng(_stable_seed(spec.seed, purpose))


def _stable_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def source_symbols(spec: TaskSpec) -> list[str]:
    return [f"s{i}" for i in range(spec.src_vocab_size)]


def build_vocabularies(spec: TaskSpec) -> tuple[Vocabulary, Vocabulary, dict[str, str]]:
    """(source/ASR vocab, target/ST vocab, source->target lexicon); blank is "<b>"."""
    src = source_symbols(spec)
    if spec.kind == "copy":
        tgt = list(src)
        lexicon = {s: s for s in src}
    else:
        tgt = [f"t{i}" for i in range(spec.tgt_vocab_size)]
        chosen = _task_rng(spec, "lexicon").permutation(spec.tgt_vocab_size)[: len(src)]
        lexicon = {s: tgt[int(j)] for s, j in zip(src, chosen)}
    return Vocabulary(("<b>", *src)), Vocabulary(("<b>", *tgt)), lexicon


def swap_rules(spec: TaskSpec) -> np.ndarray:
    """Boolean (V, V) table: adjacent source pair (a, b) is swapped iff rules[a, b].

    round(sqrt(swap_prob) * V) symbols are "leaders" and, independently drawn,
    as many are "followers"; a pair swaps when a leader precedes a
    follower, so a random ordered pair swaps with probability close to swap_prob.
    """
    rng = _task_rng(spec, "swap")
    V = spec.src_vocab_size
    count = round(math.sqrt(spec.swap_prob) * V)
    leader = np.zeros(V, dtype=bool)
    follower = np.zeros(V, dtype=bool)
    leader[rng.permutation(V)[:count]] = True
    follower[rng.permutation(V)[:count]] = True
    return leader[:, None] & follower[None, :]


def window_permutation(spec: TaskSpec) -> list[int]:
    if spec.permutation is not None:
        return list(spec.permutation)
    return list(range(spec.window_size))[::-1]


def symbol_embeddings(spec: TaskSpec) -> np.ndarray:
    return _task_rng(spec, "embed").standard_normal((spec.src_vocab_size, spec.feat_dim))


# ---------------------------------------------------------------------------
# reordering


def reorder_positions(symbols: Sequence[int], spec: TaskSpec, rules: np.ndarray | None = None) -> list[int]:
    """Source positions in translation order (``order[j]`` = source index of output j)."""
    n = len(symbols)
    kind = spec.kind
    if kind in ("copy", "substitute"):
        return list(range(n))
    if kind == "reverse":
        return list(range(n))[::-1]
    if kind == "local_swap":
        rules = swap_rules(spec) if rules is None else rules
        order, i = [], 0
        while i < n:
            if i + 1 < n and rules[symbols[i], symbols[i + 1]]:
                order += [i + 1, i]
                i += 2
            else:
                order.append(i)
                i += 1
        return order
    perm = window_permutation(spec)
    order = []
    for start in range(0, n, len(perm)):
        width = min(len(perm), n - start)
        # a partial last window keeps the relative order of the surviving slots
        order += [start + p for p in perm if p < width]
    return order


def render_features(symbols: Sequence[int], spec: TaskSpec, rng: np.random.Generator | None = None,
                    embeddings: np.ndarray | None = None) -> np.ndarray:
    """Pseudo-acoustic frames: each symbol's embedding held for ``frames_per_symbol`` frames, plus noise."""
    emb = symbol_embeddings(spec) if embeddings is None else embeddings
    for s in symbols:
        if not 0 <= s < spec.src_vocab_size:
            raise DataError(f"symbol id {s} outside source vocabulary")
    frames = np.repeat(emb[list(symbols)], spec.frames_per_symbol, axis=0)
    if spec.noise_std > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        frames = frames + spec.noise_std * rng.standard_normal(frames.shape)
    return frames.astype(np.float32)


def downsampled_length(frames: int, downsample: int = 4) -> int:
    return -(-frames // downsample)


def generate(spec: TaskSpec, n: int, split: str = "train", downsample: int = 4) -> CorpusManifest:
    """Draw ``n`` utterances. Pure function of (spec, n, split)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    src_vocab, tgt_vocab, lexicon = build_vocabularies(spec)
    symbols_all = source_symbols(spec)
    rules = swap_rules(spec) if spec.kind == "local_swap" else None
    emb = symbol_embeddings(spec)
    utts = []
    for i in range(n):
        uid = f"{split}-{i:06d}"
        rng = np.random.default_rng(_stable_seed(spec.seed, uid))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        syms = [int(s) for s in rng.choice(spec.src_vocab_size, size=length, replace=False)]
        source = [symbols_all[s] for s in syms]
        order = reorder_positions(syms, spec, rules)
        translation = [lexicon[source[k]] for k in order]
        pi = AlignmentMap(tuple((k, j) for j, k in enumerate(order)), length, length)
        feats = render_features(syms, spec, rng, emb)
        budget = downsampled_length(feats.shape[0], downsample)
        if min_frames(tgt_vocab.encode(translation)) > budget:
            raise ConfigError(f"{uid}: translation needs more CTC frames than the {budget} available")
        utts.append(Utterance(uid, source, list(source), translation, pi, reorder_difficulty(pi), feats))
    return CorpusManifest(spec, utts, src_vocab, tgt_vocab, lexicon, split)


def merge(manifests: Sequence[CorpusManifest], split: str) -> CorpusManifest:
    """Concatenate manifests sharing vocabularies (e.g. several difficulty levels)."""
    first = manifests[0]
    utts = []
    for m in manifests:
        if m.src_vocab != first.src_vocab or m.tgt_vocab != first.tgt_vocab or m.lexicon != first.lexicon:
            raise DataError("cannot merge manifests with different vocabularies or lexicons")
        utts += m.utterances
    ids = [u.id for u in utts]
    if len(set(ids)) != len(ids):
        raise DataError("merged manifests share utterance ids; generate them under distinct split names")
    return CorpusManifest(first.spec, utts, first.src_vocab, first.tgt_vocab, first.lexicon, split)


def expected_difficulty(spec: TaskSpec, draws: int = 10_000) -> tuple[float, float]:
    """E[R_pi] for the spec, with its standard error (0 when exact)."""
    if spec.kind in ("copy", "substitute"):
        return 0.0, 0.0
    if spec.kind == "reverse" and spec.min_len >= 2:
        return 1.0, 0.0
    rng = np.random.default_rng(_stable_seed(spec.seed, "expected-difficulty"))
    rules = swap_rules(spec) if spec.kind == "local_swap" else None
    values = np.empty(draws)
    for d in range(draws):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        syms = [int(s) for s in rng.choice(spec.src_vocab_size, size=length, replace=False)]
        order = reorder_positions(syms, spec, rules)
        pi = AlignmentMap(tuple((k, j) for j, k in enumerate(order)), length, length)
        values[d] = reorder_difficulty(pi)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(draws))


# ---------------------------------------------------------------------------
# manifest files


def save_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<II", *feats.shape))
        fh.write(feats.astype("<f4").tobytes(order="C"))


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEAT_MAGIC or len(raw) < 12:
        raise DataError(f"{path}: not a FEAT file")
    frames, dim = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * frames * dim:
        raise DataError(f"{path}: truncated feature body")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float32)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_manifest(manifest: CorpusManifest, path, inline_features: bool = False) -> Path:
    """Write ``<path>`` (JSON-lines) and ``<path>.meta.json``; features go to a sidecar dir unless inline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feat_dir = path.parent / f"{path.stem}_feats"
    if not inline_features:
        feat_dir.mkdir(exist_ok=True)
    with open(path, "w") as fh:
        for u in manifest.utterances:
            ref = None
            if not inline_features:
                save_features(feat_dir / f"{u.id}.feat", u.features)
                ref = f"{feat_dir.name}/{u.id}.feat"
            fh.write(_dumps(u.to_json(ref)) + "\n")
    meta = {
        "split": manifest.split,
        "spec": manifest.spec.to_dict(),
        "src_vocab": list(manifest.src_vocab.tokens),
        "tgt_vocab": list(manifest.tgt_vocab.tokens),
        "lexicon": manifest.lexicon,
    }
    meta_path(path).write_text(_dumps(meta) + "\n")
    return path


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    try:
        meta = json.loads(meta_path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest metadata for {path}: {exc}") from exc
    utts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                feats = obj["features"]
                if isinstance(feats, str):
                    feats = load_features(path.parent / feats)
                else:
                    feats = np.asarray(feats, dtype=np.float32)
                pi = AlignmentMap.from_json(obj["pi"])
                utts.append(Utterance(obj["id"], obj["source"], obj["transcription"], obj["translation"],
                                      pi, float(obj["r_pi"]), feats, obj.get("distilled_translation")))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad utterance record ({exc})") from exc
    return CorpusManifest(TaskSpec.from_dict(meta["spec"]), utts, Vocabulary(meta["src_vocab"]),
                          Vocabulary(meta["tgt_vocab"]), meta["lexicon"], meta["split"])
