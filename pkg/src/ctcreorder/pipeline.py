"""Glue between the corpus, the model and the metrics: corpus decoding,
hypothesis files, evaluation triplets and end-to-end experiment runs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .ctc_core import greedy_decode
from .errors import DataError
from .nn_encoder import CTCEncoder, ModelConfig, collate, copy_encoder
from .reorder_metrics import (EvalTriplet, bin_by_difficulty, corpus_bleu, corpus_wer,
                              lexicon_alignment, random_permutation_baseline)
from .synth_corpus import CorpusManifest, TaskSpec, generate
from .trainer import Example, TrainConfig, TrainResult, examples_from_manifest, train


@dataclass
class Hypothesis:
    id: str
    tokens: list[str]
    asr_tokens: list[str] | None = None
    path: list[int] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        obj = {"id": self.id, "tokens": self.tokens}
        if self.asr_tokens is not None:
            obj["asr_tokens"] = self.asr_tokens
        return obj


def decode_corpus(model: CTCEncoder, manifest: CorpusManifest, batch_size: int = 64) -> list[Hypothesis]:
    """Greedy decoding of every utterance, batched; identical to per-utterance decoding."""
    model.eval()
    hyps = []
    utts = manifest.utterances
    with torch.no_grad():
        for start in range(0, len(utts), batch_size):
            chunk = utts[start:start + batch_size]
            x, lengths = collate([u.features for u in chunk])
            out = model(x, lengths)
            st = out.st_log_probs.numpy()
            asr = out.asr_log_probs.numpy() if out.asr_log_probs is not None else None
            for i, u in enumerate(chunk):
                n = int(out.lengths[i])
                ids, path = greedy_decode(st[i, :n])
                asr_tokens = None
                if asr is not None:
                    asr_ids, _ = greedy_decode(asr[i, :n])
                    asr_tokens = manifest.src_vocab.decode(asr_ids)
                hyps.append(Hypothesis(u.id, manifest.tgt_vocab.decode(ids), asr_tokens, path))
    return hyps


def write_hypotheses(path, hyps: Sequence[Hypothesis]) -> None:
    with open(path, "w") as fh:
        for h in hyps:
            fh.write(json.dumps(h.to_json(), sort_keys=True) + "\n")


def read_hypotheses(path) -> list[Hypothesis]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"hypothesis file {path} not found")
    hyps = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                hyps.append(Hypothesis(str(obj["id"]), list(obj["tokens"]), obj.get("asr_tokens")))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad hypothesis record ({exc})") from exc
    return hyps


def _match(manifest: CorpusManifest, hyps: Sequence[Hypothesis]):
    by_id = {h.id: h for h in hyps}
    missing = [u.id for u in manifest.utterances if u.id not in by_id]
    if missing:
        raise DataError(f"no hypothesis for {len(missing)} utterances, e.g. {missing[:5]}")
    return [(u, by_id[u.id]) for u in manifest.utterances]


def build_triplets(manifest: CorpusManifest, hyps: Sequence[Hypothesis]) -> list[EvalTriplet]:
    """Pair references with hypotheses; sigma comes from the task lexicon."""
    return [
        EvalTriplet(u.id, list(u.transcription), list(h.tokens), list(u.translation), u.pi,
                    lexicon_alignment(u.source, h.tokens, manifest.lexicon))
        for u, h in _match(manifest, hyps)
    ]


def evaluate(manifest: CorpusManifest, hyps: Sequence[Hypothesis], baseline_trials: int = 0,
             seed: int = 0) -> dict:
    pairs = _match(manifest, hyps)
    triplets = build_triplets(manifest, hyps)
    metrics = {
        "num_utterances": len(pairs),
        "bleu": corpus_bleu([h.tokens for _, h in pairs], [u.translation for u, _ in pairs]),
        "exact_match": float(np.mean([h.tokens == u.translation for u, h in pairs])),
        "mean_r_acc": float(np.mean([t.correctness for t in triplets])),
        "mean_r_pi": float(np.mean([t.difficulty for t in triplets])),
    }
    if all(h.asr_tokens is not None for _, h in pairs):
        metrics["asr_wer"] = corpus_wer([h.asr_tokens for _, h in pairs], [u.transcription for u, _ in pairs])
    if baseline_trials:
        metrics["random_baseline_r_acc"] = random_permutation_baseline(triplets, seed, baseline_trials)
    return metrics


def per_utterance(manifest: CorpusManifest, hyps: Sequence[Hypothesis]) -> list[dict]:
    rows = []
    for tr in build_triplets(manifest, hyps):
        rows.append({"id": tr.id, "r_pi": tr.difficulty, "r_acc": tr.correctness,
                     "hyp_len": len(tr.hypothesis), "ref_len": len(tr.reference),
                     "exact": tr.hypothesis == tr.reference})
    return rows


def difficulty_bins(manifest: CorpusManifest, hyps: Sequence[Hypothesis], num_bins: int):
    return bin_by_difficulty(build_triplets(manifest, hyps), num_bins)


@dataclass
class Experiment:
    task: TaskSpec
    model: dict  # ModelConfig fields; vocabulary sizes and feat_dim come from the corpus
    train: TrainConfig
    n_train: int = 2000
    n_test: int = 200
    pretrain_steps: int = 0  # ASR pretraining of the encoder before translation training


def model_config_for(manifest: CorpusManifest, overrides: dict) -> ModelConfig:
    """ModelConfig from partial settings, with vocabulary sizes and feature dimension taken from a corpus."""
    cfg = dict(overrides)
    cfg["st_vocab_size"] = len(manifest.tgt_vocab)
    cfg["feat_dim"] = manifest.spec.feat_dim
    cfg["asr_vocab_size"] = len(manifest.src_vocab) if cfg.get("asr_layer") else None
    return ModelConfig.from_dict(cfg)


def pretrain_asr(manifest: CorpusManifest, overrides: dict, tcfg: TrainConfig) -> TrainResult:
    """Train the encoder to transcribe (CTC over source symbols at the top layer)."""
    cfg = model_config_for(manifest, {**overrides, "asr_layer": None})
    cfg = ModelConfig.from_dict({**cfg.to_dict(), "st_vocab_size": len(manifest.src_vocab)})
    examples = [Example(e.id, e.features, e.asr_target, None)
                for e in examples_from_manifest(manifest, True, cfg=cfg)]
    return train(CTCEncoder(cfg), examples, tcfg)


def run_experiment(exp: Experiment, out_dir=None, average: bool = False):
    """Generate data, optionally pretrain on ASR, train, decode the held-out split.

    Returns (TrainResult, held-out manifest, hypotheses, metrics).
    """
    train_set = generate(exp.task, exp.n_train, "train")
    test_set = generate(exp.task, exp.n_test, "test")
    cfg = model_config_for(train_set, exp.model)
    model = CTCEncoder(cfg)
    if exp.pretrain_steps:
        pre = pretrain_asr(train_set, exp.model, replace(exp.train, steps=exp.pretrain_steps))
        copy_encoder(pre.model, model)
    examples = examples_from_manifest(train_set, cfg.asr_layer is not None, exp.train.use_distilled, cfg)
    result: TrainResult = train(model, examples, exp.train, out_dir)
    final = result.averaged(exp.train.average_last_k) if average else result.model
    hyps = decode_corpus(final, test_set)
    return result, test_set, hyps, evaluate(test_set, hyps)
