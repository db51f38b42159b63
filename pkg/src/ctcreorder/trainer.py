"""Training loop: noam schedule, Adam, global-norm clipping, gradient
accumulation, step-based checkpoints and checkpoint averaging."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericalError
from .nn_encoder import (CTCEncoder, batch_loss, checkpoint_bytes, load_parameter_arrays,
                         parameter_arrays, subsampled_length)
from .ctc_core import min_frames

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr_scale: float = 2.5
    warmup_steps: int = 400
    grad_clip: float = 5.0
    grad_accum: int = 2
    lam: float = 0.5
    seed: int = 0
    checkpoint_every: int = 100
    average_last_k: int = 10
    use_distilled: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        for name in ("batch_size", "warmup_steps", "grad_accum", "checkpoint_every", "average_last_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr_scale <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr_scale and grad_clip must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


def noam_lr(step: int, d: int, warmup: int, scale: float) -> float:
    if step < 1:
        raise ConfigError("noam schedule is defined for step >= 1")
    return scale * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("training log steps must increase")
        self.records.append(record)

    def to_jsonl(self, with_clock: bool = True) -> str:
        lines = []
        for r in self.records:
            r = r if with_clock else {k: v for k, v in r.items() if k != "wall_clock"}
            lines.append(json.dumps(r, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


@dataclass
class TrainResult:
    model: CTCEncoder
    log: TrainingLog
    checkpoints: list[tuple[int, dict[str, np.ndarray]]]

    def averaged(self, k: int) -> CTCEncoder:
        arrays = average_checkpoints([c for _, c in self.checkpoints[-k:]])
        model = CTCEncoder(self.model.config)
        load_parameter_arrays(model, arrays)
        return model


@dataclass
class Example:
    id: str
    features: np.ndarray
    st_target: list[int]
    asr_target: list[int] | None


def examples_from_manifest(manifest, with_asr: bool, use_distilled: bool = False, cfg=None) -> list[Example]:
    """Encode a corpus; utterances whose targets do not fit the subsampled length are dropped and logged."""
    out, rejected = [], []
    for u in manifest.utterances:
        tgt = u.distilled_translation if use_distilled and u.distilled_translation else u.translation
        st = manifest.tgt_vocab.encode(tgt)
        asr = manifest.src_vocab.encode(u.transcription) if with_asr else None
        if cfg is not None:
            budget = subsampled_length(u.features.shape[0], cfg)
            if min_frames(st) > budget or (asr is not None and min_frames(asr) > budget):
                rejected.append(u.id)
                continue
        out.append(Example(u.id, u.features, st, asr))
    if rejected:
        log.warning("rejected %d infeasible utterances: %s", len(rejected), rejected)
    return out


def global_grad_norm(params) -> float:
    sq = sum(float((p.grad.detach() ** 2).sum()) for p in params if p.grad is not None)
    return float(np.sqrt(sq))


def accumulate_gradients(model: CTCEncoder, micro_batches: Sequence[Sequence[Example]], lam: float):
    """Backprop the union-mean loss of several micro-batches into ``.grad``.

    Returns (total, st, asr) losses averaged over all utterances.
    """
    n_total = sum(len(mb) for mb in micro_batches)
    multitask = model.config.asr_layer is not None
    total = st_sum = asr_sum = 0.0
    for mb in micro_batches:
        weights = [1.0 / n_total] * len(mb)
        loss, st, asr = batch_loss(
            model, [e.features for e in mb], [e.st_target for e in mb],
            [e.asr_target for e in mb] if multitask else None, lam,
            ids=[e.id for e in mb], weights=weights)
        if not np.isfinite(loss.item()):
            raise NumericalError(f"non-finite loss in batch {[e.id for e in mb]}")
        loss.backward()
        total += loss.item()
        st_sum += st
        asr_sum += asr if asr is not None else 0.0
    return total, st_sum, (asr_sum if multitask else None)


def train(model: CTCEncoder, examples: Sequence[Example], cfg: TrainConfig, out_dir=None,
          progress=None) -> TrainResult:
    """Optimize ``model`` in place. Fully determined by cfg.seed, the model and the data."""
    if not examples:
        raise DataError("no training examples")
    multitask = model.config.asr_layer is not None
    if multitask and any(e.asr_target is None for e in examples):
        raise DataError("multitask model needs transcriptions for every utterance")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)
    rng = np.random.default_rng(cfg.seed)
    tlog = TrainingLog()
    checkpoints: list[tuple[int, dict[str, np.ndarray]]] = []
    order: list[int] = []
    d = model.config.attention_dim

    def next_batch():
        nonlocal order
        if len(order) < cfg.batch_size:
            order += [int(i) for i in rng.permutation(len(examples))]
        idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
        return [examples[i] for i in idx]

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model.train()
        start = time.perf_counter()
        for step in range(1, cfg.steps + 1):
            lr = noam_lr(step, d, cfg.warmup_steps, cfg.lr_scale)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            micro = [next_batch() for _ in range(cfg.grad_accum)]
            total, st, asr = accumulate_gradients(model, micro, cfg.lam)
            norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
            if not np.isfinite(norm):
                raise NumericalError(f"non-finite gradient at step {step}: "
                                     f"{[e.id for mb in micro for e in mb]}")
            opt.step()
            tlog.append(step=step, lr=lr, loss=total, st_loss=st, asr_loss=asr, grad_norm=norm,
                        wall_clock=round(time.perf_counter() - start, 6))
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                arrays = parameter_arrays(model)
                checkpoints.append((step, arrays))
                checkpoints = checkpoints[-cfg.average_last_k:]
                if out_dir is not None:
                    (out_dir / f"ckpt_{step}.bin").write_bytes(checkpoint_bytes(model.config, arrays))
                    (out_dir / "latest").write_text(f"ckpt_{step}.bin\n")
            if progress is not None:
                progress(step, tlog.records[-1])
        model.eval()
    return TrainResult(model, tlog, checkpoints)


def average_checkpoints(checkpoints: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Element-wise arithmetic mean of parameter tensors."""
    if not checkpoints:
        raise DataError("need at least one checkpoint to average")
    names = set(checkpoints[0])
    for c in checkpoints[1:]:
        if set(c) != names:
            raise DataError("checkpoints have different parameter names")
        for k in names:
            if c[k].shape != checkpoints[0][k].shape:
                raise DataError(f"shape mismatch for {k}")
    return {k: np.mean([c[k] for c in checkpoints], axis=0) for k in checkpoints[0]}


def average_models(models: Sequence[CTCEncoder]) -> CTCEncoder:
    # the init seed does not affect shapes or semantics
    cfgs = {json.dumps({k: v for k, v in m.config.to_dict().items() if k != "seed"}, sort_keys=True)
            for m in models}
    if len(cfgs) != 1:
        raise DataError("cannot average checkpoints with different configs")
    avg = CTCEncoder(models[0].config)
    load_parameter_arrays(avg, average_checkpoints([parameter_arrays(m) for m in models]))
    return avg
