"""Conv-subsampled transformer encoder with CTC heads for translation and an
optional intermediate-layer recognition head.

The model runs in float64 throughout. The CTC objective itself comes from
:mod:`ctcreorder.ctc_core` and is wired into autograd by :class:`CTCLossFn`.
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
import torch
from torch import nn

from .ctc_core import ctc_forward_backward, min_frames
from .errors import ConfigError, DataError, NumericalError

DTYPE = torch.float64
CKPT_MAGIC = b"NARC"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    num_layers: int = 4
    attention_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    conv_layers: int = 2
    conv_stride: int = 2
    asr_layer: int | None = None
    st_vocab_size: int = 21
    asr_vocab_size: int | None = None
    feat_dim: int = 16
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 0 or self.attention_dim < 1 or self.num_heads < 1 or self.ffn_dim < 1:
            raise ConfigError("layer counts and dimensions must be positive")
        if self.attention_dim % self.num_heads:
            raise ConfigError("attention_dim must be divisible by num_heads")
        if self.conv_layers < 0 or self.conv_stride < 1:
            raise ConfigError("invalid conv subsampler settings")
        if self.asr_layer is not None:
            if not 1 <= self.asr_layer <= self.num_layers:
                raise ConfigError(f"asr_layer must lie in [1, {self.num_layers}]")
            if not self.asr_vocab_size or self.asr_vocab_size < 2:
                raise ConfigError("asr_vocab_size required when asr_layer is set")
        if self.st_vocab_size < 2:
            raise ConfigError("st_vocab_size must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def downsample(self) -> int:
        return self.conv_stride ** self.conv_layers

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def subsampled_length(frames: int, cfg: ModelConfig) -> int:
    for _ in range(cfg.conv_layers):
        frames = -(-frames // cfg.conv_stride)
    return frames


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=DTYPE) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


class EncoderLayer(nn.Module):
    """Post-norm self-attention block."""

    def __init__(self, d: int, heads: int, ffn: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ffn)
        self.ff2 = nn.Linear(ffn, d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
        B, T, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, T, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, d)
        x = self.norm1(x + self.drop(self.out(ctx)))
        return self.norm2(x + self.drop(self.ff2(self.drop(torch.relu(self.ff1(x))))))


@dataclass
class EncoderOutput:
    st_log_probs: torch.Tensor  # (B, |X|, V_st)
    asr_log_probs: torch.Tensor | None
    lengths: torch.Tensor  # (B,)
    activations: list[torch.Tensor] | None  # L + 1 tensors of (B, |X|, d)


class CTCEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self._build(config)
        self.to(DTYPE)

    def _build(self, config: ModelConfig):
        d = config.attention_dim
        convs = []
        in_ch = config.feat_dim
        for _ in range(config.conv_layers):
            convs.append(nn.Conv1d(in_ch, d, kernel_size=3, stride=config.conv_stride, padding=1))
            in_ch = d
        self.convs = nn.ModuleList(convs)
        self.input_proj = nn.Linear(config.feat_dim, d) if config.conv_layers == 0 else None
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.num_heads, config.ffn_dim, config.dropout) for _ in range(config.num_layers)
        )
        self.drop = nn.Dropout(config.dropout)
        self.st_head = nn.Linear(d, config.st_vocab_size)
        self.asr_head = nn.Linear(d, config.asr_vocab_size) if config.asr_layer else None

    def embed(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Subsample (B, T, F) features to (B, |X|, d) plus positional encoding."""
        x = feats.transpose(1, 2)
        for conv in self.convs:
            x = torch.relu(conv(x))
            lengths = torch.div(lengths + conv.stride[0] - 1, conv.stride[0], rounding_mode="floor")
            # zero the padded tail so batched and single-utterance results agree
            mask = torch.arange(x.shape[-1])[None, :] < lengths[:, None]
            x = x * mask[:, None, :]
        x = x.transpose(1, 2)
        if self.input_proj is not None:
            x = self.input_proj(x)
        x = x + sinusoidal_encoding(x.shape[1], x.shape[2])[None]
        return self.drop(x), lengths

    def heads(self, final: torch.Tensor, asr_hidden: torch.Tensor | None):
        st = torch.log_softmax(self.st_head(final), dim=-1)
        asr = None
        if self.asr_head is not None and asr_hidden is not None:
            asr = torch.log_softmax(self.asr_head(asr_hidden), dim=-1)
        return st, asr

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor, retain_activations: bool = False,
                activation_hook=None) -> EncoderOutput:
        x, out_len = self.embed(feats, lengths)
        if activation_hook is not None:
            x = activation_hook(0, x)
        acts = [x] if retain_activations else None
        key_mask = torch.arange(x.shape[1])[None, :] < out_len[:, None]
        asr_hidden = None
        for i, layer in enumerate(self.layers):
            x = layer(x, key_mask)
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite activation after layer {i + 1}")
            if activation_hook is not None:
                x = activation_hook(i + 1, x)
            if acts is not None:
                acts.append(x)
            if self.config.asr_layer == i + 1:
                asr_hidden = x
        st, asr = self.heads(x, asr_hidden)
        return EncoderOutput(st, asr, out_len, acts)


# ---------------------------------------------------------------------------
# batching


def collate(features: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = [f.shape[0] for f in features]
    dim = features[0].shape[1]
    batch = np.zeros((len(features), max(lengths), dim), dtype=np.float64)
    for b, f in enumerate(features):
        batch[b, : f.shape[0]] = f
    return torch.from_numpy(batch), torch.tensor(lengths, dtype=torch.long)


def _check_features(model: CTCEncoder, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.config.feat_dim:
        raise DataError(f"features must be frames x {model.config.feat_dim}; got {feats.shape}")
    if feats.shape[0] < model.config.downsample:
        raise DataError(f"need at least {model.config.downsample} frames, got {feats.shape[0]}")
    return feats


def forward(model: CTCEncoder, features: np.ndarray, retain_activations: bool = False):
    """Single-utterance forward pass in eval mode.

    Returns ``(st_lattice, asr_lattice or None, activations or None)`` as numpy arrays.
    """
    feats = _check_features(model, features)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x, lengths = collate([feats])
            out = model(x, lengths, retain_activations=retain_activations)
    finally:
        model.train(was_training)
    st = out.st_log_probs[0].numpy().copy()
    asr = out.asr_log_probs[0].numpy().copy() if out.asr_log_probs is not None else None
    acts = [a[0].numpy().copy() for a in out.activations] if out.activations is not None else None
    return st, asr, acts


# ---------------------------------------------------------------------------
# CTC as an autograd function


class CTCLossFn(torch.autograd.Function):
    """Per-example negative log-likelihood; gradient from the exact forward-backward."""

    @staticmethod
    def forward(ctx, log_probs, lengths, targets):
        ll, gamma = ctc_forward_backward(log_probs.detach().numpy(), lengths.numpy(), targets)
        if not np.all(np.isfinite(ll)):
            bad = [i for i in range(len(ll)) if not np.isfinite(ll[i])]
            raise NumericalError(f"infeasible CTC targets at batch positions {bad}")
        ctx.save_for_backward(torch.from_numpy(-gamma))
        return torch.from_numpy(-ll)

    @staticmethod
    def backward(ctx, grad_out):
        (neg_gamma,) = ctx.saved_tensors
        return neg_gamma * grad_out[:, None, None], None, None


def ctc_nll(log_probs: torch.Tensor, lengths: torch.Tensor, targets: Sequence[Sequence[int]]) -> torch.Tensor:
    return CTCLossFn.apply(log_probs, lengths, [list(t) for t in targets])


def check_feasible(ids: Sequence[str], frames: Sequence[int], st_targets, asr_targets, cfg: ModelConfig):
    bad = []
    for i, uid in enumerate(ids):
        budget = subsampled_length(frames[i], cfg)
        if min_frames(st_targets[i]) > budget or (asr_targets is not None and min_frames(asr_targets[i]) > budget):
            bad.append(uid)
    if bad:
        raise DataError(f"targets infeasible for the subsampled length: {bad}")


def batch_loss(model: CTCEncoder, features: Sequence[np.ndarray], st_targets, asr_targets=None,
               lam: float = 0.5, ids: Sequence[str] | None = None, weights: Sequence[float] | None = None):
    """Mean-over-utterances multitask loss for a batch.

    Returns ``(loss tensor, st mean, asr mean or None)``.
    """
    cfg = model.config
    multitask = cfg.asr_layer is not None
    if multitask != (asr_targets is not None):
        raise ConfigError("asr targets must be given exactly when the model has an ASR head")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(features))]
    check_feasible(ids, [f.shape[0] for f in features], st_targets, asr_targets, cfg)
    x, lengths = collate([np.asarray(f, dtype=np.float64) for f in features])
    out = model(x, lengths)
    w = torch.full((len(features),), 1.0 / len(features), dtype=DTYPE) if weights is None \
        else torch.tensor(weights, dtype=DTYPE)
    st = (ctc_nll(out.st_log_probs, out.lengths, st_targets) * w).sum()
    if not multitask:
        return st, st.item(), None
    asr = (ctc_nll(out.asr_log_probs, out.lengths, asr_targets) * w).sum()
    return (1.0 - lam) * st + lam * asr, st.item(), asr.item()


def loss_and_grad(model: CTCEncoder, features: np.ndarray, st_target: Sequence[int],
                  asr_target: Sequence[int] | None = None, lam: float = 0.5,
                  deterministic: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one utterance."""
    feats = _check_features(model, features)
    was_training = model.training
    model.train(not deterministic)
    try:
        model.zero_grad(set_to_none=True)
        loss, _, _ = batch_loss(model, [feats], [st_target],
                                None if asr_target is None else [asr_target], lam)
        loss.backward()
    finally:
        model.train(was_training)
    grads = {name: (p.grad.numpy().copy() if p.grad is not None else np.zeros(p.shape))
             for name, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)
    return loss.item(), grads


def grad_wrt_activations(model: CTCEncoder, features: np.ndarray, frame: int, layer: int,
                         token: int | None = None) -> np.ndarray:
    """d log p(token | output frame) / d (hidden state entering layer ``layer + 1``).

    ``layer`` ranges over 0..L; 0 is the subsampled, position-encoded input and
    L is the final encoder output. ``token`` defaults to the frame's argmax.
    Returns an (|X|, d) array.
    """
    grads = selected_activation_grads(model, features, [frame], [layer], [token])
    return grads[0][layer]


def selected_activation_grads(model: CTCEncoder, features: np.ndarray, frames: Sequence[int],
                              layers: Sequence[int], tokens: Sequence[int | None] | None = None):
    """For each output frame, gradients of its selected log-prob w.r.t. the given layers.

    Returns a list (per frame) of {layer: (|X|, d) array}.
    """
    feats = _check_features(model, features)
    L = model.config.num_layers
    for m in layers:
        if not 0 <= m <= L:
            raise DataError(f"layer {m} out of range 0..{L}")
    was_training = model.training
    model.eval()
    try:
        x, lengths = collate([feats])
        out = model(x, lengths, retain_activations=True)
        acts = out.activations
        n_out = out.st_log_probs.shape[1]
        results = []
        tokens = list(tokens) if tokens is not None else [None] * len(frames)
        for f, tok in zip(frames, tokens):
            if not 0 <= f < n_out:
                raise DataError(f"frame {f} out of range 0..{n_out - 1}")
            row = out.st_log_probs[0, f]
            k = int(torch.argmax(row)) if tok is None else int(tok)
            if not 0 <= k < row.shape[0]:
                raise DataError(f"token {k} outside vocabulary")
            gs = torch.autograd.grad(row[k], [acts[m] for m in layers], retain_graph=True, allow_unused=True)
            results.append({m: (g[0].numpy().copy() if g is not None else np.zeros(acts[m][0].shape))
                            for m, g in zip(layers, gs)})
    finally:
        model.train(was_training)
    return results


def log_prob_from_layer(model: CTCEncoder, features: np.ndarray, layer: int, hidden: np.ndarray,
                        frame: int, token: int) -> float:
    """Replace the hidden state at ``layer`` by ``hidden`` and read one output log-prob.

    Used by finite-difference checks of activation gradients.
    """
    feats = _check_features(model, features)
    replacement = torch.from_numpy(np.asarray(hidden, dtype=np.float64))[None]

    def hook(idx, x):
        return replacement if idx == layer else x

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x, lengths = collate([feats])
            out = model(x, lengths, activation_hook=hook)
    finally:
        model.train(was_training)
    return float(out.st_log_probs[0, frame, token])


# ---------------------------------------------------------------------------
# parameters and checkpoints


def parameter_arrays(model: CTCEncoder) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}


def load_parameter_arrays(model: CTCEncoder, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    if set(arrays) != set(state):
        raise DataError("parameter names do not match the model")
    for k, v in arrays.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise DataError(f"shape mismatch for {k}: {v.shape} vs {tuple(state[k].shape)}")
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite values in {k}")
    model.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float64)) for k, v in arrays.items()})


def checkpoint_bytes(config: ModelConfig, arrays: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes(order="C")]
    return b"".join(parts)


def parse_checkpoint(raw: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if raw[:4] != CKPT_MAGIC:
        raise DataError("not a NARC checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise DataError("truncated checkpoint")
        vals = struct.unpack(fmt, raw[pos:pos + size])
        pos += size
        return vals

    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    config = ModelConfig.from_dict(json.loads(raw[pos:pos + n].decode()))
    pos += n
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (klen,) = take("<I")
        name = raw[pos:pos + klen].decode()
        pos += klen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        size = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + size > len(raw):
            raise DataError("truncated checkpoint")
        arrays[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(dims).astype(np.float64)
        pos += size
    if pos != len(raw):
        raise DataError("trailing bytes in checkpoint")
    return config, arrays


def save_checkpoint(path, model: CTCEncoder) -> None:
    Path(path).write_bytes(checkpoint_bytes(model.config, parameter_arrays(model)))


def load_checkpoint(path) -> CTCEncoder:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    config, arrays = parse_checkpoint(raw)
    model = CTCEncoder(config)
    load_parameter_arrays(model, arrays)
    return model


def reinit_st_head(model: CTCEncoder, seed: int) -> None:
    """Fresh translation head on top of a (pretrained) encoder."""
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(model.config.attention_dim)
    with torch.no_grad():
        model.st_head.weight.uniform_(-bound, bound, generator=gen)
        model.st_head.bias.uniform_(-bound, bound, generator=gen)


HEAD_PREFIXES = ("st_head.", "asr_head.")


def copy_encoder(src: CTCEncoder, dst: CTCEncoder) -> None:
    """Load every non-head parameter of ``src`` into ``dst``; heads of ``dst`` keep their values.

    Used to start translation training from an ASR-pretrained encoder.
    """
    src_state, dst_state = src.state_dict(), dst.state_dict()
    shared = [k for k in dst_state if not k.startswith(HEAD_PREFIXES)]
    for k in shared:
        if k not in src_state or src_state[k].shape != dst_state[k].shape:
            raise ConfigError(f"encoders are not compatible at {k}")
    with torch.no_grad():
        for k in shared:
            dst_state[k].copy_(src_state[k])
