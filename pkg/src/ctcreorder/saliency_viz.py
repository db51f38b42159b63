"""Gradient saliency matrices and per-token reordering matrices, with CSV/SVG export.

Layer indices follow :func:`ctcreorder.nn_encoder.grad_wrt_activations`:
activation ``m`` (0..L) is the hidden state entering transformer layer m+1.
The reordering matrix column for layer l (1..L) uses that layer's input,
activation l-1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc_core import greedy_decode, token_frames
from .errors import DataError
from .nn_encoder import CTCEncoder, forward, selected_activation_grads


@dataclass
class SaliencyMatrix:
    layer: int
    values: np.ndarray  # (|X| source frames, |X| output frames)


@dataclass
class ReorderingMatrix:
    occurrence: int
    token: int
    frames: list[int]
    values: np.ndarray  # (|X|, L)


def normalize_columns(raw: np.ndarray) -> np.ndarray:
    """L1-normalize each column; all-zero columns stay zero."""
    sums = raw.sum(axis=0, keepdims=True)
    return np.divide(raw, sums, out=np.zeros_like(raw), where=sums > 0)


def raw_saliency(model: CTCEncoder, features: np.ndarray, layers: Sequence[int]) -> dict[int, np.ndarray]:
    """Unnormalized gradient-norm matrices for several layers, one backward pass per output frame."""
    st, _, _ = forward(model, features)
    n_out = st.shape[0]
    tokens = [int(k) for k in np.argmax(st, axis=1)]
    grads = selected_activation_grads(model, features, range(n_out), layers, tokens)
    out = {}
    for m in layers:
        mat = np.zeros((n_out, n_out))
        for i, g in enumerate(grads):
            mat[:, i] = np.linalg.norm(g[m], axis=1)
        out[m] = mat
    return out


def saliency_layer(model: CTCEncoder, features: np.ndarray, layer: int) -> SaliencyMatrix:
    """Entry (t, i): L2 norm of d log p(argmax token at i) / d h_layer[t], columns L1-normalized."""
    if not 0 <= layer <= model.config.num_layers:
        raise DataError(f"layer {layer} out of range 0..{model.config.num_layers}")
    raw = raw_saliency(model, features, [layer])[layer]
    return SaliencyMatrix(layer, normalize_columns(raw))


def token_frame_map(model: CTCEncoder, features: np.ndarray) -> tuple[list[int], list[list[int]]]:
    """Decoded token ids and, per occurrence, the greedy-path frames emitting it."""
    st, _, _ = forward(model, features)
    ids, path = greedy_decode(st)
    return ids, token_frames(path)


def reordering_matrix(model: CTCEncoder, features: np.ndarray, occurrence: int) -> ReorderingMatrix:
    """|X| x L relative influence of every frame on one decoded token, per layer."""
    ids, groups = token_frame_map(model, features)
    if not 0 <= occurrence < len(groups):
        raise DataError(f"token occurrence {occurrence} not found; {len(groups)} tokens decoded")
    L = model.config.num_layers
    mats = raw_saliency(model, features, list(range(L)))
    frames = groups[occurrence]
    cols = [normalize_columns(mats[layer - 1])[:, frames].mean(axis=1) for layer in range(1, L + 1)]
    values = np.stack(cols, axis=1) if cols else np.zeros((mats.get(0, np.zeros((0, 0))).shape[0], 0))
    return ReorderingMatrix(occurrence, ids[occurrence], frames, values)


def all_reordering_matrices(model: CTCEncoder, features: np.ndarray) -> list[ReorderingMatrix]:
    """Reordering matrices for every decoded token, sharing one set of backward passes."""
    ids, groups = token_frame_map(model, features)
    L = model.config.num_layers
    mats = [normalize_columns(m) for _, m in sorted(raw_saliency(model, features, list(range(L))).items())]
    out = []
    for k, frames in enumerate(groups):
        values = np.stack([m[:, frames].mean(axis=1) for m in mats], axis=1)
        out.append(ReorderingMatrix(k, ids[k], frames, values))
    return out


# ---------------------------------------------------------------------------
# export

CELL = 8
LEFT_MARGIN = 40
TOP_MARGIN = 16


def write_csv(path, values: np.ndarray, header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in enumerate(values):
            w.writerow([t] + [repr(float(v)) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), -1)


def heatmap_svg(values: np.ndarray, annotations: Sequence[tuple[int, str]] = (),
                col_prefix: str = "L") -> str:
    """Grayscale heatmap, one 8px cell per entry; darker means larger."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError("cannot render a non-finite matrix")
    rows, cols = values.shape
    vmax = float(values.max()) if values.size and values.max() > 0 else 1.0
    left = LEFT_MARGIN if annotations else 8
    width, height = left + cols * CELL + 8, TOP_MARGIN + rows * CELL + 8
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>']
    for j in range(cols):
        x = left + j * CELL
        out.append(f'<text x="{x + CELL // 2}" y="{TOP_MARGIN - 4}" font-size="6" '
                   f'text-anchor="middle">{col_prefix}{j + 1}</text>')
    for t in range(rows):
        y = TOP_MARGIN + t * CELL
        for j in range(cols):
            level = int(round(255 * (1.0 - values[t, j] / vmax)))
            level = min(max(level, 0), 255)
            out.append(f'<rect x="{left + j * CELL}" y="{y}" width="{CELL}" height="{CELL}" '
                       f'fill="#{level:02x}{level:02x}{level:02x}"/>')
    for frame, label in annotations:
        y = TOP_MARGIN + frame * CELL + CELL - 1
        out.append(f'<text x="{left - 2}" y="{y}" font-size="7" text-anchor="end">{_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def export_heatmap(values: np.ndarray, path, annotations: Sequence[tuple[int, str]] = (),
                   header: Sequence[str] | None = None) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (exact values) and ``<path>.svg``. Returns both paths."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError("cannot export a non-finite matrix")
    base = Path(path)
    if header is None:
        header = ["frame"] + [f"layer_{j + 1}" for j in range(values.shape[1])]
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    write_csv(csv_path, values, header)
    svg_path.write_text(heatmap_svg(values, annotations))
    return csv_path, svg_path


def asr_annotations(model: CTCEncoder, features: np.ndarray, vocab) -> list[tuple[int, str]]:
    """(first frame, token) for each ASR-branch emission on its greedy path."""
    _, asr, _ = forward(model, features)
    if asr is None:
        return []
    _, path = greedy_decode(asr)
    return [(frames[0], vocab.tokens[path[frames[0]]]) for frames in token_frames(path)]
