"""Embedding-drift analysis: PCA projection of contextual token vectors
from two models over one sentence, pairwise distances, and figure emission.

Distances are measured in the full hidden space; the 2-D PCA coordinates
exist for display. Both are reported, clearly labeled, because they answer
different questions (the projection can fold far-apart points together).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import make_batch
from .errors import DataError
from .tokenizer import encode_pair, pre_split, wordpiece_tokenize

PALETTE = ("#d62728", "#1f77b4")  # model A red, model B blue


# ----------------------------------------------------------------------- PCA


@dataclass
class PCAResult:
    coordinates: np.ndarray  # (n, k)
    components: np.ndarray  # (k, d), orthonormal rows
    eigenvalues: np.ndarray  # (k,) covariance eigenvalues, descending
    ratios: np.ndarray  # (k,) fraction of total variance explained
    mean: np.ndarray  # (d,)


def _fix_signs(components: np.ndarray, coordinates: np.ndarray):
    """Deterministic orientation: first non-negligible coordinate positive."""
    for i, row in enumerate(components):
        scale = np.abs(row).max()
        if scale == 0.0:
            continue
        nonzero = np.nonzero(np.abs(row) > 1e-12 * scale)[0]
        if nonzero.size and row[nonzero[0]] < 0:
            components[i] = -row
            coordinates[:, i] = -coordinates[:, i]
    return components, coordinates


def pca_project(vectors, k: int = 2) -> PCAResult:
    """Top-k principal components of the rows of `vectors`.

    Mean-centers, then takes the SVD; eigenvalues follow the sample
    covariance convention (divide by n-1). Rank-k data is reconstructed
    exactly by coordinates @ components + mean.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected a 2-D matrix of vectors, got {x.ndim}-D")
    n, d = x.shape
    if n < k:
        raise DataError(f"need at least {k} vectors to fit {k} components, "
                        f"got {n}")
    if d < k:
        raise DataError(f"need at least {k} feature dimensions, got {d}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].copy()
    coordinates = centered @ components.T
    components, coordinates = _fix_signs(components, coordinates)
    if n > 1:
        eigenvalues = singular[:k] ** 2 / (n - 1)
        total = float((singular ** 2).sum()) / (n - 1)
    else:
        eigenvalues = np.zeros(k)
        total = 0.0
    ratios = eigenvalues / total if total > 0 else np.zeros(k)
    return PCAResult(coordinates, components, eigenvalues, ratios, mean)


# ---------------------------------------------------------- token vectors


def euclidean_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DataError(f"vector shapes {u.shape} and {v.shape} differ")
    return float(np.linalg.norm(u - v))


def contextual_vectors(model, sentence: str, vocab, max_len: int | None = None):
    """(words, vectors): one full-hidden-space vector per surface word.

    A word split into several pieces is represented by the mean of its
    piece vectors. [CLS]/[SEP] are excluded. max_len defaults to the
    model's configured maximum.
    """
    from .trainkit import model_config, run_model  # trainkit imports datapipe
    if max_len is None:
        max_len = model_config(model).max_len
    words = pre_split(sentence)
    if not words:
        raise DataError("sentence has no tokens")
    piece_counts = []
    for word in words:
        pieces = wordpiece_tokenize(word, vocab)
        piece_counts.append(len(pieces))
    needed = sum(piece_counts) + 2  # [CLS] and [SEP]
    if needed > max_len:
        raise DataError(f"sentence needs {needed} slots, max_len is "
                        f"{max_len}")
    pair = encode_pair(sentence, None, vocab, max_len=max_len)
    out = run_model(model, make_batch([pair]), train=False)
    h = out.h.data[0].astype(np.float64)
    vectors = []
    offset = 1  # skip [CLS]
    for count in piece_counts:
        vectors.append(h[offset:offset + count].mean(axis=0))
        offset += count
    return words, np.asarray(vectors)


def token_distance(model, sentence: str, vocab, token_i: str, token_j: str,
                   max_len: int | None = None) -> float:
    """Euclidean distance between two words' contextual representations."""
    words, vectors = contextual_vectors(model, sentence, vocab,
                                        max_len=max_len)
    index = {}
    for pos, word in enumerate(words):
        index.setdefault(word, pos)
    try:
        i = index[token_i.lower()]
        j = index[token_j.lower()]
    except KeyError as exc:
        raise DataError(f"token {exc.args[0]!r} not present in "
                        f"{sentence!r} after tokenization") from None
    return euclidean_distance(vectors[i], vectors[j])


def _distance_table(vectors: np.ndarray) -> np.ndarray:
    diff = vectors[:, None, :] - vectors[None, :, :]
    table = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(table, 0.0)
    return table


# ----------------------------------------------------------------- report


@dataclass
class ProjectionReport:
    """Joint 2-D projection of one sentence under two models.

    Coordinates share a single PCA frame fit on the union of both models'
    vectors. Distance tables are measured in each model's full hidden
    space, not in the projection.
    """

    sentence: str
    tokens: list[str]
    model_names: tuple[str, str]
    coords_a: np.ndarray  # (n, 2)
    coords_b: np.ndarray  # (n, 2)
    distances_a: np.ndarray  # (n, n) full-space
    distances_b: np.ndarray
    ratios: np.ndarray  # (2,) explained-variance ratios of the joint fit
    hidden_dims: tuple[int, int]


def project_sentence(model_a, model_b, sentence: str, vocab,
                     model_names: tuple[str, str] = ("model_a", "model_b"),
                     max_len: int | None = None) -> ProjectionReport:
    words_a, vectors_a = contextual_vectors(model_a, sentence, vocab,
                                            max_len=max_len)
    words_b, vectors_b = contextual_vectors(model_b, sentence, vocab,
                                            max_len=max_len)
    assert words_a == words_b  # same tokenizer, same sentence
    dim_a, dim_b = vectors_a.shape[1], vectors_b.shape[1]
    if dim_a != dim_b:
        # one joint frame needs one feature space; pad the narrower model
        width = max(dim_a, dim_b)
        vectors_a = np.pad(vectors_a, ((0, 0), (0, width - dim_a)))
        vectors_b = np.pad(vectors_b, ((0, 0), (0, width - dim_b)))
    fit = pca_project(np.vstack([vectors_a, vectors_b]), k=2)
    n = len(words_a)
    return ProjectionReport(
        sentence=sentence,
        tokens=words_a,
        model_names=tuple(model_names),
        coords_a=fit.coordinates[:n],
        coords_b=fit.coordinates[n:],
        distances_a=_distance_table(vectors_a[:, :dim_a]),
        distances_b=_distance_table(vectors_b[:, :dim_b]),
        ratios=fit.ratios,
        hidden_dims=(dim_a, dim_b),
    )


# ----------------------------------------------------------------- figures

_W, _H = 640, 480
_MARGIN = 56


def _scale(points: np.ndarray):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pad = 0.06 * span
    lo, hi = lo - pad, hi + pad
    span = hi - lo

    def to_px(p):
        x = _MARGIN + (p[0] - lo[0]) / span[0] * (_W - 2 * _MARGIN)
        y = _H - _MARGIN - (p[1] - lo[1]) / span[1] * (_H - 2 * _MARGIN)
        return x, y

    return to_px


def emit_figure(report: ProjectionReport, path):
    """Write an SVG scatter of both projections plus a CSV sidecar.

    Returns (svg_path, csv_path). Output is a pure function of the report:
    identical reports give byte-identical files.
    """
    path = str(path)
    svg_path = path if path.endswith(".svg") else path + ".svg"
    csv_path = svg_path[:-4] + ".csv"

    both = np.vstack([report.coords_a, report.coords_b])
    to_px = _scale(both)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_MARGIN}" y="24" font-size="14" '
        f'font-family="sans-serif">{_esc(report.sentence)}</text>',
        f'<text x="{_MARGIN}" y="42" font-size="11" fill="#555" '
        f'font-family="sans-serif">joint PCA view; variance explained '
        f'{report.ratios[0]:.3f} / {report.ratios[1]:.3f} '
        f'(distances reported separately in full hidden space)</text>',
        f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{_W - 2 * _MARGIN}" '
        f'height="{_H - 2 * _MARGIN}" fill="none" stroke="#999"/>',
    ]
    for name, color, coords in ((report.model_names[0], PALETTE[0],
                                 report.coords_a),
                                (report.model_names[1], PALETTE[1],
                                 report.coords_b)):
        for token, p in zip(report.tokens, coords):
            x, y = to_px(p)
            lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" '
                         f'fill="{color}"/>')
            lines.append(f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" '
                         f'font-size="10" fill="{color}" '
                         f'font-family="sans-serif">{_esc(token)}</text>')
    legend_y = _H - 18
    lines.append(f'<circle cx="{_MARGIN}" cy="{legend_y - 4}" r="4" '
                 f'fill="{PALETTE[0]}"/>')
    lines.append(f'<text x="{_MARGIN + 8}" y="{legend_y}" font-size="11" '
                 f'font-family="sans-serif">{_esc(report.model_names[0])}'
                 f'</text>')
    lines.append(f'<circle cx="{_W // 2}" cy="{legend_y - 4}" r="4" '
                 f'fill="{PALETTE[1]}"/>')
    lines.append(f'<text x="{_W // 2 + 8}" y="{legend_y}" font-size="11" '
                 f'font-family="sans-serif">{_esc(report.model_names[1])}'
                 f'</text>')
    lines.append("</svg>")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("token,model,x,y,dim_hidden\n")
        for name, coords, dim in ((report.model_names[0], report.coords_a,
                                   report.hidden_dims[0]),
                                  (report.model_names[1], report.coords_b,
                                   report.hidden_dims[1])):
            for token, p in zip(report.tokens, coords):
                x, y = float(p[0]), float(p[1])
                fh.write(f"{token},{name},{x!r},{y!r},{dim}\n")
    return svg_path, csv_path


def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))
