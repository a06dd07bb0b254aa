"""Dependency-embedding injection: side transformer + per-step concatenation.

A pretrained dependency word-embedding table (word2vec text format) is
aligned to the WordPiece vocabulary, run through a single-block side
transformer, and the result T is concatenated feature-wise with the main
encoder's hidden states H at every position, giving C with dimension
hidden + dep_dim. Downstream heads over C are the ordinary classifier and
tagger heads instantiated at the wider input dimension.

Alignment policy: vocabulary tokens found in the embedding file keep their
file vectors exactly; tokens missing from the file (continuation pieces,
specials) are initialized truncated-normal; the [PAD] row is pinned to zero
and receives no gradient.
"""

from __future__ import annotations

import numpy as np

from .encoder import (EncoderOutput, EncoderState, block_parameter_shapes,
                      encoder_block, forward as encoder_forward, init_params,
                      mask_logit_bias, truncated_normal)
from .errors import ConfigError, DataError, ShapeError
from .objectives import ClassifierHead, TaggerHead, classify, tag
from .tensor import Tensor, concat, dropout, embedding_lookup, layer_norm


class DepEmbeddingTable:
    """Vocab-aligned dependency embeddings (vocab_size, dep_dim).

    ``from_file`` flags which rows came from the source embedding file.
    The [PAD] row is structurally zero: lookups multiply the table by a
    constant row mask, so the pad row neither contributes features nor
    receives gradient, whatever the optimizer does.
    """

    def __init__(self, matrix: np.ndarray, dep_dim: int,
                 from_file: np.ndarray, trainable: bool = True,
                 pad_id: int = 0):
        self.dep_dim = dep_dim
        self.pad_id = pad_id
        self.from_file = from_file
        self.trainable = trainable
        matrix = matrix.astype(np.float32, copy=True)
        matrix[pad_id] = 0.0
        self.dw = Tensor(matrix, requires_grad=trainable)
        self._row_mask = np.ones((matrix.shape[0], 1), dtype=np.float32)
        self._row_mask[pad_id] = 0.0

    @property
    def vocab_size(self):
        return self.dw.shape[0]

    @property
    def params(self):
        return {"dw": self.dw} if self.trainable else {}


def save_dep_embeddings(path, tokens, matrix):
    """word2vec text format: "V dim" header, then "token v1 ... vD" lines."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(tokens):
        raise ShapeError(f"matrix shape {matrix.shape} does not match "
                         f"{len(tokens)} tokens")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(tokens)} {matrix.shape[1]}\n")
        for token, row in zip(tokens, matrix):
            fh.write(token + " " + " ".join(f"{v:.6f}" for v in row) + "\n")


def read_dep_embedding_file(path):
    """Parse a word2vec text file into (token -> vector dict, dim)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: malformed word2vec header {header!r}")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise DataError(f"{path}: malformed word2vec header") from exc
        vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise DataError(
                    f"{path}:{lineno}: expected {dim} values, got "
                    f"{len(parts) - 1}")
            vectors[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
    if len(vectors) != count:
        raise DataError(f"{path}: header promises {count} vectors, file has "
                        f"{len(vectors)}")
    return vectors, dim


def load_dep_embeddings(path, vocab, dep_dim: int | None = None,
                        seed: int = 0, trainable: bool = True
                        ) -> DepEmbeddingTable:
    """Align a word2vec text file to the WordPiece vocabulary.

    Tokens present in the file keep their vectors; missing tokens get
    truncated-normal rows; [PAD] is pinned to zero.
    """
    vectors, dim = read_dep_embedding_file(path)
    if dep_dim is not None and dim != dep_dim:
        raise ConfigError(
            f"{path}: embedding dimension {dim} does not match configured "
            f"dep_dim {dep_dim}")
    rng = np.random.default_rng(seed)
    matrix = np.empty((len(vocab), dim), dtype=np.float32)
    from_file = np.zeros(len(vocab), dtype=bool)
    for i, token in enumerate(vocab.tokens):
        vec = vectors.get(token)
        if vec is not None:
            matrix[i] = vec
            from_file[i] = True
        else:
            matrix[i] = truncated_normal(rng, (dim,))
    return DepEmbeddingTable(matrix, dim, from_file, trainable=trainable,
                             pad_id=vocab.pad_id)


def dep_lookup(ids, table: DepEmbeddingTable) -> Tensor:
    """D = rows of the dependency table at the given ids (pad row zero)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        bad = ids.reshape(-1)[
            int(np.argmax((ids < 0) | (ids >= table.vocab_size)))]
        raise DataError(
            f"token id {bad} out of range for dependency table of "
            f"{table.vocab_size} rows")
    masked = table.dw * table._row_mask
    return embedding_lookup(masked, ids)


class SideTransformer:
    """One encoder block over dep_dim features with its own positions.

    Raw embedding rows have arbitrary scale, so inputs are layer-normalized
    before the block.
    """

    def __init__(self, dep_dim: int, max_len: int, num_heads: int = 4,
                 dropout: float = 0.1, seed: int = 0):
        if dep_dim % num_heads != 0:
            raise ConfigError(f"dep_dim {dep_dim} not divisible by "
                              f"num_heads {num_heads}")
        self.dep_dim = dep_dim
        self.max_len = max_len
        self.num_heads = num_heads
        self.dropout = dropout
        self.params = init_params(
            self.parameter_shapes(dep_dim, max_len), seed)

    @staticmethod
    def parameter_shapes(dep_dim, max_len):
        return ([("position", (max_len, dep_dim), "normal"),
                 ("input_norm.gamma", (dep_dim,), "ones"),
                 ("input_norm.beta", (dep_dim,), "zeros")]
                + block_parameter_shapes("block", dep_dim, 4 * dep_dim))


def side_transform(d: Tensor, st: SideTransformer, attention_mask,
                   *, train: bool = False, rng=None) -> Tensor:
    """T = side block over D; padded positions masked out of attention."""
    if d.shape[-1] != st.dep_dim:
        raise ShapeError(f"input feature dim {d.shape[-1]} does not match "
                         f"side transformer dep_dim {st.dep_dim}")
    n_batch, seq_len, _ = d.shape
    attention_mask = np.asarray(attention_mask)
    if attention_mask.shape != (n_batch, seq_len):
        raise ShapeError(
            f"attention mask shape {attention_mask.shape} does not match "
            f"input ({n_batch}, {seq_len})")
    if seq_len > st.max_len:
        raise DataError(f"sequence length {seq_len} exceeds side max_len "
                        f"{st.max_len}")
    p = st.params
    x = d + embedding_lookup(p["position"], np.arange(seq_len))
    x = layer_norm(x, p["input_norm.gamma"], p["input_norm.beta"])
    x = dropout(x, st.dropout, rng, train)
    return encoder_block(x, p, "block", st.num_heads, st.dropout,
                         mask_logit_bias(attention_mask), train, rng)


def inject(t: Tensor, h: Tensor) -> Tensor:
    """C = concat(T, H) per timestep: (batch, seq, dep_dim + hidden)."""
    if t.shape[:2] != h.shape[:2]:
        raise ShapeError(
            f"side output {t.shape} and hidden states {h.shape} disagree "
            f"on batch/sequence dimensions")
    return concat([t, h], axis=-1)


class InjectedModel:
    """Main encoder + dependency branch, producing concatenated states C.

    forward() mirrors the encoder contract but returns h with feature
    dimension hidden + dep_dim.
    """

    def __init__(self, encoder_state: EncoderState, table: DepEmbeddingTable,
                 side: SideTransformer):
        if table.vocab_size != encoder_state.config.vocab_size:
            raise ConfigError(
                f"dependency table rows {table.vocab_size} do not match "
                f"vocab_size {encoder_state.config.vocab_size}")
        self.encoder = encoder_state
        self.table = table
        self.side = side

    @property
    def out_dim(self):
        return self.side.dep_dim + self.encoder.config.hidden_size

    def forward(self, batch, *, train: bool = False, rng=None
                ) -> EncoderOutput:
        enc = encoder_forward(batch, self.encoder, train=train, rng=rng)
        d = dep_lookup(batch.ids, self.table)
        t = side_transform(d, self.side, batch.attention_mask,
                           train=train, rng=rng)
        return EncoderOutput(h=inject(t, enc.h),
                             attention_mask=batch.attention_mask)

    def modules(self):
        """Parameter containers, for counting and optimizer assembly."""
        return [self.encoder, self.table, self.side]


def dep_classify(c_cls: Tensor, head: ClassifierHead, labels=None):
    """classify() over concatenated [CLS] features; checks the wide dim."""
    if c_cls.shape[-1] != head.input_dim:
        raise ShapeError(f"feature dim {c_cls.shape[-1]} does not match "
                         f"head input_dim {head.input_dim}")
    return classify(c_cls, head, labels)


def dep_tag(output, head: TaggerHead, tag_ids):
    """tag() over concatenated per-token features; checks the wide dim."""
    if output.h.shape[-1] != head.input_dim:
        raise ShapeError(f"feature dim {output.h.shape[-1]} does not match "
                         f"head input_dim {head.input_dim}")
    return tag(output, head, tag_ids)
