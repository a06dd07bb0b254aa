"""Training heads and losses: NSP, MLM, distillation, and task heads.

Every head is a small named-parameter container compatible with
``count_parameters`` and the optimizer. Losses are built on the autodiff
graph and return ``(loss Tensor, probabilities ndarray)`` so callers get
both the training signal and detached predictions in one pass.

Heads take an ``input_dim`` so the same classes serve both plain hidden
states and dependency-concatenated states.
"""

from __future__ import annotations

import numpy as np

from .encoder import cls_rows, init_params, linear
from .errors import DataError
from .tensor import (Tensor, concat, embedding_lookup, gelu, layer_norm,
                     log_softmax, nll_mean, reshape, tensor_mean, tensor_sum,
                     transpose)

IGNORE_TAG = -1  # tag value marking positions excluded from loss and metrics

D_INTENT = 32  # width of the intent feature network


def _build(specs, seed, zero_init):
    if zero_init:
        specs = [(n, s, "zeros" if kind == "normal" else kind)
                 for n, s, kind in specs]
    return init_params(specs, seed)


class NSPHead:
    """Binary is-next / not-next classifier over the [CLS] vector."""

    def __init__(self, input_dim: int, seed: int = 0, zero_init: bool = False):
        self.input_dim = input_dim
        self.params = _build(self.parameter_shapes(input_dim), seed, zero_init)

    @staticmethod
    def parameter_shapes(input_dim):
        return [("weight", (input_dim, 2), "normal"),
                ("bias", (2,), "zeros")]


class MLMHead:
    """Masked-token predictor: transform + norm, decoder tied to embeddings.

    The output projection reuses the token embedding table (transposed), so
    the head itself owns only the transform and the per-vocab-entry bias.
    """

    def __init__(self, token_table: Tensor, input_dim: int | None = None,
                 seed: int = 0, zero_init: bool = False):
        vocab_size, hidden = token_table.shape
        self.input_dim = input_dim if input_dim is not None else hidden
        self.vocab_size = vocab_size
        self.decoder = token_table
        self.params = _build(
            self.parameter_shapes(self.input_dim, hidden, vocab_size),
            seed, zero_init)

    @staticmethod
    def parameter_shapes(input_dim, hidden, vocab_size):
        return [("transform.weight", (input_dim, hidden), "normal"),
                ("transform.bias", (hidden,), "zeros"),
                ("norm.gamma", (hidden,), "ones"),
                ("norm.beta", (hidden,), "zeros"),
                ("bias", (vocab_size,), "zeros")]


class ClassifierHead:
    """Softmax classifier over a pooled vector; num_classes >= 2."""

    def __init__(self, input_dim: int, num_classes: int,
                 labels: list[str] | None = None, seed: int = 0,
                 zero_init: bool = False):
        if num_classes < 2:
            raise DataError(f"need at least 2 classes, got {num_classes}")
        if labels is not None and len(labels) != num_classes:
            raise DataError(f"{len(labels)} label names for {num_classes} "
                            f"classes")
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.labels = labels
        self.params = _build(self.parameter_shapes(input_dim, num_classes),
                             seed, zero_init)

    @staticmethod
    def parameter_shapes(input_dim, num_classes):
        return [("weight", (input_dim, num_classes), "normal"),
                ("bias", (num_classes,), "zeros")]


class TaggerHead:
    """Per-token softmax tagger (BIO entities, keep/drop compression)."""

    def __init__(self, input_dim: int, num_tags: int,
                 tags: list[str] | None = None, seed: int = 0,
                 zero_init: bool = False):
        if num_tags < 2:
            raise DataError(f"need at least 2 tags, got {num_tags}")
        if tags is not None and len(tags) != num_tags:
            raise DataError(f"{len(tags)} tag names for {num_tags} tags")
        self.input_dim = input_dim
        self.num_tags = num_tags
        self.tags = tags
        self.params = _build(self.parameter_shapes(input_dim, num_tags),
                             seed, zero_init)

    @staticmethod
    def parameter_shapes(input_dim, num_tags):
        return [("weight", (input_dim, num_tags), "normal"),
                ("bias", (num_tags,), "zeros")]


class ProactiveHead:
    """Next-intent classifier over [CLS] features joined with an intent code.

    The current intent (one-hot) passes through a two-layer GELU network
    into a d_I-dimensional code I; the classifier reads concat(h_CLS, I).
    """

    def __init__(self, hidden: int, num_intents: int, num_next_intents: int,
                 d_intent: int = D_INTENT, seed: int = 0,
                 zero_init: bool = False):
        self.hidden = hidden
        self.num_intents = num_intents
        self.num_next_intents = num_next_intents
        self.d_intent = d_intent
        self.params = _build(
            self.parameter_shapes(hidden, num_intents, num_next_intents,
                                  d_intent),
            seed, zero_init)

    @staticmethod
    def parameter_shapes(hidden, num_intents, num_next_intents,
                         d_intent=D_INTENT):
        return [("nn.w1", (num_intents, d_intent), "normal"),
                ("nn.b1", (d_intent,), "zeros"),
                ("nn.w2", (d_intent, d_intent), "normal"),
                ("nn.b2", (d_intent,), "zeros"),
                ("weight", (hidden + d_intent, num_next_intents), "normal"),
                ("bias", (num_next_intents,), "zeros")]


# ------------------------------------------------------------------ losses


def nsp_loss(h_cls: Tensor, head: NSPHead, labels):
    """Mean cross-entropy of the is-next classifier; labels in {0, 1}."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and not np.isin(labels, (0, 1)).all():
        bad = labels[~np.isin(labels, (0, 1))][0]
        raise DataError(f"NSP label must be 0 or 1, got {bad}")
    log_probs = log_softmax(
        linear(h_cls, head.params["weight"], head.params["bias"]))
    loss = nll_mean(log_probs, labels)
    return loss, np.exp(log_probs.data)


def _mlm_logits(rows: Tensor, head: MLMHead):
    p = head.params
    t = gelu(linear(rows, p["transform.weight"], p["transform.bias"]))
    t = layer_norm(t, p["norm.gamma"], p["norm.beta"])
    return linear(t, transpose(head.decoder, (1, 0)), p["bias"])


def mlm_loss(output, head: MLMHead, masked_positions, mlm_labels):
    """Mean masked-token cross-entropy over all masked slots in the batch.

    masked_positions/mlm_labels are per-example lists; an example with no
    masked slots simply contributes nothing. Returns the loss and the
    predicted distributions at the masked slots (n_masked, vocab).
    """
    n_batch, seq_len, _ = output.h.shape
    flat_rows, labels = [], []
    for b, (positions, labs) in enumerate(zip(masked_positions, mlm_labels)):
        if len(positions) != len(labs):
            raise DataError(
                f"example {b}: {len(positions)} masked positions vs "
                f"{len(labs)} labels")
        for pos, lab in zip(positions, labs):
            if not 0 <= pos < seq_len:
                raise DataError(
                    f"masked position {pos} outside sequence of length "
                    f"{seq_len}")
            if output.attention_mask[b, pos] == 0:
                raise DataError(
                    f"masked position {pos} in example {b} is padding")
            if not 0 <= lab < head.vocab_size:
                raise DataError(f"MLM label {lab} outside vocabulary of "
                                f"{head.vocab_size}")
            flat_rows.append(b * seq_len + pos)
            labels.append(lab)
    if not flat_rows:
        return (Tensor(np.asarray(0.0, dtype=np.float32)),
                np.zeros((0, head.vocab_size)))
    flat = reshape(output.h, (n_batch * seq_len, output.h.shape[-1]))
    rows = embedding_lookup(flat, np.asarray(flat_rows))
    log_probs = log_softmax(_mlm_logits(rows, head))
    loss = nll_mean(log_probs, np.asarray(labels))
    return loss, np.exp(log_probs.data)


def distill_loss(student_logits: Tensor, teacher_probs,
                 temperature: float = 1.0) -> Tensor:
    """Soft-target cross-entropy -mean_rows sum_k t_k log softmax(s/T)_k.

    The teacher rows must already be probability vectors; at temperature 1
    the minimum over students is the teacher entropy, attained at s = t.
    """
    t = np.asarray(teacher_probs, dtype=np.float64)
    if t.ndim != 2 or t.shape != student_logits.shape:
        raise DataError(
            f"teacher shape {t.shape} does not match student "
            f"{student_logits.shape}")
    if (t < 0).any():
        raise DataError("teacher probabilities contain negative entries")
    sums = t.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-5:
        worst = float(np.abs(sums - 1.0).max())
        raise DataError(
            f"teacher rows are not normalized (max |sum-1| = {worst:.3g})")
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    log_s = log_softmax(student_logits * (1.0 / temperature))
    per_row = tensor_sum(log_s * t.astype(log_s.dtype), axis=-1)
    return -tensor_mean(per_row)


def classify(h_cls: Tensor, head: ClassifierHead, labels=None):
    """Class distribution over pooled features; optional mean cross-entropy."""
    log_probs = log_softmax(
        linear(h_cls, head.params["weight"], head.params["bias"]))
    probs = np.exp(log_probs.data)
    if labels is None:
        return None, probs
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        bad = labels[(labels < 0) | (labels >= head.num_classes)][0]
        raise DataError(
            f"class label {bad} outside [0, {head.num_classes})")
    return nll_mean(log_probs, labels), probs


def tag(output, head: TaggerHead, tag_ids):
    """Per-token tagging loss over positions whose tag is not IGNORE_TAG.

    tag_ids has shape (batch, seq_len); IGNORE_TAG marks [CLS]/[SEP]/padding
    and any other position excluded from the loss. Returns the loss and the
    distributions at included positions (n_included, num_tags).
    """
    n_batch, seq_len, hidden = output.h.shape
    tag_ids = np.asarray(tag_ids, dtype=np.int64)
    if tag_ids.shape != (n_batch, seq_len):
        raise DataError(
            f"tag array shape {tag_ids.shape} does not match batch "
            f"({n_batch}, {seq_len})")
    included = tag_ids != IGNORE_TAG
    if (tag_ids[included] < 0).any() or \
            (included.any() and tag_ids[included].max() >= head.num_tags):
        raise DataError(f"tag id outside [0, {head.num_tags})")
    if (included & (output.attention_mask == 0)).any():
        b, pos = np.argwhere(included & (output.attention_mask == 0))[0]
        raise DataError(f"tagged position {pos} in example {b} is padding")
    if not included.any():
        return (Tensor(np.asarray(0.0, dtype=np.float32)),
                np.zeros((0, head.num_tags)))
    flat_idx = np.flatnonzero(included.reshape(-1))
    flat = reshape(output.h, (n_batch * seq_len, hidden))
    rows = embedding_lookup(flat, flat_idx)
    log_probs = log_softmax(
        linear(rows, head.params["weight"], head.params["bias"]))
    loss = nll_mean(log_probs, tag_ids.reshape(-1)[flat_idx])
    return loss, np.exp(log_probs.data)


def tag_predict(output, head: TaggerHead) -> np.ndarray:
    """Argmax tag per position, IGNORE_TAG at padding. No graph involved."""
    logits = output.h.data @ head.params["weight"].data \
        + head.params["bias"].data
    pred = logits.argmax(axis=-1)
    return np.where(output.attention_mask == 1, pred, IGNORE_TAG)


def intent_features(intent_onehot, head: ProactiveHead) -> Tensor:
    """I = NN(X_I): two affine layers with GELU between."""
    x = np.asarray(intent_onehot, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != head.num_intents:
        raise DataError(
            f"intent input shape {x.shape} does not match "
            f"(batch, {head.num_intents})")
    if not np.isin(x, (0.0, 1.0)).all() or not (x.sum(axis=1) == 1.0).all():
        raise DataError("intent input rows must be one-hot")
    p = head.params
    hidden = gelu(linear(Tensor(x), p["nn.w1"], p["nn.b1"]))
    return linear(hidden, p["nn.w2"], p["nn.b2"])


def proactive_forward(h_cls: Tensor, intent_onehot, head: ProactiveHead,
                      labels=None):
    """Next-intent distribution from concat(h_CLS, NN(current intent))."""
    features = concat([h_cls, intent_features(intent_onehot, head)], axis=-1)
    log_probs = log_softmax(
        linear(features, head.params["weight"], head.params["bias"]))
    probs = np.exp(log_probs.data)
    if labels is None:
        return None, probs
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0
                        or labels.max() >= head.num_next_intents):
        raise DataError(
            f"next-intent label outside [0, {head.num_next_intents})")
    return nll_mean(log_probs, labels), probs


def joint_pretrain_loss(output, nsp_head: NSPHead, mlm_head: MLMHead,
                        masked_positions, mlm_labels, nsp_labels,
                        nsp_weight: float = 1.0, mlm_weight: float = 1.0):
    """L_NSP + L_MLM (1:1 by default). Returns (total, components dict)."""
    loss_nsp, _ = nsp_loss(cls_rows(output), nsp_head, nsp_labels)
    loss_mlm, _ = mlm_loss(output, mlm_head, masked_positions, mlm_labels)
    total = loss_nsp * nsp_weight + loss_mlm * mlm_weight
    return total, {"nsp": loss_nsp, "mlm": loss_mlm}


# --------------------------------------------------------- label-set files


def save_label_set(path, labels):
    """One label per line; id = line number."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(labels) + "\n")


def load_label_set(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if len(set(lines)) != len(lines):
        raise DataError(f"{path}: duplicate labels")
    return lines
