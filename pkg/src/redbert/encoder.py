"""Transformer encoder: embeddings plus stacked self-attention blocks.

The architecture is the classic post-layer-norm encoder. Token, position,
and segment embeddings are summed, normalized, and passed through
``num_layers`` identical blocks of multi-head self-attention and a GELU
feed-forward network, each wrapped in residual + layer norm. Padding is
handled by adding a large negative constant to attention logits at padded
key positions, so padded tokens can never influence real ones.

Parameters live in a flat name -> Tensor mapping, which keeps optimizer
bookkeeping, checkpointing, and parameter counting trivial.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import (Tensor, dropout, embedding_lookup, gelu, layer_norm,
                     matmul, reshape, softmax, swapaxes, transpose)

# Finite stand-in for -inf on masked attention logits. exp() underflows to
# exactly zero after max-subtraction, and rows that are all padding still
# produce finite softmax output instead of NaN.
MASK_LOGIT = -1e9

INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Hyperparameters fixing every tensor shape in the encoder."""

    vocab_size: int
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ff_size: int | None = None
    max_len: int = 128
    dropout: float = 0.1
    dep_dim: int = 300
    use_segment_embeddings: bool = True

    def __post_init__(self):
        if self.ff_size is None:
            self.ff_size = 4 * self.hidden_size
        for name in ("vocab_size", "hidden_size", "num_heads", "ff_size",
                     "max_len", "dep_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got "
                                  f"{getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


class EncoderState:
    """A ModelConfig plus the flat named-parameter table it implies."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


@dataclass
class Batch:
    """Integer id/segment/mask arrays of shape (batch, seq_len)."""

    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray


def make_batch(pairs) -> Batch:
    """Stack TokenizedPairs (all the same length) into one Batch."""
    if not pairs:
        raise DataError("cannot batch zero pairs")
    lengths = {len(p.ids) for p in pairs}
    if len(lengths) != 1:
        raise ShapeError(f"pairs have mixed lengths {sorted(lengths)}")
    return Batch(
        ids=np.array([p.ids for p in pairs], dtype=np.int64),
        segment_ids=np.array([p.segment_ids for p in pairs], dtype=np.int64),
        attention_mask=np.array([p.attention_mask for p in pairs],
                                dtype=np.int64),
    )


@dataclass
class EncoderOutput:
    """Hidden states (batch, seq_len, hidden) plus the mask that shaped them."""

    h: Tensor
    attention_mask: np.ndarray


def truncated_normal(rng, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std resampled until none remain."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return out.astype(np.float32)


def block_parameter_shapes(prefix: str, hidden: int,
                           ff: int) -> list[tuple[str, tuple, str]]:
    """Shape triples for one attention + feed-forward block."""
    specs: list[tuple[str, tuple, str]] = []
    for part in ("q", "k", "v", "out"):
        specs.append((f"{prefix}.attention.{part}.weight", (hidden, hidden),
                      "normal"))
        specs.append((f"{prefix}.attention.{part}.bias", (hidden,), "zeros"))
    specs.append((f"{prefix}.attention.norm.gamma", (hidden,), "ones"))
    specs.append((f"{prefix}.attention.norm.beta", (hidden,), "zeros"))
    specs.append((f"{prefix}.ff.w1.weight", (hidden, ff), "normal"))
    specs.append((f"{prefix}.ff.w1.bias", (ff,), "zeros"))
    specs.append((f"{prefix}.ff.w2.weight", (ff, hidden), "normal"))
    specs.append((f"{prefix}.ff.w2.bias", (hidden,), "zeros"))
    specs.append((f"{prefix}.ff.norm.gamma", (hidden,), "ones"))
    specs.append((f"{prefix}.ff.norm.beta", (hidden,), "zeros"))
    return specs


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) triples for every encoder parameter, in creation
    order. init is one of "normal", "zeros", "ones"."""
    h = config.hidden_size
    specs: list[tuple[str, tuple, str]] = [
        ("embeddings.token", (config.vocab_size, h), "normal"),
        ("embeddings.position", (config.max_len, h), "normal"),
    ]
    if config.use_segment_embeddings:
        specs.append(("embeddings.segment", (2, h), "normal"))
    specs.append(("embeddings.norm.gamma", (h,), "ones"))
    specs.append(("embeddings.norm.beta", (h,), "zeros"))
    for i in range(config.num_layers):
        specs.extend(block_parameter_shapes(f"layer{i}", h, config.ff_size))
    return specs


def init_params(specs, seed: int) -> dict[str, Tensor]:
    """Materialize (name, shape, init) triples deterministically under seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in specs:
        if kind == "normal":
            arr = truncated_normal(rng, shape)
        elif kind == "ones":
            arr = np.ones(shape, dtype=np.float32)
        else:
            arr = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def init_random(config: ModelConfig, seed: int) -> EncoderState:
    """Fresh EncoderState: truncated-normal weights, zero biases, unit norms."""
    return EncoderState(config, init_params(parameter_shapes(config), seed))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def forward(batch: Batch, state: EncoderState, *, train: bool = False,
            rng=None) -> EncoderOutput:
    """Run the encoder over a batch; dropout fires only when train=True."""
    cfg = state.config
    p = state.params
    ids = batch.ids
    if ids.ndim != 2:
        raise ShapeError(f"batch ids must be 2-D, got shape {ids.shape}")
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        b, t = np.argwhere(bad)[0]
        raise DataError(
            f"token id {ids[b, t]} out of range [0, {cfg.vocab_size}) at "
            f"batch {b} position {t}")
    n_batch, seq_len = ids.shape
    if seq_len > cfg.max_len:
        raise DataError(
            f"sequence length {seq_len} exceeds max_len {cfg.max_len}")
    if train and cfg.dropout > 0.0 and rng is None:
        raise ContractError("train-mode forward with dropout needs an rng")

    x = embedding_lookup(p["embeddings.token"], ids)
    x = x + embedding_lookup(p["embeddings.position"], np.arange(seq_len))
    if cfg.use_segment_embeddings:
        x = x + embedding_lookup(p["embeddings.segment"], batch.segment_ids)
    x = layer_norm(x, p["embeddings.norm.gamma"], p["embeddings.norm.beta"])
    x = dropout(x, cfg.dropout, rng, train)

    logit_bias = mask_logit_bias(batch.attention_mask)
    for i in range(cfg.num_layers):
        x = encoder_block(x, p, f"layer{i}", cfg.num_heads, cfg.dropout,
                          logit_bias, train, rng)
    return EncoderOutput(h=x, attention_mask=batch.attention_mask)


def mask_logit_bias(attention_mask) -> np.ndarray:
    """Additive (batch, 1, 1, seq) attention-logit bias hiding padded keys."""
    mask = attention_mask.astype(np.float32)
    return ((1.0 - mask) * MASK_LOGIT)[:, None, None, :]


def encoder_block(x, p, prefix, num_heads, dropout_p, logit_bias, train, rng):
    """One post-norm block: self-attention, then feed-forward, each with
    residual + layer norm. Reused by the dependency side transformer."""
    attn = _attention(x, p, prefix + ".attention", num_heads, dropout_p,
                      logit_bias, train, rng)
    x = layer_norm(x + attn, p[prefix + ".attention.norm.gamma"],
                   p[prefix + ".attention.norm.beta"])
    ff = linear(x, p[prefix + ".ff.w1.weight"], p[prefix + ".ff.w1.bias"])
    ff = gelu(ff)
    ff = linear(ff, p[prefix + ".ff.w2.weight"], p[prefix + ".ff.w2.bias"])
    ff = dropout(ff, dropout_p, rng, train)
    return layer_norm(x + ff, p[prefix + ".ff.norm.gamma"],
                      p[prefix + ".ff.norm.beta"])


def _attention(x, p, prefix, num_heads, dropout_p, logit_bias, train, rng):
    n_batch, seq_len, hidden = x.shape
    heads = num_heads
    depth = hidden // heads

    def split(t):
        return transpose(reshape(t, (n_batch, seq_len, heads, depth)),
                         (0, 2, 1, 3))

    q = split(linear(x, p[prefix + ".q.weight"], p[prefix + ".q.bias"]))
    k = split(linear(x, p[prefix + ".k.weight"], p[prefix + ".k.bias"]))
    v = split(linear(x, p[prefix + ".v.weight"], p[prefix + ".v.bias"]))
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(depth))
    probs = softmax(scores + logit_bias, axis=-1)
    probs = dropout(probs, dropout_p, rng, train)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)),
                  (n_batch, seq_len, hidden))
    out = linear(ctx, p[prefix + ".out.weight"], p[prefix + ".out.bias"])
    return dropout(out, dropout_p, rng, train)


def cls_rows(output: EncoderOutput) -> Tensor:
    """The [CLS] (position 0) hidden vectors, shape (batch, hidden)."""
    n_batch, seq_len, hidden = output.h.shape
    flat = reshape(output.h, (n_batch * seq_len, hidden))
    return embedding_lookup(flat, np.arange(n_batch) * seq_len)


def count_parameters(*modules) -> int:
    """Total element count over the named parameters of the given modules.

    Tensors shared between modules (tied weights) are counted once.
    """
    seen: dict[int, int] = {}
    for module in modules:
        params = module.params if hasattr(module, "params") else module
        for t in params.values():
            seen[id(t)] = t.size
    return int(sum(seen.values()))


# ------------------------------------------------------------- checkpoints
#
# Layout: 8-byte magic, little-endian u32 header length, canonical-JSON
# header {"format_version", "config", "extra", "tensors": [{name, dtype,
# shape}...]} with tensors sorted by name, then each tensor's raw bytes in
# that order. Canonical JSON plus sorted names makes save(load(save(x)))
# bit-identical.

CHECKPOINT_MAGIC = b"RBCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor],
                    extra: dict | None = None):
    names = sorted(params)
    manifest = [{"name": n, "dtype": str(params[n].data.dtype),
                 "shape": list(params[n].data.shape)} for n in names]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "extra": extra or {},
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data).tobytes())


def load_checkpoint(path):
    """Read a checkpoint: (ModelConfig, params dict, extra dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + header_len])
    except ValueError as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version "
                        f"{header.get('format_version')}")
    config = ModelConfig(**header["config"])
    params: dict[str, Tensor] = {}
    offset = 12 + header_len
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
        offset += nbytes
    return config, params, header["extra"]


def save_encoder(state: EncoderState, path, extra: dict | None = None):
    save_checkpoint(path, state.config, state.params, extra)


def load_encoder(path) -> EncoderState:
    config, params, _ = load_checkpoint(path)
    return EncoderState(config, params)
