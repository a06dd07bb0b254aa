"""WordPiece tokenization and sequence-pair packing.

Vocabulary files follow the BERT convention: UTF-8, one token per line,
id = zero-based line number, continuation pieces prefixed with ``##``.
Packing produces fixed-length id/segment/mask triples with ``[CLS]`` at
position 0 and ``[SEP]`` closing each segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

MAX_WORD_CHARS = 200  # longer words map straight to [UNK]


@dataclass
class Vocab:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {}
        for i, tok in enumerate(self.tokens):
            if not tok:
                raise ConfigError(f"empty token at line {i}")
            if tok in self.token_to_id:
                raise ConfigError(f"duplicate token {tok!r} at line {i}")
            self.token_to_id[tok] = i
        missing = [t for t in SPECIAL_TOKENS if t not in self.token_to_id]
        if missing:
            raise ConfigError(f"vocab missing special tokens: {missing}")
        if self.token_to_id[PAD] != 0:
            raise ConfigError(
                f"{PAD} must have id 0, found id {self.token_to_id[PAD]}")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id[token]

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return self.token_to_id[UNK]

    @property
    def cls_id(self):
        return self.token_to_id[CLS]

    @property
    def sep_id(self):
        return self.token_to_id[SEP]

    @property
    def mask_id(self):
        return self.token_to_id[MASK]

    @property
    def special_ids(self):
        return frozenset(self.token_to_id[t] for t in SPECIAL_TOKENS)


def load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    return Vocab(lines)


def save_vocab(path, tokens):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(tokens) + "\n")


def pre_split(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation becomes its own word."""
    words = []
    current = []
    for ch in text.lower():
        if ch.isspace():
            if current:
                words.append("".join(current))
                current = []
        elif not ch.isalnum():
            if current:
                words.append("".join(current))
                current = []
            words.append(ch)
        else:
            current.append(ch)
    if current:
        words.append("".join(current))
    return words


def wordpiece_tokenize(text: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first decomposition into vocabulary pieces.

    A word with any unmatchable remainder maps to a single [UNK].
    """
    if len(vocab) == 0:
        raise ConfigError("empty vocabulary")
    pieces = []
    for word in pre_split(text):
        if len(word) > MAX_WORD_CHARS:
            pieces.append(UNK)
            continue
        start = 0
        word_pieces = []
        while start < len(word):
            end = len(word)
            match = None
            while start < end:
                candidate = word[start:end]
                if start > 0:
                    candidate = "##" + candidate
                if candidate in vocab:
                    match = candidate
                    break
                end -= 1
            if match is None:
                word_pieces = [UNK]
                break
            word_pieces.append(match)
            start = end
        pieces.extend(word_pieces)
    return pieces


def detokenize(pieces) -> str:
    """Inverse of tokenization for in-vocab text: join pieces, strip ##."""
    words = []
    for piece in pieces:
        if piece.startswith("##") and words:
            words[-1] += piece[2:]
        else:
            words.append(piece)
    return " ".join(words)


@dataclass
class TokenizedPair:
    """One packed model input: ids, segment ids, and attention mask.

    All three lists have length max_len. segment_ids are 0 over
    [CLS] + segment A + [SEP] and 1 over segment B + [SEP]; attention_mask
    is 1 for real tokens and 0 for padding.
    """

    ids: list[int]
    segment_ids: list[int]
    attention_mask: list[int]

    def __len__(self):
        return len(self.ids)

    @property
    def num_real_tokens(self):
        return sum(self.attention_mask)


def encode_pair(seg_a: str, seg_b: str | None, vocab: Vocab,
                max_len: int = 128) -> TokenizedPair:
    """Pack one or two text segments into a fixed-length TokenizedPair.

    When the pair is too long the currently longer segment loses its last
    piece first (B on ties), until everything fits.
    """
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3, got {max_len}")
    a = wordpiece_tokenize(seg_a, vocab)
    b = wordpiece_tokenize(seg_b, vocab) if seg_b is not None else None
    return pack_pieces(a, b, vocab, max_len)


def pack_pieces(pieces_a: list[str], pieces_b: list[str] | None, vocab: Vocab,
                max_len: int = 128) -> TokenizedPair:
    """encode_pair for already-tokenized segments (used by the data pipeline)."""
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3, got {max_len}")
    a = list(pieces_a)
    b = list(pieces_b) if pieces_b is not None else None
    budget = max_len - (3 if b is not None else 2)
    if b is None:
        del a[budget:]
    else:
        while len(a) + len(b) > budget:
            if len(a) > len(b):
                a.pop()
            else:
                b.pop()
    ids = [vocab.cls_id] + [_piece_id(vocab, p) for p in a] + [vocab.sep_id]
    segments = [0] * len(ids)
    if b is not None:
        ids += [_piece_id(vocab, p) for p in b] + [vocab.sep_id]
        segments += [1] * (len(b) + 1)
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    ids += [vocab.pad_id] * pad
    segments += [segments[-1]] * pad
    mask += [0] * pad
    return TokenizedPair(ids, segments, mask)


def _piece_id(vocab, piece):
    return vocab.token_to_id.get(piece, vocab.unk_id)
