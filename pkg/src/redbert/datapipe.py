"""Corpus handling and the synthetic retail data generator.

Covers four concerns:

* corpus files (JSON-lines of documents) and document-level 90-10 splits;
* pretraining instance construction: next-sentence pairing and MLM masking;
* a template-grammar generator producing catalog/chat documents plus
  aligned labels for all five downstream tasks;
* encoding helpers that turn task examples into model inputs.

Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .objectives import IGNORE_TAG
from .tokenizer import (TokenizedPair, Vocab, encode_pair, pack_pieces,
                        wordpiece_tokenize)

SOURCES = ("catalog", "chat")


@dataclass
class CorpusDoc:
    doc_id: str
    source: str
    sentences: list[str]

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DataError(f"doc {self.doc_id}: unknown source "
                            f"{self.source!r}")
        if not self.sentences or not all(s.strip() for s in self.sentences):
            raise DataError(f"doc {self.doc_id}: needs non-empty sentences")


def save_corpus(path, docs):
    """JSON-lines, one document per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(
                {"doc_id": doc.doc_id, "source": doc.source,
                 "sentences": doc.sentences},
                sort_keys=True) + "\n")


def load_corpus(path) -> list[CorpusDoc]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append(CorpusDoc(rec["doc_id"], rec["source"],
                                      rec["sentences"]))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad corpus record") from exc
    return docs


# ------------------------------------------------------------------- split


@dataclass
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")


def split(corpus, spec: SplitSpec):
    """Document-level shuffle and cut: (train, test), disjoint, exhaustive."""
    if not corpus:
        raise DataError("cannot split an empty corpus")
    order = np.random.default_rng(spec.seed).permutation(len(corpus))
    n_train = int(np.floor(spec.train_fraction * len(corpus) + 0.5))
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    return ([corpus[i] for i in train_idx], [corpus[i] for i in test_idx])


# ---------------------------------------------------------------- NSP pairs


def make_nsp_pairs(corpus, seed: int):
    """(segment_a, segment_b, label) triples, half positive by expectation.

    Every consecutive sentence pair inside a document yields one triple:
    with probability 0.5 the true next sentence (label 1), otherwise a
    random sentence from a different document (label 0).
    """
    if len(corpus) < 2:
        raise ConfigError(
            "next-sentence pairing needs at least 2 documents to draw "
            "negatives from")
    rng = np.random.default_rng(seed)
    pairs = []
    for i, doc in enumerate(corpus):
        for a, b in zip(doc.sentences, doc.sentences[1:]):
            if rng.random() < 0.5:
                pairs.append((a, b, 1))
            else:
                j = int(rng.integers(len(corpus) - 1))
                if j >= i:
                    j += 1
                donor = corpus[j]
                foreign = donor.sentences[
                    int(rng.integers(len(donor.sentences)))]
                pairs.append((a, foreign, 0))
    return pairs


# ------------------------------------------------------------------ masking

MASK_SELECT_P = 0.15
MASK_TOKEN_P = 0.8  # of selected: replaced by [MASK]
RANDOM_TOKEN_P = 0.1  # of selected: replaced by a random non-special token


@dataclass
class TrainingInstance:
    """One pretraining example: masked pair + restoration labels."""

    pair: TokenizedPair
    masked_positions: list[int]
    mlm_labels: list[int]
    nsp_label: int


def apply_masking(pair: TokenizedPair, vocab: Vocab, seed,
                  nsp_label: int = 0) -> TrainingInstance:
    """Select maskable tokens at 15%; 80/10/10 mask/random/keep.

    [CLS], [SEP], and padding are never selected. The returned instance
    carries a fresh ids list; `pair` is not modified.
    """
    rng = np.random.default_rng(seed)
    ids = list(pair.ids)
    protected = {vocab.pad_id, vocab.cls_id, vocab.sep_id}
    candidate_ids = [i for i in range(len(vocab))
                     if i not in vocab.special_ids]
    positions, labels = [], []
    for pos, (tid, real) in enumerate(zip(ids, pair.attention_mask)):
        if not real or tid in protected:
            continue
        if rng.random() >= MASK_SELECT_P:
            continue
        positions.append(pos)
        labels.append(tid)
        u = rng.random()
        if u < MASK_TOKEN_P:
            ids[pos] = vocab.mask_id
        elif u < MASK_TOKEN_P + RANDOM_TOKEN_P:
            ids[pos] = candidate_ids[int(rng.integers(len(candidate_ids)))]
        # else: token stays, but the model must still predict it
    masked_pair = TokenizedPair(ids, list(pair.segment_ids),
                                list(pair.attention_mask))
    return TrainingInstance(masked_pair, positions, labels, nsp_label)


def build_pretraining_instances(corpus, vocab: Vocab, max_len: int,
                                seed: int) -> list[TrainingInstance]:
    """Corpus -> NSP pairs -> packed, masked TrainingInstances."""
    rng = np.random.default_rng(seed)
    instances = []
    for a, b, label in make_nsp_pairs(corpus, seed=int(rng.integers(2**31))):
        pair = encode_pair(a, b, vocab, max_len=max_len)
        instances.append(apply_masking(pair, vocab,
                                       seed=int(rng.integers(2**31)),
                                       nsp_label=label))
    return instances


# ------------------------------------------------------- instance shards

SHARD_MAGIC = b"RBSHRD01"


def serialize_instance(inst: TrainingInstance) -> bytes:
    rec = {
        "ids": inst.pair.ids,
        "segments": inst.pair.segment_ids,
        "mask": inst.pair.attention_mask,
        "masked_positions": inst.masked_positions,
        "mlm_labels": inst.mlm_labels,
        "nsp_label": inst.nsp_label,
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":")).encode()


def parse_instance(blob: bytes) -> TrainingInstance:
    try:
        rec = json.loads(blob)
        pair = TokenizedPair(rec["ids"], rec["segments"], rec["mask"])
        return TrainingInstance(pair, rec["masked_positions"],
                                rec["mlm_labels"], rec["nsp_label"])
    except (ValueError, KeyError) as exc:
        raise DataError("bad serialized training instance") from exc


def write_instance_shard(path, instances):
    """Length-prefixed records: u32 byte count, then the payload."""
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        for inst in instances:
            blob = serialize_instance(inst)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_instance_shard(path) -> list[TrainingInstance]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SHARD_MAGIC:
        raise DataError(f"{path}: not an instance shard (bad magic)")
    out = []
    offset = 8
    while offset < len(raw):
        if offset + 4 > len(raw):
            raise DataError(f"{path}: truncated record header")
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        blob = raw[offset:offset + n]
        if len(blob) != n:
            raise DataError(f"{path}: truncated record payload")
        out.append(parse_instance(blob))
        offset += n
    return out


# ------------------------------------------------------------ the grammar


def _default_intents():
    return {
        "search_product": [
            ["show", "me", "{product}"],
            ["i", "am", "looking", "for", "{brand}", "{product}"],
            ["find", "{color}", "{product}"],
            ["search", "for", "{product}"],
        ],
        "add_to_cart": [
            ["add", "{product}", "to", "my", "cart"],
            ["add", "{quantity}", "{product}", "to", "the", "cart"],
            ["put", "{brand}", "{product}", "in", "my", "cart"],
            ["i", "want", "to", "buy", "{product}"],
        ],
        "remove_from_cart": [
            ["remove", "{product}", "from", "my", "cart"],
            ["take", "the", "{product}", "out", "of", "my", "cart"],
            ["drop", "{product}", "from", "cart"],
        ],
        "show_cart": [
            ["show", "my", "cart"],
            ["what", "is", "in", "my", "cart", "?"],
            ["open", "the", "cart"],
        ],
        "check_price": [
            ["what", "is", "the", "price", "of", "{brand}", "{product}", "?"],
            ["how", "much", "is", "the", "{product}", "?"],
            ["price", "of", "{product}", "?"],
        ],
        "checkout": [
            ["checkout", "please"],
            ["place", "my", "order"],
            ["i", "am", "ready", "to", "checkout"],
        ],
    }


def _default_flow():
    return {
        "search_product": "add_to_cart",
        "check_price": "add_to_cart",
        "add_to_cart": "show_cart",
        "remove_from_cart": "show_cart",
        "show_cart": "checkout",
        "checkout": "search_product",
    }


def _default_positive():
    return [
        ["i", "love", "the", "{qualifier}", "{product}"],
        ["the", "{brand}", "{product}", "is", "great"],
        ["excellent", "{product}", ",", "works", "perfectly"],
        ["very", "happy", "with", "my", "{product}"],
    ]


def _default_negative():
    return [
        ["the", "{product}", "stopped", "working"],
        ["i", "hate", "this", "{product}"],
        ["terrible", "{qualifier}", "{product}", ",", "total", "waste"],
        ["my", "{product}", "broke", "after", "one", "day"],
    ]


def _default_fillers():
    return [
        ["with", "free", "shipping", "and", "great", "value"],
        ["limited", "time", "offer", "buy", "now"],
        ["best", "seller", "deal", "of", "the", "week"],
    ]


@dataclass
class Grammar:
    """Lexicons and templates driving the synthetic generator."""

    brands: list = field(default_factory=lambda: [
        "acme", "northpeak", "bluefin", "starline", "willowbrook",
        "ironclad", "sunburst", "quickstep"])
    products: list = field(default_factory=lambda: [
        ["running", "shoes"], ["wireless", "earbuds"], ["coffee", "maker"],
        ["yoga", "mat"], ["water", "bottle"], ["desk", "lamp"],
        ["phone", "case"], ["backpack"]])
    colors: list = field(default_factory=lambda: [
        "black", "white", "red", "blue", "green"])
    sizes: list = field(default_factory=lambda: ["small", "medium", "large"])
    qualifiers: list = field(default_factory=lambda: [
        "premium", "classic", "sport", "pro", "ultra"])
    quantities: list = field(default_factory=lambda: ["one", "two", "three"])
    intents: dict = field(default_factory=_default_intents)
    flow: dict = field(default_factory=_default_flow)
    positive_templates: list = field(default_factory=_default_positive)
    negative_templates: list = field(default_factory=_default_negative)
    fillers: list = field(default_factory=_default_fillers)
    intent_priors: dict | None = None  # None = uniform over intents
    positive_prior: float = 0.5
    # words deliberately left out of the vocabulary so their pieces are
    # exercised; maps word -> WordPiece decomposition
    split_words: dict = field(default_factory=lambda: {
        "running": ["run", "##ning"],
        "shoes": ["shoe", "##s"],
        "earbuds": ["ear", "##buds"],
    })

    def intent_names(self):
        return sorted(self.intents)

    def prior_vector(self):
        names = self.intent_names()
        if self.intent_priors is None:
            return names, np.full(len(names), 1.0 / len(names))
        p = np.array([self.intent_priors[n] for n in names], dtype=float)
        if abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
            raise ConfigError("intent_priors must be a distribution")
        return names, p


NER_TAGS = ["O", "B-brand", "I-brand", "B-product", "I-product",
            "B-quantity", "I-quantity"]
TITLE_TAGS = ["0", "1"]  # drop / keep
SENTIMENT_LABELS = ["negative", "positive"]

_DESCRIPTION_TEMPLATES = [
    ["the", "{product}", "from", "{brand}", "comes", "in", "{color}", "."],
    ["it", "is", "available", "in", "{size}", "size", "."],
    ["customers", "love", "the", "{qualifier}", "design", "."],
    ["order", "now", "and", "save", "."],
    ["ships", "in", "two", "days", "."],
]


def _expand(template, slots, rng, spans=None):
    """Fill {placeholders} from slots; record entity (start, end, type)."""
    words = []
    for item in template:
        if item == "{brand}":
            start = len(words)
            words.append(slots["brand"])
            if spans is not None:
                spans.append([start, len(words), "brand"])
        elif item == "{product}":
            start = len(words)
            words.extend(slots["product"])
            if spans is not None:
                spans.append([start, len(words), "product"])
        elif item == "{quantity}":
            start = len(words)
            words.append(slots["quantity"])
            if spans is not None:
                spans.append([start, len(words), "quantity"])
        elif item.startswith("{"):
            words.append(slots[item[1:-1]])
        else:
            words.append(item)
    return words


def _draw_slots(grammar, rng):
    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    return {
        "brand": pick(grammar.brands),
        "product": pick(grammar.products),
        "color": pick(grammar.colors),
        "size": pick(grammar.sizes),
        "qualifier": pick(grammar.qualifiers),
        "quantity": pick(grammar.quantities),
    }


# ------------------------------------------------------------ task records


@dataclass
class ClassificationExample:
    text: str
    label: str


@dataclass
class TaggingExample:
    words: list[str]
    tags: list[str]
    spans: list = field(default_factory=list)  # (start, end, type) triples


@dataclass
class ProactiveExample:
    text: str
    history: str
    intent: str
    next_intent: str


@dataclass
class TaskDataset:
    name: str
    kind: str  # classification | tagging | proactive
    labels: list[str]
    examples: list


def save_task_dataset(path, ds: TaskDataset):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"task": ds.name, "kind": ds.kind,
                             "labels": ds.labels}, sort_keys=True) + "\n")
        for ex in ds.examples:
            fh.write(json.dumps(vars(ex), sort_keys=True) + "\n")


def load_task_dataset(path) -> TaskDataset:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().split("\n") if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty task dataset")
    try:
        head = json.loads(lines[0])
        kind = head["kind"]
        cls = {"classification": ClassificationExample,
               "tagging": TaggingExample,
               "proactive": ProactiveExample}[kind]
        examples = [cls(**json.loads(line)) for line in lines[1:]]
        return TaskDataset(head["task"], kind, head["labels"], examples)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad task dataset") from exc


# ---------------------------------------------------------------- generator


@dataclass
class GeneratorSpec:
    num_docs: int = 2000
    chat_fraction: float = 0.2
    task_examples: int = 500
    session_length: int = 4

    def __post_init__(self):
        if not 0.0 <= self.chat_fraction <= 1.0:
            raise ConfigError(
                f"chat_fraction must be in [0, 1], got {self.chat_fraction}")
        if self.num_docs < 1:
            raise ConfigError("num_docs must be positive")
        if self.session_length < 2:
            raise ConfigError("session_length must be at least 2 so every "
                              "session has a next turn")
        if self.task_examples < 0:
            raise ConfigError("task_examples must be non-negative")


def _catalog_doc(grammar, rng, doc_id):
    slots = _draw_slots(grammar, rng)
    title_words, title_tags = _title_with_tags(grammar, slots, rng)
    sentences = [" ".join(title_words)]
    n_desc = 2 + int(rng.integers(3))
    picks = rng.permutation(len(_DESCRIPTION_TEMPLATES))[:n_desc]
    for t in sorted(picks):
        sentences.append(" ".join(_expand(_DESCRIPTION_TEMPLATES[t], slots,
                                          rng)))
    return CorpusDoc(doc_id, "catalog", sentences), (title_words, title_tags)


def _title_with_tags(grammar, slots, rng):
    """Verbose product title plus keep(1)/drop(0) flags per word."""
    words = [slots["brand"], slots["qualifier"], *slots["product"]]
    tags = ["1"] * len(words)
    words += ["in", slots["color"], slots["size"], "size"]
    tags += ["0", "1", "1", "0"]
    filler = grammar.fillers[int(rng.integers(len(grammar.fillers)))]
    words += filler
    tags += ["0"] * len(filler)
    return words, tags


def _session(grammar, rng, length):
    """Chained (intent, words, spans) utterances following the flow rules."""
    names = grammar.intent_names()
    intent = names[int(rng.integers(len(names)))]
    turns = []
    for _ in range(length):
        templates = grammar.intents[intent]
        template = templates[int(rng.integers(len(templates)))]
        spans = []
        words = _expand(template, _draw_slots(grammar, rng), rng, spans)
        turns.append((intent, words, spans))
        intent = grammar.flow[intent]
    return turns


def _word_tags_from_spans(words, spans):
    tags = ["O"] * len(words)
    for start, end, kind in spans:
        tags[start] = f"B-{kind}"
        for i in range(start + 1, end):
            tags[i] = f"I-{kind}"
    return tags


def generate_synthetic_corpus(spec: GeneratorSpec, seed: int,
                              grammar: Grammar | None = None):
    """Deterministic corpus + five aligned task datasets.

    Returns (docs, tasks) where tasks maps name -> TaskDataset for
    "intent", "ner", "sentiment", "title", "proactive".
    """
    grammar = grammar or Grammar()
    rng = np.random.default_rng(seed)
    n_chat = int(np.floor(spec.chat_fraction * spec.num_docs + 0.5))

    docs = []
    titles = []
    for d in range(spec.num_docs - n_chat):
        doc, title = _catalog_doc(grammar, rng, f"catalog-{d:05d}")
        docs.append(doc)
        titles.append(title)
    for d in range(n_chat):
        turns = _session(grammar, rng, spec.session_length)
        docs.append(CorpusDoc(f"chat-{d:05d}", "chat",
                              [" ".join(words) for _, words, _ in turns]))

    names, priors = grammar.prior_vector()
    intent_examples = []
    ner_examples = []
    proactive_examples = []
    for _ in range(spec.task_examples):
        intent = names[int(rng.choice(len(names), p=priors))]
        templates = grammar.intents[intent]
        template = templates[int(rng.integers(len(templates)))]
        spans = []
        words = _expand(template, _draw_slots(grammar, rng), rng, spans)
        intent_examples.append(ClassificationExample(" ".join(words), intent))
        if spans:
            ner_examples.append(TaggingExample(
                words, _word_tags_from_spans(words, spans), spans))

    sentiment_examples = []
    for _ in range(spec.task_examples):
        positive = rng.random() < grammar.positive_prior
        pool = (grammar.positive_templates if positive
                else grammar.negative_templates)
        template = pool[int(rng.integers(len(pool)))]
        words = _expand(template, _draw_slots(grammar, rng), rng)
        sentiment_examples.append(ClassificationExample(
            " ".join(words), SENTIMENT_LABELS[int(positive)]))

    title_examples = []
    for _ in range(spec.task_examples):
        words, tags = _title_with_tags(grammar, _draw_slots(grammar, rng),
                                       rng)
        title_examples.append(TaggingExample(words, tags))

    while len(proactive_examples) < spec.task_examples:
        turns = _session(grammar, rng, spec.session_length)
        for t in range(1, len(turns)):
            intent, words, _ = turns[t - 1]
            next_intent = turns[t][0]
            history = " ".join(" ".join(w) for _, w, _ in turns[:t - 1])
            proactive_examples.append(ProactiveExample(
                " ".join(words), history, intent, next_intent))
            if len(proactive_examples) == spec.task_examples:
                break

    tasks = {
        "intent": TaskDataset("intent", "classification", names,
                              intent_examples),
        "ner": TaskDataset("ner", "tagging", list(NER_TAGS), ner_examples),
        "sentiment": TaskDataset("sentiment", "classification",
                                 list(SENTIMENT_LABELS), sentiment_examples),
        "title": TaskDataset("title", "tagging", list(TITLE_TAGS),
                             title_examples),
        "proactive": TaskDataset("proactive", "proactive", names,
                                 proactive_examples),
    }
    return docs, tasks


# ------------------------------------------------------------- vocabulary


def grammar_words(grammar: Grammar) -> set:
    """Every surface word the grammar can emit."""
    words = set(grammar.brands) | set(grammar.colors) | set(grammar.sizes) \
        | set(grammar.qualifiers) | set(grammar.quantities)
    for product in grammar.products:
        words.update(product)
    pools = [t for ts in grammar.intents.values() for t in ts]
    pools += grammar.positive_templates + grammar.negative_templates
    pools += grammar.fillers + _DESCRIPTION_TEMPLATES
    pools += [["in", "size", "?", ".", ","]]
    for template in pools:
        for item in template:
            if not item.startswith("{"):
                words.add(item)
    return words


def build_grammar_vocab(grammar: Grammar | None = None) -> list[str]:
    """Vocabulary token list: specials, then pieces, sorted.

    Words in grammar.split_words are represented by their WordPiece
    decomposition instead of as whole tokens, so multi-piece tokenization
    paths stay exercised.
    """
    from .tokenizer import SPECIAL_TOKENS
    grammar = grammar or Grammar()
    words = grammar_words(grammar)
    tokens = set()
    for w in words:
        if w in grammar.split_words:
            tokens.update(grammar.split_words[w])
        else:
            tokens.add(w)
    return list(SPECIAL_TOKENS) + sorted(tokens)


def make_synthetic_dep_embeddings(path, vocab: Vocab, dim: int, seed: int,
                                  grammar: Grammar | None = None):
    """Write a category-structured embedding file for the vocabulary.

    Tokens of one lexical category (brand, product word, color, ...) share
    a category center plus small noise, so the vectors genuinely carry
    syntactic-role information. Special tokens are left out of the file on
    purpose (they exercise the fallback-initialization path).
    """
    grammar = grammar or Grammar()
    rng = np.random.default_rng(seed)
    categories = {}
    for b in grammar.brands:
        categories[b] = "brand"
    for product in grammar.products:
        for w in product:
            categories[w] = "product"
    for c in grammar.colors:
        categories[c] = "color"
    for s in grammar.sizes:
        categories[s] = "size"
    for q in grammar.qualifiers:
        categories[q] = "qualifier"
    for q in grammar.quantities:
        categories[q] = "quantity"
    # split-word pieces inherit the source word's category
    for word, pieces in grammar.split_words.items():
        if word in categories:
            for piece in pieces:
                categories[piece] = categories[word]

    names = sorted({"brand", "product", "color", "size", "qualifier",
                    "quantity", "other"})
    centers = {name: rng.normal(0, 1.0, size=dim) for name in names}
    from .tokenizer import SPECIAL_TOKENS
    tokens, rows = [], []
    for token in vocab.tokens:
        if token in SPECIAL_TOKENS:
            continue
        center = centers[categories.get(token, "other")]
        rows.append(center + rng.normal(0, 0.1, size=dim))
        tokens.append(token)
    from .depinject import save_dep_embeddings
    save_dep_embeddings(path, tokens, np.asarray(rows))


# ---------------------------------------------------------------- encoding


def spread_tags(words, word_tags, vocab: Vocab):
    """Word-level tags -> piece-level tags (B-x continues as I-x)."""
    if len(words) != len(word_tags):
        raise DataError(f"{len(words)} words vs {len(word_tags)} tags")
    pieces, tags = [], []
    for word, wtag in zip(words, word_tags):
        wp = wordpiece_tokenize(word, vocab)
        if not wp:
            raise DataError(f"word {word!r} produced no pieces")
        cont = f"I-{wtag[2:]}" if wtag.startswith("B-") else wtag
        pieces.extend(wp)
        tags.extend([wtag] + [cont] * (len(wp) - 1))
    return pieces, tags


def encode_tagging(example: TaggingExample, vocab: Vocab, tag_names,
                   max_len: int):
    """(TokenizedPair, per-position tag ids with IGNORE_TAG elsewhere)."""
    tag_index = {t: i for i, t in enumerate(tag_names)}
    pieces, piece_tags = spread_tags(example.words, example.tags, vocab)
    try:
        tag_ids = [tag_index[t] for t in piece_tags]
    except KeyError as exc:
        raise DataError(f"tag {exc.args[0]!r} not in the tag set") from exc
    pieces = pieces[:max_len - 2]
    tag_ids = tag_ids[:max_len - 2]
    pair = pack_pieces(pieces, None, vocab, max_len=max_len)
    row = np.full(max_len, IGNORE_TAG, dtype=np.int64)
    row[1:1 + len(tag_ids)] = tag_ids
    return pair, row


def encode_classification(example: ClassificationExample, vocab: Vocab,
                          label_names, max_len: int):
    if example.label not in label_names:
        raise DataError(f"label {example.label!r} not in the label set")
    pair = encode_pair(example.text, None, vocab, max_len=max_len)
    return pair, label_names.index(example.label)


def encode_proactive(example: ProactiveExample, vocab: Vocab, intent_names,
                     max_len: int):
    """(pair over current + history, one-hot current intent, next id)."""
    if example.intent not in intent_names:
        raise DataError(f"intent {example.intent!r} not in the intent set")
    if example.next_intent not in intent_names:
        raise DataError(
            f"intent {example.next_intent!r} not in the intent set")
    history = example.history if example.history.strip() else None
    pair = encode_pair(example.text, history, vocab, max_len=max_len)
    onehot = np.zeros(len(intent_names), dtype=np.float32)
    onehot[intent_names.index(example.intent)] = 1.0
    return pair, onehot, intent_names.index(example.next_intent)
