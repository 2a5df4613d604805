"""Tokenization, vocabulary management, TSV ingestion and synthetic tasks.

Text is tokenized on whitespace against a learned frequency vocabulary.
Five special tokens are reserved at fixed ids 0-4 (pad, mask, cls, sep,
unk); everything downstream (models, perturbation, decoding) relies on
that layout.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

PAD, MASK, CLS, SEP, UNK = "<pad>", "<mask>", "<cls>", "<sep>", "<unk>"
SPECIAL_TOKENS = (PAD, MASK, CLS, SEP, UNK)
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)

SYNTHETIC_RULES = ("keyword-majority", "pair-overlap")


class DataError(ValueError):
    """Raised for malformed corpora, files or task specs."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list with the five specials pinned to ids 0-4."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False)

    def __post_init__(self):
        if self.tokens[:5] != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(self.tokens) < 7:
            raise DataError("vocabulary needs at least 2 content tokens")
        if len(self.token_to_id) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        tokens = tuple(tokens)
        return cls(tokens=tokens, token_to_id={t: i for i, t in enumerate(tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def num_content(self) -> int:
        return len(self.tokens) - len(SPECIAL_TOKENS)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.from_tokens(lines)


@dataclass(frozen=True)
class Example:
    """One labelled input: a sentence or a sentence pair."""

    text_a: str
    text_b: str | None = None
    label: int = 0

    def __post_init__(self):
        if not self.text_a:
            raise DataError("text_a must be non-empty")
        if self.label < 0:
            raise DataError("label must be a class id >= 0")


@dataclass
class TokenSequence:
    """Encoded example: [cls, a..., sep(, b..., sep), pad...].

    ``maskable`` is True exactly at content positions; cls/sep/pad are
    never maskable.
    """

    ids: list[int]
    segment_ids: list[int]
    maskable: list[bool]

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.segment_ids) == len(self.maskable) == n):
            raise DataError("ids/segment_ids/maskable lengths differ")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def maskable_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.maskable) if m]


@dataclass
class Dataset:
    """A single split of a task."""

    split: str
    examples: list[Example]
    num_classes: int
    metric: str = "accuracy"
    label_names: list[str] | None = None

    def __post_init__(self):
        if not self.examples:
            raise DataError(f"split '{self.split}' has no examples")
        bad = [ex.label for ex in self.examples if ex.label >= self.num_classes]
        if bad:
            raise DataError(f"labels {sorted(set(bad))} out of range for C={self.num_classes}")

    def __len__(self) -> int:
        return len(self.examples)

    def texts(self) -> list[str]:
        out = []
        for ex in self.examples:
            out.append(ex.text_a if ex.text_b is None else ex.text_a + " " + ex.text_b)
        return out

    def labels(self) -> list[int]:
        return [ex.label for ex in self.examples]


@dataclass
class Task:
    """A named task: train/dev splits plus shared metadata."""

    name: str
    splits: dict[str, Dataset]
    num_classes: int
    metric: str = "accuracy"
    label_names: list[str] | None = None

    @property
    def train(self) -> Dataset:
        return self.splits["train"]

    @property
    def dev(self) -> Dataset:
        return self.splits["dev"]


@dataclass(frozen=True)
class ColumnSchema:
    """Names of the text and label columns in a TSV file."""

    text_a: str
    label: str
    text_b: str | None = None


def tokenize(text: str) -> list[str]:
    return text.split()


def build_vocab(corpus: list[str], max_size: int) -> Vocabulary:
    """Frequency vocabulary over whitespace tokens, specials always first.

    Remaining slots are filled by descending count, ties broken
    lexicographically, so the result is deterministic for a given corpus.
    """
    if not corpus:
        raise DataError("empty corpus")
    if max_size < 7:
        raise DataError("max_size must be >= 7 (5 specials + 2 content tokens)")
    counts = Counter()
    for line in corpus:
        counts.update(t for t in tokenize(line) if t not in SPECIAL_TOKENS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    content = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary.from_tokens(list(SPECIAL_TOKENS) + content)


def encode(example: Example, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Encode an example as [cls, a..., sep(, b..., sep)] padded to max_len.

    Truncation keeps leading tokens, text_a first; the separators and the
    cls slot are always preserved.
    """
    if max_len < 4:
        raise DataError("max_len must be >= 4")
    toks_a = [vocab.id_of(t) for t in tokenize(example.text_a)]
    toks_b = [vocab.id_of(t) for t in tokenize(example.text_b)] if example.text_b is not None else None

    n_seps = 1 if toks_b is None else 2
    budget = max_len - 1 - n_seps
    keep_a = min(len(toks_a), budget)
    keep_b = 0 if toks_b is None else min(len(toks_b), budget - keep_a)

    ids = [CLS_ID] + toks_a[:keep_a] + [SEP_ID]
    segs = [0] * len(ids)
    maskable = [False] + [True] * keep_a + [False]
    if toks_b is not None:
        ids += toks_b[:keep_b] + [SEP_ID]
        segs += [1] * (keep_b + 1)
        maskable += [True] * keep_b + [False]

    pad = max_len - len(ids)
    ids += [PAD_ID] * pad
    segs += [0] * pad
    maskable += [False] * pad
    return TokenSequence(ids=ids, segment_ids=segs, maskable=maskable)


def decode(ids, vocab: Vocabulary) -> str:
    """Render token ids back to text, dropping all special tokens."""
    if torch.is_tensor(ids):
        ids = ids.tolist()
    words = []
    for i in ids:
        if i >= len(vocab) or i < 0:
            raise DataError(f"token id {i} out of range for vocabulary of size {len(vocab)}")
        if i >= len(SPECIAL_TOKENS):
            words.append(vocab.tokens[i])
    return " ".join(words)


def encode_dataset(dataset: Dataset, vocab: Vocabulary, max_len: int):
    """Encode a whole split to (ids, maskable, labels) tensors."""
    seqs = [encode(ex, vocab, max_len) for ex in dataset.examples]
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    maskable = torch.tensor([s.maskable for s in seqs], dtype=torch.bool)
    labels = torch.tensor(dataset.labels(), dtype=torch.long)
    return ids, maskable, labels


def load_dataset(path, schema: ColumnSchema, split: str = "train",
                 metric: str = "accuracy",
                 label_map: dict[str, int] | None = None) -> Dataset:
    """Parse a UTF-8 TSV with a header row into a Dataset.

    Label strings are mapped to contiguous class ids in first-appearance
    order; pass ``label_map`` to reuse the mapping of another split.
    """
    path = Path(path)
    try:
        raw = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not valid UTF-8: {e}") from None
    lines = [ln for ln in raw.split("\n") if ln != ""]
    if not lines:
        raise DataError(f"empty file: {path}")
    header = lines[0].split("\t")
    col = {name: i for i, name in enumerate(header)}
    for name in filter(None, (schema.text_a, schema.text_b, schema.label)):
        if name not in col:
            raise DataError(f"missing column: {name}")

    label_map = dict(label_map) if label_map else {}
    examples = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        if len(cells) != len(header):
            raise DataError(f"row with {len(cells)} cells, expected {len(header)}: {ln[:60]!r}")
        raw_label = cells[col[schema.label]]
        if raw_label not in label_map:
            label_map[raw_label] = len(label_map)
        examples.append(Example(
            text_a=cells[col[schema.text_a]],
            text_b=cells[col[schema.text_b]] if schema.text_b else None,
            label=label_map[raw_label],
        ))
    if not examples:
        raise DataError(f"no data rows in {path}")
    names = [None] * len(label_map)
    for raw_label, i in label_map.items():
        names[i] = raw_label
    return Dataset(split=split, examples=examples, num_classes=len(label_map),
                   metric=metric, label_names=names)


def save_dataset(dataset: Dataset, path) -> None:
    """Write a split back to TSV (inverse of load_dataset for our schema)."""
    names = dataset.label_names or [str(c) for c in range(dataset.num_classes)]
    pair = dataset.examples[0].text_b is not None
    header = "text_a\ttext_b\tlabel" if pair else "text_a\tlabel"
    rows = [header]
    for ex in dataset.examples:
        cells = [ex.text_a] + ([ex.text_b] if pair else []) + [names[ex.label]]
        rows.append("\t".join(cells))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for make_synthetic_task."""

    n_train: int = 512
    n_dev: int = 256
    vocab_content_size: int = 24
    seq_len: int = 12
    rule: str = "keyword-majority"
    overlap_k: int = 2

    def __post_init__(self):
        if self.rule not in SYNTHETIC_RULES:
            raise DataError(f"unknown rule {self.rule!r}, expected one of {SYNTHETIC_RULES}")
        if self.seq_len < 2:
            raise DataError("seq_len must be >= 2")
        if self.vocab_content_size < 6:
            raise DataError("vocab_content_size must be >= 6")
        if self.n_train < 2 or self.n_dev < 2:
            raise DataError("need at least 2 examples per split")


def synthetic_token_pools(spec: SyntheticSpec) -> tuple[list[str], list[str], list[str]]:
    """Split the content vocabulary into two keyword sets and filler."""
    v = spec.vocab_content_size
    k = max(2, v // 5)
    pos = [f"pos{i}" for i in range(k)]
    neg = [f"neg{i}" for i in range(k)]
    filler = [f"w{i}" for i in range(v - 2 * k)]
    return pos, neg, filler


def synthetic_oracle_label(spec: SyntheticSpec, example: Example) -> int:
    """Recompute the label of a synthetic example from its text alone."""
    pos, neg, _ = synthetic_token_pools(spec)
    if spec.rule == "keyword-majority":
        toks = tokenize(example.text_a)
        p = sum(t in set(pos) for t in toks)
        n = sum(t in set(neg) for t in toks)
        return 1 if p > n else 0
    shared = set(tokenize(example.text_a)) & set(tokenize(example.text_b or ""))
    return 1 if len(shared) >= spec.overlap_k else 0


def _keyword_majority_example(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> Example:
    pos, neg, filler = synthetic_token_pools(spec)
    win, lose = (pos, neg) if label == 1 else (neg, pos)
    hi = min(3, spec.seq_len - 1)
    n_win = int(rng.integers(1, hi + 1))
    n_lose = int(rng.integers(0, min(n_win, spec.seq_len - n_win + 1)))
    toks = [win[rng.integers(len(win))] for _ in range(n_win)]
    toks += [lose[rng.integers(len(lose))] for _ in range(n_lose)]
    toks += [filler[rng.integers(len(filler))] for _ in range(spec.seq_len - len(toks))]
    rng.shuffle(toks)
    return Example(text_a=" ".join(toks), label=label)


def _pair_overlap_example(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> Example:
    pos, neg, filler = synthetic_token_pools(spec)
    pool = pos + neg + filler
    k = spec.overlap_k
    if k >= spec.seq_len or k >= len(pool):
        raise DataError("overlap_k must be < seq_len and < vocab_content_size")
    while True:  # need >= k distinct tokens in a, and a non-empty complement
        a = [pool[rng.integers(len(pool))] for _ in range(spec.seq_len)]
        a_set = sorted(set(a))
        rest = [t for t in pool if t not in set(a)]
        if len(a_set) >= k and rest:
            break
    if label == 1:
        shared = [a_set[i] for i in rng.choice(len(a_set), size=k, replace=False)]
        b = shared + [rest[rng.integers(len(rest))] for _ in range(spec.seq_len - k)]
        rng.shuffle(b)
    else:
        b = [rest[rng.integers(len(rest))] for _ in range(spec.seq_len)]
    return Example(text_a=" ".join(a), text_b=" ".join(b), label=label)


def make_synthetic_task(spec: SyntheticSpec, rng_seed: int) -> Task:
    """Generate a balanced two-class task whose labels follow an exact rule.

    Deterministic for a given seed; every label can be recomputed from the
    text via :func:`synthetic_oracle_label`.
    """
    rng = np.random.default_rng(rng_seed)
    make = _keyword_majority_example if spec.rule == "keyword-majority" else _pair_overlap_example
    splits = {}
    for split, n in (("train", spec.n_train), ("dev", spec.n_dev)):
        labels = [1] * (n // 2) + [0] * (n - n // 2)
        examples = [make(spec, lab, rng) for lab in labels]
        order = rng.permutation(n)
        examples = [examples[i] for i in order]
        splits[split] = Dataset(split=split, examples=examples, num_classes=2,
                                metric="accuracy", label_names=["0", "1"])
    return Task(name=f"synthetic-{spec.rule}", splits=splits, num_classes=2,
                metric="accuracy", label_names=["0", "1"])


def task_corpus(task: Task) -> list[str]:
    """All training texts, for vocabulary building and MLM pretraining."""
    return task.train.texts()
