"""Corpora: CoNLL ingestion, synthetic NER generation, vocabularies, batching,
and forget-set selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
OUTSIDE = "O"


class DataError(ValueError):
    pass


class ConllParseError(DataError):
    def __init__(self, path, lineno: int, line: str):
        super().__init__(f"{path}:{lineno}: expected 'token label', got {line!r}")
        self.lineno = lineno


@dataclass(frozen=True)
class Sentence:
    id: int
    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    token_ids: tuple[int, ...] = ()
    labels: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.tokens:
            raise DataError(f"sentence {self.id} is empty")
        if len(self.tokens) != len(self.tags):
            raise DataError(f"sentence {self.id}: {len(self.tokens)} tokens but {len(self.tags)} tags")
        for seq in (self.token_ids, self.labels):
            if seq and len(seq) != len(self.tokens):
                raise DataError(f"sentence {self.id}: encoded length mismatch")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def encoded(self) -> bool:
        return bool(self.token_ids)


@dataclass
class TokenDataset:
    train: list[Sentence]
    dev: list[Sentence]
    test: list[Sentence]
    label_names: list[str] = field(default_factory=list)
    vocab: dict[str, int] = field(default_factory=dict)
    name: str = "corpus"

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def outside_index(self) -> int | None:
        try:
            return self.label_names.index(OUTSIDE)
        except ValueError:
            return None

    @property
    def max_len(self) -> int:
        return max((len(s) for part in (self.train, self.dev, self.test) for s in part), default=1)

    def split(self, name: str) -> list[Sentence]:
        if name not in ("train", "dev", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def subset_train(self, ids) -> "TokenDataset":
        """Same dataset with the training split restricted to ``ids`` (order kept)."""
        keep = set(ids)
        return replace(self, train=[s for s in self.train if s.id in keep])


# ---------------------------------------------------------------------------
# CoNLL

def parse_conll(path) -> list[Sentence]:
    """Read two-column ``token label`` lines; blank lines end sentences."""
    path = Path(path)
    sentences: list[Sentence] = []
    toks: list[str] = []
    tags: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                if toks:
                    sentences.append(Sentence(len(sentences), tuple(toks), tuple(tags)))
                    toks, tags = [], []
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ConllParseError(path, lineno, line)
            toks.append(fields[0])
            tags.append(fields[1])
    if toks:
        sentences.append(Sentence(len(sentences), tuple(toks), tuple(tags)))
    if not sentences:
        log.warning("%s contains no sentences", path)
    return sentences


def write_conll(sentences: Sequence[Sentence], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in sentences:
            for tok, tag in zip(s.tokens, s.tags):
                fh.write(f"{tok} {tag}\n")
            fh.write("\n")


def load_conll_dataset(train_path, dev_path, test_path, name: str = "conll") -> TokenDataset:
    return TokenDataset(parse_conll(train_path), parse_conll(dev_path), parse_conll(test_path), name=name)


# ---------------------------------------------------------------------------
# synthetic corpora

@dataclass(frozen=True)
class SyntheticSpec:
    num_train: int
    num_dev: int
    num_test: int
    num_classes: int  # entity classes + O
    vocab_size: int
    mean_len: float = 12.0

    def validate(self) -> None:
        for key in ("num_train", "num_dev", "num_test"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 (O plus one entity class)")
        if self.mean_len < 3:
            raise ValueError(f"mean_len must be at least 3, got {self.mean_len}")
        k = self.num_classes - 1
        if self.vocab_size < 60 * k + 20:
            raise ValueError(f"vocab_size {self.vocab_size} too small for {k} entity classes")


# sentence counts from the benchmark corpora; classes include O
PRESETS: dict[str, SyntheticSpec] = {
    "wnut16-scale": SyntheticSpec(2394, 1000, 3849, 11, 4000),
    "wnut17-scale": SyntheticSpec(3394, 1009, 1287, 7, 4000),
    "ncbi-scale": SyntheticSpec(5424, 923, 940, 2, 4000),
    "chemu-scale": SyntheticSpec(5911, 1402, 2363, 11, 6000),
    "tiny": SyntheticSpec(200, 60, 60, 4, 500, 8.0),
}

CUES_PER_CLASS = 3
CUE_PROB = 0.6
ZIPF_EXPONENT = 1.0


def _zipf_weights(n: int, exponent: float = ZIPF_EXPONENT) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def _sample(rng: Rng, cdf: np.ndarray) -> int:
    return min(int(np.searchsorted(cdf, rng.uniform(()), side="right")), len(cdf) - 1)


def generate_synthetic(spec: SyntheticSpec, seed: int, name: str = "synthetic") -> TokenDataset:
    """Deterministic NER-style corpus.

    Word forms are split into O filler words, per-class cue words (O-tagged,
    placed just before an entity), and per-class entity words. Entity words
    are class-exclusive and drawn Zipf-style, so frequent ones generalise and
    the long tail can only be labelled by memorising the training set.
    """
    spec.validate()
    k = spec.num_classes - 1
    label_names = [OUTSIDE] + [f"ENT-{c}" for c in range(1, k + 1)]
    n_cue = CUES_PER_CLASS * k
    n_filler = max(10, int(0.3 * spec.vocab_size))
    per_class = (spec.vocab_size - n_filler - n_cue) // k

    filler = [f"w{i}" for i in range(n_filler)]
    cues = [[f"c{c}_{i}" for i in range(CUES_PER_CLASS)] for c in range(1, k + 1)]
    entities = [[f"e{c}_{i}" for i in range(per_class)] for c in range(1, k + 1)]
    filler_cdf = np.cumsum(_zipf_weights(n_filler))
    ent_cdf = np.cumsum(_zipf_weights(per_class))

    root = Rng(seed, "synthetic")

    def make_split(split: str, count: int) -> list[Sentence]:
        rng = root.child(split)
        out = []
        for sid in range(count):
            length = max(3, int(rng.poisson(spec.mean_len)))
            toks: list[str] = []
            tags: list[str] = []
            n_ent = 1 + int(rng.uniform(()) < 0.5)
            while len(toks) < length:
                slots_left = length - len(toks)
                if n_ent and rng.uniform(()) < n_ent / slots_left * 1.5:
                    c = int(rng.integers(0, k))
                    span = 1 + int(rng.uniform(()) < 0.3)
                    if rng.uniform(()) < CUE_PROB:
                        toks.append(cues[c][int(rng.integers(0, CUES_PER_CLASS))])
                        tags.append(OUTSIDE)
                    for _ in range(span):
                        toks.append(entities[c][_sample(rng, ent_cdf)])
                        tags.append(label_names[c + 1])
                    n_ent -= 1
                else:
                    toks.append(filler[_sample(rng, filler_cdf)])
                    tags.append(OUTSIDE)
            out.append(Sentence(sid, tuple(toks), tuple(tags)))
        return out

    return TokenDataset(
        train=make_split("train", spec.num_train),
        dev=make_split("dev", spec.num_dev),
        test=make_split("test", spec.num_test),
        label_names=label_names,
        name=name,
    )


# ---------------------------------------------------------------------------
# vocabulary

def _label_names(ds: TokenDataset) -> list[str]:
    seen = {t for part in (ds.train, ds.dev, ds.test) for s in part for t in s.tags}
    if ds.label_names:
        missing = seen - set(ds.label_names)
        if missing:
            raise DataError(f"tags not in label set: {sorted(missing)}")
        return list(ds.label_names)
    rest = sorted(seen - {OUTSIDE})
    return ([OUTSIDE] if OUTSIDE in seen else []) + rest


def build_vocab_and_encode(ds: TokenDataset, min_count: int = 1, max_len: int | None = None) -> TokenDataset:
    """Map tokens and tags to indices using a vocabulary from the train split.

    ``<pad>`` is 0 and ``<unk>`` is 1; rare and unseen tokens map to ``<unk>``.
    Sentences longer than ``max_len`` are truncated.
    """
    if not ds.train:
        raise DataError("cannot build a vocabulary from an empty training split")
    counts: dict[str, int] = {}
    for s in ds.train:
        for t in s.tokens:
            counts[t] = counts.get(t, 0) + 1
    vocab = {PAD: PAD_ID, UNK: UNK_ID}
    for tok in sorted(counts, key=lambda t: (-counts[t], t)):
        if counts[tok] >= min_count:
            vocab[tok] = len(vocab)
    labels = _label_names(ds)
    label_index = {n: i for i, n in enumerate(labels)}

    def enc(part: list[Sentence]) -> list[Sentence]:
        out = []
        for s in part:
            toks, tags = s.tokens, s.tags
            if max_len is not None and len(toks) > max_len:
                toks, tags = toks[:max_len], tags[:max_len]
            out.append(Sentence(
                s.id, toks, tags,
                tuple(vocab.get(t, UNK_ID) for t in toks),
                tuple(label_index[t] for t in tags),
            ))
        return out

    return TokenDataset(enc(ds.train), enc(ds.dev), enc(ds.test), labels, vocab, ds.name)


# ---------------------------------------------------------------------------
# forget requests

@dataclass(frozen=True)
class UnlearnRequest:
    forget_ids: frozenset[int]
    fraction: float
    seed: int

    def split(self, train: Sequence[Sentence]) -> tuple[list[Sentence], list[Sentence]]:
        """(retained, forget) in training order."""
        keep, drop = [], []
        for s in train:
            (drop if s.id in self.forget_ids else keep).append(s)
        return keep, drop


def select_forget(ds: TokenDataset, fraction: float, seed: int) -> UnlearnRequest:
    """Uniformly sample ``floor(fraction * N)`` training sentences to forget."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(ds.train)
    size = math.floor(fraction * n)
    if size == 0:
        raise ValueError(f"fraction {fraction} of {n} sentences selects nothing to forget")
    order = Rng(seed, "forget").permutation(n)[:size]
    ids = frozenset(ds.train[i].id for i in order)
    return UnlearnRequest(ids, fraction, seed)


# ---------------------------------------------------------------------------
# batching

@dataclass(frozen=True)
class Batch:
    ids: np.ndarray      # [B, T] int
    labels: np.ndarray   # [B, T] int, 0 at padding
    mask: np.ndarray     # [B, T] bool
    sentence_ids: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.mask.sum())


def collate(sentences: Sequence[Sentence]) -> Batch:
    if not sentences:
        raise DataError("cannot collate an empty batch")
    if not all(s.encoded for s in sentences):
        raise DataError("sentences must be encoded before batching")
    width = max(len(s) for s in sentences)
    ids = np.full((len(sentences), width), PAD_ID, dtype=np.int64)
    labels = np.zeros((len(sentences), width), dtype=np.int64)
    mask = np.zeros((len(sentences), width), dtype=bool)
    for i, s in enumerate(sentences):
        n = len(s)
        ids[i, :n] = s.token_ids
        labels[i, :n] = s.labels
        mask[i, :n] = True
    return Batch(ids, labels, mask, tuple(s.id for s in sentences))


def make_batches(sentences: Sequence[Sentence], batch_size: int, rng: Rng | None = None,
                 bucket: int = 0) -> Iterator[Batch]:
    """Padded batches in order, or shuffled by ``rng``; the short tail batch is kept.

    With ``bucket > 0`` and an ``rng``, each window of ``bucket * batch_size``
    shuffled sentences is sorted by length before cutting, and the resulting
    batches are served in shuffled order. This cuts padding without changing
    which sentences an epoch visits.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if rng is None:
        order = np.arange(len(sentences))
    else:
        order = rng.permutation(len(sentences))
    if rng is None or bucket <= 0:
        for start in range(0, len(order), batch_size):
            yield collate([sentences[i] for i in order[start:start + batch_size]])
        return
    window = bucket * batch_size
    groups = []
    for w0 in range(0, len(order), window):
        chunk = sorted(order[w0:w0 + window], key=lambda i: len(sentences[i]))
        groups += [chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size)]
    for gi in rng.permutation(len(groups)):
        yield collate([sentences[i] for i in groups[gi]])
