"""Vocabulary, corpora and padded batches for two styled text files.

Corpus files are UTF-8, one whitespace-tokenized sentence per line.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
STYLES = (1, 2)


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple
    max_size: int
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIALS:
            raise ConfigError("vocabulary must start with the four special tokens")
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(self.id_to_token)})

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token):
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens):
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids, strip=True):
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.id_to_token[i])
        return out

    def digest(self):
        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, max_size=None):
        tokens = tuple(Path(path).read_text(encoding="utf-8").splitlines())
        return cls(tokens, max_size if max_size is not None else len(tokens) - len(SPECIALS))


def tokenize(line, lowercase=False):
    return (line.lower() if lowercase else line).split()


def read_sentences(path, lowercase=False):
    """Token lists for every non-empty line; empty lines are skipped and counted."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read corpus {path}: {e}") from e
    sentences, skipped = [], 0
    for line in text.splitlines():
        toks = tokenize(line, lowercase)
        if toks:
            sentences.append(toks)
        else:
            skipped += 1
    if skipped:
        log.warning("%s: skipped %d empty line(s)", path, skipped)
    return sentences, skipped


def vocabulary_from_sentences(sentences, max_size):
    if max_size < 1:
        raise ConfigError(f"vocabulary max_size must be >= 1, got {max_size}")
    counts = Counter()
    for sent in sentences:
        counts.update(t for t in sent if t not in SPECIALS)
    # Counter keeps first-insertion order and sorted() is stable, so equal
    # counts stay in first-occurrence order.
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])[:max_size]
    return Vocabulary(SPECIALS + tuple(t for t, _ in ranked), max_size)


def build_vocabulary(files, max_size, lowercase=False):
    """Keep the ``max_size`` most frequent tokens across ``files``."""
    if max_size < 1:
        raise ConfigError(f"vocabulary max_size must be >= 1, got {max_size}")
    sentences = []
    for f in files:
        sentences.extend(read_sentences(f, lowercase)[0])
    return vocabulary_from_sentences(sentences, max_size)


def encode_sentence(text, vocab, lowercase=False):
    toks = tokenize(text, lowercase) if isinstance(text, str) else list(text)
    if not toks:
        raise ContractError("cannot encode an empty sentence")
    return vocab.encode(toks)


@dataclass
class Corpus:
    style: int
    sentences: list
    source_path: str = ""
    skipped: int = 0

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"style must be 1 or 2, got {self.style}")
        if any(len(s) == 0 for s in self.sentences):
            raise ContractError("corpus contains an empty sentence")

    def __len__(self):
        return len(self.sentences)


def load_corpus(path, vocab, style, lowercase=False):
    sentences, skipped = read_sentences(path, lowercase)
    return Corpus(style, [vocab.encode(s) for s in sentences], str(path), skipped)


@dataclass
class Batch:
    """Right-padded token ids plus the true length of every row."""

    inputs: np.ndarray
    lengths: np.ndarray
    style: int
    index: np.ndarray | None = None

    @property
    def size(self):
        return self.inputs.shape[0]

    @property
    def decoder_inputs(self):
        b, length = self.inputs.shape
        out = np.full((b, length + 1), PAD, dtype=np.int64)
        out[:, 0] = BOS
        out[:, 1:] = self.inputs
        return out

    @property
    def targets(self):
        b, length = self.inputs.shape
        out = np.full((b, length + 1), PAD, dtype=np.int64)
        out[:, :length] = self.inputs
        out[np.arange(b), self.lengths] = EOS
        return out

    @property
    def target_mask(self):
        steps = np.arange(self.inputs.shape[1] + 1)
        return (steps[None, :] <= self.lengths[:, None]).astype(np.float64)


def make_batch(sentences, style, max_len=None, index=None):
    if not sentences:
        raise ContractError("cannot batch zero sentences")
    seqs = [list(s[:max_len]) if max_len else list(s) for s in sentences]
    if any(len(s) == 0 for s in seqs):
        raise ContractError("cannot batch an empty sentence")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    inputs = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, : len(s)] = s
    idx = None if index is None else np.asarray(index, dtype=np.int64)
    return Batch(inputs, lengths, style, idx)


def make_batches(corpus, batch_size, max_len=20, shuffle_seed=None):
    """Partition a corpus into batches; shuffled deterministically when a seed is given."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if max_len is not None and max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    order = np.arange(len(corpus.sentences))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start: start + batch_size]
        batches.append(make_batch([corpus.sentences[i] for i in idx], corpus.style, max_len, idx))
    return batches


def split_sentences(sentences, ratios, seed):
    """Seeded shuffle then cut into consecutive parts by ``ratios``."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(sentences))
    cuts = np.floor(np.cumsum(ratios) * len(sentences) + 1e-9).astype(int)
    cuts[-1] = len(sentences)
    parts, start = [], 0
    for c in cuts:
        parts.append([sentences[i] for i in order[start:c]])
        start = c
    return parts


def write_sentences(path, sentences):
    lines = [" ".join(s) for s in sentences]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
