"""Automatic metrics: Transfer (style classifier), BLEU, PPL, RPPL, Jaccard neighbours."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EOS, PAD, make_batch, split_sentences
from .errors import ConfigError, ContractError
from .model import LstmCell, Linear, Module
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


# style classifier

class StyleClassifier(Module):
    """Mean of token embeddings fed to a logistic unit; output is P(style 2)."""

    def __init__(self, embedding, weight, bias):
        self.embedding = Tensor.parameter(embedding)
        self.weight = Tensor.parameter(weight)
        self.bias = Tensor.parameter(bias)

    def logits(self, batch):
        emb = T.embedding(self.embedding, batch.inputs)
        b, length, d = emb.shape
        mask = (np.arange(length)[None, :] < batch.lengths[:, None]).astype(np.float64)
        weights = np.repeat((mask / batch.lengths[:, None])[:, :, None], d, axis=2)
        avg = T.tsum(emb * weights, axis=1)
        return T.reshape(avg @ T.reshape(self.weight, (d, 1)), (b,)) + self.bias

    def score(self, sentences, batch_size=512):
        """P(style 2) for each id sequence."""
        out = []
        for start in range(0, len(sentences), batch_size):
            chunk = [s if len(s) else [PAD] for s in sentences[start:start + batch_size]]
            out.append(T.sigmoid(self.logits(make_batch(chunk, 1))).data)
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, sentences):
        return np.where(self.score(sentences) >= 0.5, 2, 1)

    def accuracy(self, sentences, labels):
        return float(np.mean(self.predict(sentences) == np.asarray(labels)))


@dataclass
class ClassifierFit:
    classifier: StyleClassifier
    heldout_accuracy: float
    epochs: int


def train_classifier(sentences1, sentences2, vocab_size, seed=0, dim=10, lr=0.05,
                     batch_size=64, max_epochs=50, patience=3, heldout=0.1):
    """Fit on both styles until held-out accuracy stops improving for ``patience`` epochs."""
    if not sentences1 or not sentences2:
        raise ConfigError("classifier training needs sentences of both styles")
    data = [(s, 1) for s in sentences1 if s] + [(s, 2) for s in sentences2 if s]
    return train_labeled_classifier(data, vocab_size, seed, dim, lr, batch_size, max_epochs,
                                    patience, heldout)


def train_labeled_classifier(data, vocab_size, seed=0, dim=10, lr=0.05, batch_size=64,
                             max_epochs=50, patience=3, heldout=0.1):
    if len({y for _, y in data}) < 2:
        raise ConfigError("classifier training needs two classes")
    rng = np.random.default_rng(seed)
    train_part, held = split_sentences(data, (1 - heldout, heldout), seed)
    clf = StyleClassifier(rng.uniform(-0.1, 0.1, (vocab_size, dim)), np.zeros(dim), np.zeros(()))
    opt = T.Adam(clf.parameters(), lr)
    hs, hy = [s for s, _ in held], [y for _, y in held]
    best_acc, best_state, stale, epoch = -1.0, None, 0, 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(train_part))
        for start in range(0, len(order), batch_size):
            chunk = [train_part[i] for i in order[start:start + batch_size]]
            batch = make_batch([s for s, _ in chunk], 1)
            y = np.array([lab == 2 for _, lab in chunk], dtype=np.float64)
            with Tape():
                p = T.clip(T.sigmoid(clf.logits(batch)), 1e-7, 1 - 1e-7)
                loss = -T.mean(T.log(p) * y + T.log(1.0 - p) * (1.0 - y))
                backward(loss, params=clf.parameters())
            opt.step()
        acc = clf.accuracy(hs, hy) if hs else 0.0
        if acc > best_acc:
            best_acc, stale = acc, 0
            best_state = [p.data.copy() for p in clf.parameters()]
        else:
            stale += 1
            if stale >= patience:
                break
    for p, d in zip(clf.parameters(), best_state):
        p.data = d
    return ClassifierFit(clf, best_acc, epoch)


def transfer_rate(classifier, sentences, target_style):
    """Fraction of sentences the classifier assigns to ``target_style``."""
    if len(sentences) == 0:
        raise ContractError("transfer_rate needs at least one sentence")
    return float(np.mean(classifier.predict(sentences) == target_style))


# BLEU

def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def top_ngram_share(sentences, n=3):
    """(most frequent n-gram, fraction of sentences containing it).

    Counts are per sentence, so a repeated n-gram inside one output counts once.
    """
    seen = Counter()
    for s in sentences:
        seen.update(set(ngrams(s, n)))
    if not seen:
        return None, 0.0
    gram, count = max(seen.items(), key=lambda kv: (kv[1], kv[0]))
    return gram, count / len(sentences)


def modified_precision(candidate, reference, n):
    """Clipped n-gram matches over candidate n-gram count, as an exact Fraction.

    Returns Fraction(0) when the candidate has no n-grams of order n.
    """
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    total = sum(cand.values())
    if total == 0:
        return Fraction(0)
    return Fraction(sum(min(c, ref[g]) for g, c in cand.items()), total)


def _match_counts(candidate, reference, max_n):
    out = []
    for n in range(1, max_n + 1):
        cand, ref = ngrams(candidate, n), ngrams(reference, n)
        out.append((sum(min(c, ref[g]) for g, c in cand.items()), sum(cand.values())))
    return out


def _bleu_from_counts(counts, cand_len, ref_len):
    if cand_len == 0:
        return 0.0
    logs = []
    for n, (match, total) in enumerate(counts, 1):
        if n == 1:
            if match == 0:
                return 0.0
            logs.append(math.log(match / total))
        else:
            # add-one smoothing on orders above 1
            logs.append(math.log((match + 1) / (total + 1)))
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def sentence_bleu(candidate, reference, max_n=4):
    """BLEU-4 of one candidate against one reference, in [0, 100]."""
    if len(reference) == 0:
        raise ContractError("BLEU needs a non-empty reference")
    if len(candidate) == 0:
        log.debug("empty candidate scored 0 BLEU")
        return 0.0
    return _bleu_from_counts(_match_counts(candidate, reference, max_n), len(candidate), len(reference))


bleu = sentence_bleu


def corpus_bleu(candidates, references, max_n=4):
    """Corpus BLEU-4: n-gram counts and lengths summed over all pairs first."""
    if len(candidates) != len(references):
        raise ContractError("candidate and reference counts differ")
    sums = [[0, 0] for _ in range(max_n)]
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        if len(ref) == 0:
            raise ContractError("BLEU needs non-empty references")
        for k, (m, t) in enumerate(_match_counts(cand, ref, max_n)):
            sums[k][0] += m
            sums[k][1] += t
        c_len += len(cand)
        r_len += len(ref)
    return _bleu_from_counts([tuple(s) for s in sums], c_len, r_len)


# language model

@dataclass
class LmConfig:
    embedding: int = 300
    hidden: int = 300
    dropout: float = 0.2
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    max_len: int = 20


class RnnLanguageModel(Module):
    """One-layer LSTM language model over a fixed vocabulary."""

    def __init__(self, embedding, cell, output):
        self.embedding = Tensor.parameter(embedding)
        self.cell = cell
        self.output = output

    @property
    def vocab_size(self):
        return self.embedding.shape[0]

    def logits(self, batch, dropout=0.0, rng=None):
        dec_in = batch.decoder_inputs
        b, length = dec_in.shape
        x = T.embedding(self.embedding, dec_in)
        if dropout:
            x = x * _dropout_mask(rng, x.shape, dropout)
        x_proj = self.cell.project_inputs(x)
        n = self.cell.hidden_size
        zeros = Tensor(np.zeros((b, n)))
        outputs, _, _ = self.cell.run(x_proj, zeros, zeros)
        hs = T.reshape(T.stack(outputs, axis=1), (b * length, n))
        if dropout:
            hs = hs * _dropout_mask(rng, hs.shape, dropout)
        return self.output(hs)

    def loss(self, batch, dropout=0.0, rng=None):
        return T.softmax_cross_entropy(self.logits(batch, dropout, rng), batch.targets.reshape(-1),
                                       batch.target_mask.reshape(-1))


def _dropout_mask(rng, shape, p):
    return (rng.random(shape) >= p) / (1.0 - p)


def init_lm(vocab_size, config, seed=0):
    rng = np.random.default_rng(seed)
    r = 1.0 / math.sqrt(config.hidden)
    e, n = config.embedding, config.hidden
    return RnnLanguageModel(rng.uniform(-r, r, (vocab_size, e)),
                            LstmCell(rng.uniform(-r, r, (4 * n, e)), rng.uniform(-r, r, (4 * n, n)),
                                     rng.uniform(-r, r, 4 * n)),
                            Linear(rng.uniform(-r, r, (vocab_size, n)), rng.uniform(-r, r, vocab_size)))


def _clean(sentences, max_len):
    return [list(s[:max_len]) for s in sentences if len(s)]


def train_lm(sentences, vocab_size, config=None, seed=0):
    """Train an LSTM LM on id sequences with dropout on inputs and pre-projection."""
    config = config or LmConfig()
    data = _clean(sentences, config.max_len)
    if not data:
        raise ConfigError("language model training needs at least one sentence")
    lm = init_lm(vocab_size, config, seed)
    opt = T.Adam(lm.parameters(), config.lr)
    rng = np.random.default_rng([seed, 1])
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), config.batch_size):
            batch = make_batch([data[i] for i in order[start:start + config.batch_size]], 1)
            with Tape():
                loss = lm.loss(batch, config.dropout, rng)
                backward(loss, params=lm.parameters())
            opt.step()
    return lm


def token_nll(lm, sentences, batch_size=256, max_len=None):
    """(total negative log-likelihood, token count) including the eos of each sentence."""
    data = _clean(sentences, max_len)
    total, count = 0.0, 0.0
    for start in range(0, len(data), batch_size):
        batch = make_batch(data[start:start + batch_size], 1)
        mask = batch.target_mask.reshape(-1)
        n = mask.sum()
        total += float(lm.loss(batch).data) * n
        count += n
    return total, count


def perplexity(lm, sentences, max_len=None):
    total, count = token_nll(lm, sentences, max_len=max_len)
    if count == 0:
        raise ContractError("perplexity needs at least one token")
    return math.exp(total / count)


RPPL_MIN_SENTENCES = 1000


def reverse_perplexity(generated, heldout, vocab_size, config=None, seed=0,
                       min_sentences=RPPL_MIN_SENTENCES):
    """Perplexity on real held-out text of an LM trained on generated text."""
    gen = [s for s in generated if len(s)]
    if len(gen) < min_sentences:
        raise ConfigError(f"reverse perplexity needs >= {min_sentences} generated sentences, got {len(gen)}")
    config = config or LmConfig()
    lm = train_lm(gen, vocab_size, config, seed)
    return perplexity(lm, heldout, config.max_len)


# nearest neighbours

def jaccard_distance(a, b):
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return 1.0 - len(sa & sb) / len(union)


class JaccardIndex:
    """Inverted index over token sets for nearest-neighbour lookups."""

    def __init__(self, corpus):
        if len(corpus) == 0:
            raise ContractError("nearest-neighbour search needs a non-empty corpus")
        self.corpus = [list(s) for s in corpus]
        self.sets = [set(s) for s in self.corpus]
        self.postings = defaultdict(list)
        for i, s in enumerate(self.sets):
            for tok in s:
                self.postings[tok].append(i)

    def query(self, sentence):
        """(index, distance) of the closest sentence; ties go to the earliest one."""
        q = set(sentence)
        overlap = Counter()
        for tok in q:
            for i in self.postings.get(tok, ()):
                overlap[i] += 1
        best_i, best_d = None, math.inf
        for i, inter in overlap.items():
            d = 1.0 - inter / (len(q) + len(self.sets[i]) - inter)
            if d < best_d or (d == best_d and i < best_i):
                best_i, best_d = i, d
        if best_i is None or best_d >= 1.0:
            # nothing shares a token: distance is 1 everywhere except equal empty sets
            for i, s in enumerate(self.sets):
                d = jaccard_distance(q, s)
                if best_i is None or d < best_d or (d == best_d and i < best_i):
                    best_i, best_d = i, d
                if d == 1.0 and best_d == 1.0 and best_i <= i:
                    break
        return best_i, best_d


def nearest_neighbor_jaccard(sentence, corpus):
    """(best match, distance) under word-set Jaccard distance."""
    index = corpus if isinstance(corpus, JaccardIndex) else JaccardIndex(corpus)
    i, d = index.query(sentence)
    return index.corpus[i], d


# reports

@dataclass
class EvalRecord:
    source: str
    output: str
    target_style: int
    score: float
    bleu: float


@dataclass
class EvalReport:
    transfer_rate: float
    bleu: float
    sentence_bleu: float
    ppl: float
    rppl: float
    classifier_accuracy: float
    records: list = field(default_factory=list)

    def metrics(self):
        return {"transfer": self.transfer_rate, "bleu": self.bleu,
                "sentence_bleu": self.sentence_bleu, "ppl": self.ppl, "rppl": self.rppl,
                "classifier_accuracy": self.classifier_accuracy, "n": len(self.records)}

    def to_text(self):
        lines = [f"{k}={v!r}" for k, v in self.metrics().items()]
        lines.append("")
        lines.append("source\toutput\ttarget_style\tclassifier_score\tsentence_bleu")
        for r in self.records:
            lines.append(f"{r.source}\t{r.output}\t{r.target_style}\t{r.score!r}\t{r.bleu!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text):
        head, _, table = text.partition("\n\n")
        kv = dict(line.split("=", 1) for line in head.splitlines() if line)
        records = []
        for line in table.splitlines()[1:]:
            src, out, tgt, score, b = line.split("\t")
            records.append(EvalRecord(src, out, int(tgt), float(score), float(b)))
        return cls(float(kv["transfer"]), float(kv["bleu"]), float(kv["sentence_bleu"]),
                   float(kv["ppl"]), float(kv["rppl"]), float(kv["classifier_accuracy"]), records)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def evaluate(sources, outputs, target_style, classifier_fit, lm, heldout, vocab, lm_config=None,
             seed=0, rppl_min=RPPL_MIN_SENTENCES):
    """All four metrics for token-list ``outputs`` transferred from ``sources``.

    ``target_style`` is one style for every output or a per-output list.
    ``lm`` was trained on real text and scores PPL; ``heldout`` is real
    held-out text scored by an LM trained on the outputs (RPPL).
    """
    if len(sources) != len(outputs):
        raise ContractError("sources and outputs must be line-aligned")
    if not outputs:
        raise ContractError("nothing to evaluate")
    targets = np.broadcast_to(np.asarray(target_style), (len(outputs),))
    out_ids = [vocab.encode(o) for o in outputs]
    clf = classifier_fit.classifier
    scores = clf.score(out_ids)
    p_target = np.where(targets == 2, scores, 1.0 - scores)
    sbleu = [sentence_bleu(o, s) for o, s in zip(outputs, sources)]
    rppl = reverse_perplexity(out_ids, [vocab.encode(h) for h in heldout], len(vocab),
                              lm_config, seed, rppl_min)
    records = [EvalRecord(" ".join(s), " ".join(o), int(t), float(p), float(b))
               for s, o, t, p, b in zip(sources, outputs, targets, p_target, sbleu)]
    return EvalReport(
        transfer_rate=float(np.mean(clf.predict(out_ids) == targets)),
        bleu=corpus_bleu(outputs, sources),
        sentence_bleu=float(np.mean(sbleu)),
        ppl=perplexity(lm, out_ids),
        rppl=rppl,
        classifier_accuracy=classifier_fit.heldout_accuracy,
        records=records,
    )


__all__ = ["StyleClassifier", "ClassifierFit", "train_classifier", "train_labeled_classifier",
           "transfer_rate", "modified_precision", "sentence_bleu", "bleu", "corpus_bleu",
           "LmConfig", "RnnLanguageModel", "init_lm", "train_lm", "token_nll", "perplexity",
           "reverse_perplexity", "jaccard_distance", "JaccardIndex", "nearest_neighbor_jaccard",
           "EvalRecord", "EvalReport", "evaluate", "EOS"]
