"""Encode -> transfer -> greedy decode, for single sentences and whole files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, encode_sentence, make_batch
from .errors import ContractError
from .model import DIRECTIONS, cycle_map, encode
from .tensor import Tensor


@dataclass
class TransferResult:
    source_tokens: list
    transferred_tokens: list
    direction: str
    latent_cycle_residual: float | None = None
    stopped_at_eos: bool = True


def greedy_decode_batch(ae, z, max_len=20):
    """Greedy decoding for every row of z; returns (token lists, stopped-at-eos flags).

    Each step feeds back the argmax token (lowest id on ties) and a row stops at
    eos, which is not included in its output, or after ``max_len`` tokens.
    pad and bos are never emitted.
    """
    z = T.as_tensor(z)
    if z.ndim == 1:
        z = Tensor(z.data[None, :])
    b = z.shape[0]
    h, c = z, Tensor(np.zeros(z.shape))
    prev = np.full(b, BOS, dtype=np.int64)
    out = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    static = ae.decoder_static(z)
    for _ in range(max_len):
        logits, h, c = ae.decoder_step(prev, h, c, static)
        logits = logits.data.copy()
        logits[:, [PAD, BOS]] = -np.inf
        # np.argmax returns the first maximum, i.e. the lowest token id
        nxt = np.argmax(logits, axis=1)
        for i in np.flatnonzero(~done):
            if nxt[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all():
            break
        prev = nxt
    return out, done.tolist()


def greedy_decode(ae, z, max_len=20):
    tokens, _ = greedy_decode_batch(ae, z, max_len)
    return tokens[0]


def _direction_parts(model, direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if direction == "1to2":
        return model.ae1, model.t12, model.ae2, "1to2to1"
    return model.ae2, model.t21, model.ae1, "2to1to2"


def transfer_batch(model, sentences, direction, max_len=20, residual=False):
    """Transfer a list of id sequences; one TransferResult per input, same order.

    Only the source encoder, the direction's transfer net and the target
    decoder are used, unless ``residual`` asks for the cycle diagnostic, which
    also runs the reverse transfer net.
    """
    if not sentences:
        return []
    if any(len(s) == 0 for s in sentences):
        raise ContractError("cannot transfer an empty sentence")
    src_ae, net, tgt_ae, cycle = _direction_parts(model, direction)
    batch = make_batch(sentences, src_ae.style, max_len)
    z = encode(src_ae, batch)
    z_t = net(z)
    tokens, stopped = greedy_decode_batch(tgt_ae, z_t, max_len)
    res = [None] * len(sentences)
    if residual:
        res = T.l1_distance(cycle_map(model, z, cycle), z, axis=-1).data.tolist()
    return [TransferResult(list(s), t, direction, r, e)
            for s, t, r, e in zip(sentences, tokens, res, stopped)]


def transfer_text(model, sentence, direction, max_len=20, residual=False):
    if len(sentence) == 0:
        raise ContractError("cannot transfer an empty sentence")
    return transfer_batch(model, [list(sentence)], direction, max_len, residual)[0]


def transfer_sentences(model, vocab, sentences, direction, max_len=20, batch_size=256):
    """Token-string sentences in, token-string sentences out."""
    out = []
    for start in range(0, len(sentences), batch_size):
        chunk = [encode_sentence(s, vocab) for s in sentences[start:start + batch_size]]
        out.extend(vocab.decode(r.transferred_tokens)
                   for r in transfer_batch(model, chunk, direction, max_len))
    return out


def transfer_file(model, vocab, in_path, out_path, direction, max_len=20, lowercase=False):
    """Line-aligned batch transfer; empty input lines give empty output lines."""
    lines = Path(in_path).read_text(encoding="utf-8").splitlines()
    keep = [i for i, line in enumerate(lines) if line.split()]
    toks = [(line.lower() if lowercase else line).split() for line in lines]
    results = transfer_sentences(model, vocab, [toks[i] for i in keep], direction, max_len)
    out = [""] * len(lines)
    for i, r in zip(keep, results):
        out[i] = " ".join(r)
    Path(out_path).write_text("".join(line + "\n" for line in out), encoding="utf-8")
    return len(lines)


__all__ = ["TransferResult", "greedy_decode", "greedy_decode_batch", "transfer_text",
           "transfer_batch", "transfer_sentences", "transfer_file"]
