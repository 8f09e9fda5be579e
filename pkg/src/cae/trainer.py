"""Alternating min-max training, config files, metrics logs and checkpoints.

Each training step runs three phases on one pair of batches:

(a) ``disc_steps`` discriminator updates with the transfer nets frozen,
(b) one autoencoder update on lambda1 * reconstruction loss,
(c) one transfer-net update on lambda2 * generator terms + lambda3 * cycle loss.

Latents enter (a) and (c) detached, so encoders are shaped by reconstruction only.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import make_batches
from .errors import CheckpointError, ConfigError
from .losses import (LossBreakdown, cycle_loss, discriminator_terms, generator_terms,
                     reconstruction_loss, style_reconstruction_loss, total_loss)
from .model import encode, init_model
from .tensor import Tape, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hidden: int = 128
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 1.0
    batch_size: int = 64
    epochs: int = 10
    optimizer: str = "adam"
    lr_ae: float = 1e-3
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    disc_steps: int = 1
    max_len: int = 20
    seed: int = 0
    no_cycle: bool = False
    no_discriminators: bool = False
    decoder_feed_latent: bool = True
    mirror_init: bool = True
    share_word_layers: bool = True
    transfer_init: str = "identity"
    vocab_size: int = 10000
    lowercase: bool = False
    checkpoint_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.hidden < 2:
            raise ConfigError(f"hidden must be >= 2, got {self.hidden}")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("lr_ae", "lr_gen", "lr_disc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.disc_steps < 1:
            raise ConfigError("disc_steps must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.max_len < 1 or self.vocab_size < 1:
            raise ConfigError("batch_size, max_len and vocab_size must be positive; epochs >= 0")
        if self.transfer_init not in ("identity", "uniform"):
            raise ConfigError(f"unknown transfer_init {self.transfer_init!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3)

    def resolved(self):
        """Copy with ablation flags folded into the loss weights."""
        out = dataclasses.replace(self)
        if self.no_cycle:
            out.lambda3 = 0.0
        if self.no_discriminators:
            out.lambda2 = 0.0
        return out

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse(known[key].type, raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text):
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls.from_dict(values)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


PRESETS = {
    "yelp": {"hidden": 128, "vocab_size": 10000},
    "yahoo": {"hidden": 300, "vocab_size": 30000},
}


def preset(name, **overrides):
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}") from None
    base.update(overrides)
    return TrainConfig(**base)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(kind, raw):
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind}") from None
    return raw


@dataclass
class TrainState:
    ae_opt: T.Optimizer
    gen_opt: T.Optimizer
    disc_opt: T.Optimizer
    step: int = 0


def make_train_state(model, config):
    g = model.groups()
    return TrainState(T.make_optimizer(config.optimizer, g["autoencoders"], config.lr_ae),
                      T.make_optimizer(config.optimizer, g["transfer"], config.lr_gen),
                      T.make_optimizer(config.optimizer, g["discriminators"], config.lr_disc))


def train_step(model, batch1, batch2, config, state):
    """One (a)/(b)/(c) update; returns the loss breakdown measured along the way."""
    cfg = config.resolved()
    lam1, lam2, lam3 = cfg.lambdas
    groups = model.groups()
    step = state.step + 1
    model.zero_grad()

    with Tape() as ae_tape:
        z1 = encode(model.ae1, batch1)
        z2 = encode(model.ae2, batch2)
        recon = reconstruction_loss(model, batch1, batch2, z1, z2)
        ae_objective = recon * lam1
    z1, z2 = z1.detach(), z2.detach()

    disc1 = disc2 = 0.0
    if not cfg.no_discriminators:
        for _ in range(cfg.disc_steps):
            with Tape():
                d1, d2 = discriminator_terms(model, z1, z2)
                backward(d1 + d2, params=groups["discriminators"])
            state.disc_opt.step()
            disc1, disc2 = float(d1.data), float(d2.data)

    backward(ae_objective, tape=ae_tape, params=groups["autoencoders"])
    state.ae_opt.step()

    with Tape():
        cyc = cycle_loss(model, z1, z2)
        objective = cyc * lam3
        gen12 = gen21 = 0.0
        if not cfg.no_discriminators:
            gen12, gen21 = generator_terms(model, z1, z2)
            objective = objective + (gen12 + gen21) * lam2
        backward(objective, params=groups["transfer"])
    for p in groups["discriminators"]:
        p.grad = None
    state.gen_opt.step()

    state.step = step
    return total_loss(recon, gen12, gen21, disc1, disc2, cyc, cfg.lambdas, step=step)


# logging

@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    def add_step(self, step, epoch, breakdown):
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError("step indices must increase")
        self.steps.append((step, epoch, breakdown))

    @property
    def initial_validation(self):
        return self.validation[0][1] if self.validation else None

    @property
    def final_validation(self):
        return self.validation[-1][1] if self.validation else None


def format_step_record(step, epoch, bd):
    parts = [f"step={step}", f"epoch={epoch}"]
    parts += [f"{k}={_fmt(float(v))}" for k, v in bd.as_dict().items()]
    return " ".join(parts)


def format_validation_record(epoch, value):
    return f"valid epoch={epoch} recon={_fmt(float(value))}"


def parse_metrics(text):
    """Parse a metrics file back into (step records, validation records)."""
    steps, valid = [], []
    for line in text.splitlines():
        if not line.strip():
            continue
        toks = line.split()
        if toks[0] == "valid":
            kv = dict(t.split("=", 1) for t in toks[1:])
            valid.append((int(kv["epoch"]), float(kv["recon"])))
        else:
            kv = dict(t.split("=", 1) for t in toks)
            step, epoch = int(kv.pop("step")), int(kv.pop("epoch"))
            steps.append((step, epoch, LossBreakdown(**{k: float(v) for k, v in kv.items()})))
    return steps, valid


def validation_loss(model, corpus1, corpus2, batch_size, max_len):
    """Token-weighted reconstruction NLL per style, summed over the two styles."""
    total = 0.0
    for ae, corpus in ((model.ae1, corpus1), (model.ae2, corpus2)):
        nll = tokens = 0.0
        for batch in make_batches(corpus, batch_size, max_len):
            n = batch.target_mask.sum()
            nll += float(style_reconstruction_loss(ae, batch).data) * n
            tokens += n
        total += nll / tokens
    return total


def _derived_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def epoch_batches(corpus1, corpus2, config, epoch):
    """Paired batch lists; the shorter side is reshuffled and recycled to match."""
    sides = []
    for style, corpus in ((1, corpus1), (2, corpus2)):
        sides.append(make_batches(corpus, config.batch_size, config.max_len,
                                  _derived_seed(config.seed, epoch, style, 0)))
    n = max(len(s) for s in sides)
    for k, (style, corpus) in enumerate(((1, corpus1), (2, corpus2))):
        rnd = 1
        while len(sides[k]) < n:
            sides[k] += make_batches(corpus, config.batch_size, config.max_len,
                                     _derived_seed(config.seed, epoch, style, rnd))
            rnd += 1
        sides[k] = sides[k][:n]
    return list(zip(*sides))


def train(corpus1, corpus2, config, vocab_size=None, valid=None, vocab_digest="",
          metrics_path=None, checkpoint_dir=None, model=None, progress=None):
    """Train a fresh (or given) model; returns (model, TrainLog).

    ``valid`` is an optional (corpus1, corpus2) pair used for per-epoch
    reconstruction tracking and best-model checkpointing.
    """
    if len(corpus1) == 0 or len(corpus2) == 0:
        raise ConfigError("both corpora must be non-empty")
    config.validate()
    if model is None:
        if vocab_size is None:
            raise ConfigError("vocab_size is required when no model is given")
        model = init_model(config, vocab_size)
    state = make_train_state(model, config)
    tlog = TrainLog()
    ckpt_dir = Path(checkpoint_dir or config.checkpoint_dir) if (checkpoint_dir or config.checkpoint_dir) else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        best = math.inf
        if valid is not None:
            v = validation_loss(model, *valid, config.batch_size, config.max_len)
            tlog.validation.append((-1, v))
            _emit(metrics, format_validation_record(-1, v))
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            for b1, b2 in epoch_batches(corpus1, corpus2, config, epoch):
                bd = train_step(model, b1, b2, config, state)
                tlog.add_step(state.step, epoch, bd)
                _emit(metrics, format_step_record(state.step, epoch, bd))
            if valid is not None:
                v = validation_loss(model, *valid, config.batch_size, config.max_len)
                tlog.validation.append((epoch, v))
                _emit(metrics, format_validation_record(epoch, v))
                if v < best and ckpt_dir:
                    save_checkpoint(model, ckpt_dir / "best.ckpt", config, vocab_digest)
                best = min(best, v)
            tlog.timings.append((epoch, time.perf_counter() - t0))
            if progress:
                progress(epoch, tlog)
        if ckpt_dir:
            save_checkpoint(model, ckpt_dir / "model.ckpt", config, vocab_digest)
    finally:
        if metrics:
            metrics.close()
    return model, tlog


def _emit(fh, line):
    if fh is not None:
        fh.write(line + "\n")
        fh.flush()


# checkpoints

MAGIC = b"CAECKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(model, path, config, vocab_digest=""):
    """Write config echo, vocabulary hash and every parameter as little-endian f8."""
    state = model.named_parameters()
    names, blobs = [], []
    for name, p in state:
        names.append([name, list(p.shape)])
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    header = {
        "format": "cae-checkpoint",
        "version": VERSION,
        "config": config.to_dict(),
        "vocab_size": model.vocab_size,
        "hidden": model.hidden_size,
        "vocab_sha256": vocab_digest,
        "params": names,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path):
    """Parse a checkpoint into (header, {name: array}) or raise CheckpointError."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    end = _PREFIX.size + hlen
    if len(raw) < end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:end].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    arrays, offset = {}, end
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def load_checkpoint(path, vocab_digest=None):
    """Rebuild the model from a checkpoint; returns (model, config, header)."""
    header, arrays = read_checkpoint(path)
    if vocab_digest is not None and header.get("vocab_sha256") != vocab_digest:
        raise CheckpointError(f"{path}: vocabulary hash mismatch "
                              f"(checkpoint {header.get('vocab_sha256', '')[:12]}, given {vocab_digest[:12]})")
    config = TrainConfig.from_dict(header["config"])
    model = init_model(config, header["vocab_size"])
    model.load_state_dict(arrays)
    return model, config, header
