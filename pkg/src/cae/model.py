"""Per-style LSTM autoencoders, latent transfer networks and discriminators."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

DIRECTIONS = ("1to2", "2to1")
CYCLES = ("1to2to1", "2to1to2")


class Module:
    """Anything holding parameter tensors, possibly via nested modules."""

    def named_parameters(self, prefix="", _seen=None):
        """(dotted name, tensor) pairs; a shared tensor is listed once, under its first name."""
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """y = x @ weight.T + bias, weight stored as (out, in)."""

    def __init__(self, weight, bias):
        self.weight = Tensor.parameter(weight)
        self.bias = Tensor.parameter(bias)

    def __call__(self, x):
        if x.shape[-1] != self.weight.shape[1]:
            raise DimensionError(f"input width {x.shape[-1]} != layer input {self.weight.shape[1]}")
        return x @ self.weight.T + self.bias


class LstmCell(Module):
    """Single LSTM layer, gates ordered i, f, g, o along the 4h axis."""

    def __init__(self, W, U, b):
        self.W = Tensor.parameter(W)
        self.U = Tensor.parameter(U)
        self.b = Tensor.parameter(b)

    @property
    def hidden_size(self):
        return self.U.shape[1]

    @property
    def input_size(self):
        return self.W.shape[1]

    def project_inputs(self, x):
        """Input contribution W x + b for a whole (B, L, e) sequence at once.

        ``x`` may be narrower than the cell input; the remaining input columns
        are then fed separately through :meth:`project_static`.
        """
        b, length, e = x.shape
        W = self.W if e == self.input_size else self.W[:, :e]
        flat = T.reshape(x, (b * length, e)) @ W.T + self.b
        return T.reshape(flat, (b, length, 4 * self.hidden_size))

    def project_static(self, v):
        """Contribution of the trailing input columns from a per-row constant input."""
        return v @ self.W[:, self.input_size - v.shape[1]:].T

    def step(self, x_proj, h, c, static=None):
        """One step from the projected input (B, 4h) and the previous state."""
        n = self.hidden_size
        gates = x_proj + h @ self.U.T
        if static is not None:
            gates = gates + static
        i = T.sigmoid(gates[:, :n])
        f = T.sigmoid(gates[:, n:2 * n])
        g = T.tanh(gates[:, 2 * n:3 * n])
        o = T.sigmoid(gates[:, 3 * n:])
        c = f * c + i * g
        h = o * T.tanh(c)
        return h, c

    def __call__(self, x, h, c):
        return self.step(x @ self.W.T + self.b, h, c)

    def run(self, x_proj, h, c, lengths=None, static=None):
        """Unroll over (B, L, 4h); rows stop updating once past their length."""
        steps = x_proj.shape[1]
        outputs = []
        for t in range(steps):
            h_new, c_new = self.step(x_proj[:, t, :], h, c, static)
            if lengths is not None and np.any(lengths <= t):
                keep = np.repeat((lengths > t).astype(np.float64)[:, None], self.hidden_size, 1)
                h = h_new * keep + h * (1.0 - keep)
                c = c_new * keep + c * (1.0 - keep)
            else:
                h, c = h_new, c_new
            outputs.append(h)
        return outputs, h, c


class StyleAutoencoder(Module):
    """Embedding table, encoder and decoder LSTMs and the vocabulary projection.

    When the decoder's input is wider than the embedding, the latent is
    concatenated to every decoder input in addition to seeding its state.
    """

    def __init__(self, embedding, encoder, decoder, output, style):
        self.embedding = Tensor.parameter(embedding)
        self.encoder = encoder
        self.decoder = decoder
        self.output = output
        self.style = style

    @property
    def feeds_latent(self):
        return self.decoder.input_size > self.embedding.shape[1]

    def decoder_static(self, z):
        return self.decoder.project_static(z) if self.feeds_latent else None

    def decoder_step(self, ids, h, c, static=None):
        """Advance the decoder one token; returns (logits, h, c)."""
        x = T.embedding(self.embedding, ids)
        dec = self.decoder
        W = dec.W if x.shape[1] == dec.input_size else dec.W[:, :x.shape[1]]
        h, c = dec.step(x @ W.T + dec.b, h, c, static)
        return self.output(h), h, c

    @property
    def hidden_size(self):
        return self.encoder.hidden_size

    @property
    def vocab_size(self):
        return self.embedding.shape[0]


class TransferNet(Module):
    """h -> h -> h map: tanh hidden layer, linear output, unit-normalized."""

    def __init__(self, layer1, layer2):
        self.layer1 = layer1
        self.layer2 = layer2

    def __call__(self, z):
        return T.l2_normalize(self.layer2(T.tanh(self.layer1(z))))


class IdentityMap(Module):
    """Parameter-free stand-in for a TransferNet that returns its input."""

    def __call__(self, z):
        return z


class Discriminator(Module):
    """h -> h -> 1 classifier with tanh then logistic output."""

    def __init__(self, layer1, layer2):
        self.layer1 = layer1
        self.layer2 = layer2

    def __call__(self, z):
        p = T.sigmoid(self.layer2(T.tanh(self.layer1(z))))
        return T.reshape(p, (z.shape[0],))


class CaeModel(Module):
    def __init__(self, ae1, ae2, t12, t21, d1, d2):
        self.ae1, self.ae2 = ae1, ae2
        self.t12, self.t21 = t12, t21
        self.d1, self.d2 = d1, d2
        widths = {ae1.hidden_size, ae2.hidden_size}
        if len(widths) != 1:
            raise ConfigError("autoencoders disagree on hidden size")

    @property
    def hidden_size(self):
        return self.ae1.hidden_size

    @property
    def vocab_size(self):
        return self.ae1.vocab_size

    def autoencoder(self, style):
        return self.ae1 if style == 1 else self.ae2

    def transfer_net(self, direction):
        return self.t12 if direction == "1to2" else self.t21

    def discriminator(self, style):
        return self.d1 if style == 1 else self.d2

    def groups(self):
        """Parameter groups updated by the three training phases."""
        ae = self.ae1.parameters()
        ae += [p for p in self.ae2.parameters() if all(p is not q for q in ae)]
        return {
            "autoencoders": ae,
            "transfer": self.t12.parameters() + self.t21.parameters(),
            "discriminators": self.d1.parameters() + self.d2.parameters(),
        }

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ContractError(f"parameter names do not match: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


# construction

def _uniform(rng, r, *shape):
    return rng.uniform(-r, r, size=shape)


def _linear(rng, r, n_in, n_out):
    return Linear(_uniform(rng, r, n_out, n_in), _uniform(rng, r, n_out))


def _lstm(rng, r, n_in, n):
    return LstmCell(_uniform(rng, r, 4 * n, n_in), _uniform(rng, r, 4 * n, n), _uniform(rng, r, 4 * n))


def _autoencoder(rng, r, vocab_size, n, style, feed_latent):
    emb = _uniform(rng, r, vocab_size, n)
    enc = _lstm(rng, r, n, n)
    dec = _lstm(rng, r, 2 * n if feed_latent else n, n)
    out = _linear(rng, r, n, vocab_size)
    return StyleAutoencoder(emb, enc, dec, out, style)


def _near_identity_transfer(rng, n, noise=0.01):
    def layer():
        return Linear(np.eye(n) + _uniform(rng, noise, n, n), np.zeros(n))
    return TransferNet(layer(), layer())


def init_model(config, vocab_size, seed=None):
    """Uniform init in [-1/sqrt(h), 1/sqrt(h)], deterministic per seed.

    ``config.share_word_layers`` makes both autoencoders use one embedding
    table and one vocabulary projection; encoder and decoder LSTMs stay
    per-style. ``config.mirror_init`` starts the second autoencoder's LSTMs
    from the same draw as the first. ``config.transfer_init`` is "identity"
    (identity weights plus small noise, zero bias) or "uniform".
    """
    n = int(config.hidden)
    if n < 2:
        raise ConfigError(f"hidden size must be >= 2, got {n}")
    if vocab_size <= 4:
        raise ConfigError(f"vocabulary too small: {vocab_size}")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    r = 1.0 / np.sqrt(n)
    feed = getattr(config, "decoder_feed_latent", True)
    ae1 = _autoencoder(rng, r, vocab_size, n, 1, feed)
    if getattr(config, "mirror_init", False):
        ae2 = StyleAutoencoder(ae1.embedding.data.copy(),
                               LstmCell(*(p.data.copy() for p in ae1.encoder.parameters())),
                               LstmCell(*(p.data.copy() for p in ae1.decoder.parameters())),
                               Linear(ae1.output.weight.data.copy(), ae1.output.bias.data.copy()),
                               2)
    else:
        ae2 = _autoencoder(rng, r, vocab_size, n, 2, feed)
    if getattr(config, "share_word_layers", False):
        ae2.embedding = ae1.embedding
        ae2.output = ae1.output
    kind = getattr(config, "transfer_init", "uniform")
    if kind == "identity":
        t12, t21 = _near_identity_transfer(rng, n), _near_identity_transfer(rng, n)
    elif kind == "uniform":
        t12 = TransferNet(_linear(rng, r, n, n), _linear(rng, r, n, n))
        t21 = TransferNet(_linear(rng, r, n, n), _linear(rng, r, n, n))
    else:
        raise ConfigError(f"unknown transfer_init {kind!r}")
    d1 = Discriminator(_linear(rng, r, n, n), _linear(rng, r, n, 1))
    d2 = Discriminator(_linear(rng, r, n, n), _linear(rng, r, n, 1))
    return CaeModel(ae1, ae2, t12, t21, d1, d2)


# forward computations

def encode(ae, batch):
    """Final encoder hidden state at each row's true length, unit-normalized."""
    if batch.style != ae.style:
        raise ContractError(f"batch of style {batch.style} given to autoencoder {ae.style}")
    if np.any(batch.lengths < 1):
        raise ContractError("cannot encode a zero-length sequence")
    n = ae.hidden_size
    b = batch.size
    x = T.embedding(ae.embedding, batch.inputs)
    x_proj = ae.encoder.project_inputs(x)
    zeros = Tensor(np.zeros((b, n)))
    ragged = None if np.all(batch.lengths == batch.inputs.shape[1]) else batch.lengths
    _, h, _ = ae.encoder.run(x_proj, zeros, zeros, ragged)
    return T.l2_normalize(h)


def decoder_logits(ae, z, dec_inputs):
    """Logits (B, L, V) from initial state (z, 0) and the given input ids."""
    b, length = dec_inputs.shape
    if z.shape != (b, ae.hidden_size):
        raise DimensionError(f"latent shape {z.shape} does not match batch ({b}, {ae.hidden_size})")
    x = T.embedding(ae.embedding, dec_inputs)
    x_proj = ae.decoder.project_inputs(x)
    outputs, _, _ = ae.decoder.run(x_proj, z, Tensor(np.zeros(z.shape)), static=ae.decoder_static(z))
    hs = T.stack(outputs, axis=1)
    flat = ae.output(T.reshape(hs, (b * length, ae.hidden_size)))
    return T.reshape(flat, (b, length, ae.vocab_size))


def decode_teacher_forced(ae, z, batch):
    """Teacher-forced decoder logits; step t sees the gold tokens before t."""
    return decoder_logits(ae, z, batch.decoder_inputs)


def transfer(net, z):
    return net(z)


def cycle_map(model, z, direction):
    if direction == "1to2to1":
        return model.t21(model.t12(z))
    if direction == "2to1to2":
        return model.t12(model.t21(z))
    raise ValueError(f"unknown cycle direction {direction!r}")


def discriminate(d, z):
    if z.ndim != 2 or z.shape[1] != d.layer1.weight.shape[1]:
        raise DimensionError(f"latent width {z.shape} does not match discriminator")
    return d(z)
