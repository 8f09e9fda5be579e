import hashlib
import math

import numpy as np
import pytest

from cae import tensor as T
from cae.data import Corpus
from cae.errors import CheckpointError, ConfigError, TrainingDivergenceError
from cae.losses import reconstruction_loss
from cae.model import decode_teacher_forced, encode, init_model
from cae.trainer import (TrainConfig, epoch_batches, format_step_record, format_validation_record,
                         load_checkpoint, make_train_state, parse_metrics, read_checkpoint, save_checkpoint,
                         train, train_step)

from conftest import toy_batches, toy_config


def digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


def corpora(rng, n1=9, n2=5, vocab=8):
    mk = lambda style, n: Corpus(style, [list(rng.integers(4, vocab, rng.integers(1, 6))) for _ in range(n)])
    return mk(1, n1), mk(2, n2)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda2=-1)
    with pytest.raises(ConfigError):
        TrainConfig(disc_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(hidden=1)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    assert TrainConfig().lambdas == (0.1, 1.0, 1.0)


def test_config_text_roundtrip(tmp_path):
    cfg = TrainConfig(hidden=32, lambda3=0.5, no_cycle=True, optimizer="sgd")
    cfg.save(tmp_path / "c.txt")
    assert TrainConfig.load(tmp_path / "c.txt") == cfg
    assert "lambda3=0.5\n" in cfg.to_text()
    with pytest.raises(ConfigError):
        TrainConfig.from_text("bogus=1\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("hidden=abc\n")


def test_ablation_flags_fold_into_lambdas():
    assert TrainConfig(no_cycle=True).resolved().lambdas == (0.1, 1.0, 0.0)
    assert TrainConfig(no_discriminators=True).resolved().lambdas == (0.1, 0.0, 1.0)


def test_phases_touch_only_their_group(monkeypatch):
    model = init_model(toy_config(), 8, seed=0)
    cfg = toy_config(disc_steps=2)
    state = make_train_state(model, cfg)
    groups = model.groups()
    changed = []
    for opt in (state.disc_opt, state.ae_opt, state.gen_opt):
        orig = opt.step

        def step(orig=orig):
            before = {k: digest(v) for k, v in groups.items()}
            orig()
            after = {k: digest(v) for k, v in groups.items()}
            changed.append(sorted(k for k in groups if before[k] != after[k]))

        monkeypatch.setattr(opt, "step", step)
    train_step(model, *toy_batches(), cfg, state)
    assert changed == [["discriminators"], ["discriminators"], ["autoencoders"], ["transfer"]]


def test_zero_learning_rates_leave_parameters_unchanged():
    model = init_model(toy_config(), 8, seed=0)
    before = digest(model.parameters())
    cfg = toy_config(lr_ae=0.0, lr_gen=0.0, lr_disc=0.0)
    train_step(model, *toy_batches(), cfg, make_train_state(model, cfg))
    assert digest(model.parameters()) == before


def test_transfer_nets_frozen_without_cycle_and_discriminators(rng):
    c1, c2 = corpora(rng)
    model = init_model(toy_config(), 8, seed=0)
    before = digest(model.groups()["transfer"])
    train(c1, c2, toy_config(no_cycle=True, no_discriminators=True, epochs=2), model=model)
    assert digest(model.groups()["transfer"]) == before


def test_reduces_to_plain_autoencoders():
    cfg = toy_config(lambda2=0.0, lambda3=0.0, no_discriminators=True, share_word_layers=False)
    model = init_model(cfg, 8, seed=0)
    ref = init_model(cfg, 8, seed=0)
    state = make_train_state(model, cfg)
    opt = T.Adam(ref.groups()["autoencoders"], cfg.lr_ae)
    for _ in range(3):
        b1, b2 = toy_batches()
        train_step(model, b1, b2, cfg, state)
        with T.Tape():
            loss = reconstruction_loss(ref, b1, b2) * 0.1
            T.backward(loss, params=ref.groups()["autoencoders"])
        opt.step()
    for (n, p), (_, q) in zip(model.named_parameters(), ref.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_step_breakdown_is_complete(toy_model):
    bd = train_step(toy_model, *toy_batches(), toy_config(), make_train_state(toy_model, toy_config()))
    assert bd.is_finite()
    assert bd.total == pytest.approx(0.1 * bd.recon + bd.gen_adv_12 + bd.gen_adv_21 + bd.cycle)


def test_divergence_reports_step():
    model = init_model(toy_config(), 8, seed=0)
    model.ae1.output.bias.data[:] = np.nan
    state = make_train_state(model, toy_config())
    state.step = 41
    with pytest.raises(TrainingDivergenceError) as info:
        train_step(model, *toy_batches(), toy_config(), state)
    assert info.value.step == 42


def test_zero_epochs_returns_initial_model(rng):
    c1, c2 = corpora(rng)
    model = init_model(toy_config(), 8, seed=0)
    before = digest(model.parameters())
    out, log = train(c1, c2, toy_config(epochs=0), model=model)
    assert out is model and digest(out.parameters()) == before and log.steps == []


def test_training_is_deterministic(rng, tmp_path):
    c1, c2 = corpora(rng)
    runs = []
    for k in range(2):
        m, log = train(c1, c2, toy_config(epochs=2), vocab_size=8, valid=(c1, c2),
                       metrics_path=tmp_path / f"m{k}.txt")
        runs.append((m, log))
    (m1, l1), (m2, l2) = runs
    assert digest(m1.parameters()) == digest(m2.parameters())
    assert [(s, e, b) for s, e, b in l1.steps] == [(s, e, b) for s, e, b in l2.steps]
    assert (tmp_path / "m0.txt").read_bytes() == (tmp_path / "m1.txt").read_bytes()


def test_unequal_corpora_recycle_the_smaller(rng):
    c1, c2 = corpora(rng, n1=11, n2=3)
    pairs = epoch_batches(c1, c2, toy_config(batch_size=2), 0)
    assert len(pairs) == 6
    assert all(b1.style == 1 and b2.style == 2 for b1, b2 in pairs)
    first = sorted(i for b1, _ in pairs for i in b1.index.tolist())
    assert first == list(range(11))


def test_train_log_and_metrics_file(rng, tmp_path):
    c1, c2 = corpora(rng)
    _, log = train(c1, c2, toy_config(epochs=2), vocab_size=8, valid=(c1, c2), metrics_path=tmp_path / "m.txt")
    steps, valid = parse_metrics((tmp_path / "m.txt").read_text())
    assert [s for s, _, _ in steps] == [s for s, _, _ in log.steps] == list(range(1, len(steps) + 1))
    assert [b for _, _, b in steps] == [b for _, _, b in log.steps]
    assert [e for e, _ in valid] == [-1, 0, 1]
    assert len(log.timings) == 2


def test_record_formats():
    from cae.losses import total_loss
    bd = total_loss(1.5, 0.5, 0.25, 1.25, 1.0, 0.125)
    line = format_step_record(3, 0, bd)
    assert line.startswith("step=3 epoch=0 recon=1.5 ")
    assert parse_metrics(line + "\n" + format_validation_record(0, 0.5))[0][0][2] == bd


def test_checkpoint_roundtrip_and_forward_equivalence(toy_model, tmp_path, batches):
    cfg = toy_config()
    save_checkpoint(toy_model, tmp_path / "m.ckpt", cfg, "abc")
    model, cfg2, header = load_checkpoint(tmp_path / "m.ckpt", "abc")
    assert cfg2 == cfg and header["vocab_sha256"] == "abc"
    for (n, p), (_, q) in zip(toy_model.named_parameters(), model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    a = decode_teacher_forced(toy_model.ae1, encode(toy_model.ae1, batches[0]), batches[0]).data
    b = decode_teacher_forced(model.ae1, encode(model.ae1, batches[0]), batches[0]).data
    assert np.array_equal(a, b)
    assert model.ae1.embedding is model.ae2.embedding


def test_checkpoint_corruption(toy_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(toy_model, path, toy_config(), "abc")
    raw = path.read_bytes()
    for name, blob in (("trunc", raw[:-8]), ("head", raw[:10]), ("magic", b"X" + raw[1:]),
                       ("tail", raw + b"\0"), ("version", raw[:8] + b"\x09" + raw[9:])):
        bad = tmp_path / name
        bad.write_bytes(blob)
        with pytest.raises(CheckpointError):
            read_checkpoint(bad)
    with pytest.raises(CheckpointError, match="vocabulary hash"):
        load_checkpoint(path, "other")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")


def test_best_checkpoint_written(rng, tmp_path):
    c1, c2 = corpora(rng)
    train(c1, c2, toy_config(epochs=1), vocab_size=8, valid=(c1, c2), checkpoint_dir=tmp_path)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "model.ckpt").exists()


def test_validation_loss_decreases_on_tiny_corpus(rng):
    c1, c2 = corpora(rng, n1=6, n2=6)
    _, log = train(c1, c2, toy_config(hidden=8, epochs=30, lr_ae=1e-2), vocab_size=8, valid=(c1, c2))
    assert log.final_validation < log.initial_validation
    assert all(math.isfinite(v) for _, v in log.validation)
