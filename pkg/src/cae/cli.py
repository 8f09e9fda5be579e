"""Command-line entry point: synth, train, transfer, evaluate, ablate.

Exit codes: 0 ok, 2 configuration or usage error, 3 file I/O error,
4 training divergence. Diagnostics go to stderr; stdout carries one JSON
record per progress event.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import synthetic
from .data import Corpus, Vocabulary, build_vocabulary, read_sentences, split_sentences, write_sentences
from .errors import CheckpointError, ConfigError, ContractError, TrainingDivergenceError
from .evaluation import LmConfig, evaluate, train_classifier, train_lm
from .inference import transfer_file, transfer_sentences
from .trainer import PRESETS, TrainConfig, load_checkpoint, train

log = logging.getLogger("cae")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
SPLIT_RATIOS = (0.7, 0.1, 0.2)
SPLIT_NAMES = ("train", "valid", "test")
ABLATIONS = (
    ("CAE", {}),
    ("w/o cycle-consistency", {"no_cycle": True}),
    ("w/o discriminators", {"no_discriminators": True}),
)


class UsageError(ConfigError):
    pass


def _emit(record):
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# configuration

_FLAG_FIELDS = {
    "hidden": "hidden", "lambda1": "lambda1", "lambda2": "lambda2", "lambda3": "lambda3",
    "epochs": "epochs", "batch_size": "batch_size", "seed": "seed",
    "lr_ae": "lr_ae", "lr_gen": "lr_gen", "lr_disc": "lr_disc", "disc_steps": "disc_steps",
    "max_len": "max_len", "vocab_size": "vocab_size",
}


def add_train_flags(p):
    p.add_argument("--style1-file", required=True)
    p.add_argument("--style2-file", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value config file; flags given explicitly override it")
    p.add_argument("--preset", choices=("yelp", "yahoo"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-ae", type=float)
    p.add_argument("--lr-gen", type=float)
    p.add_argument("--lr-disc", type=float)
    p.add_argument("--disc-steps", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--no-cycle", action="store_true", default=None)
    p.add_argument("--no-discriminators", action="store_true", default=None)
    p.add_argument("--lowercase", action="store_true", default=None)


def resolve_config(args):
    """Defaults, then preset, then keys present in --config, then explicit flags."""
    values = {}
    if getattr(args, "preset", None):
        values.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise OSError(f"cannot read config {args.config}: {e}") from e
        parsed = TrainConfig.from_text(text).to_dict()
        keys = {line.split("=", 1)[0].strip() for line in text.splitlines()
                if "=" in line and not line.strip().startswith("#")}
        values.update({k: parsed[k] for k in keys})
    for flag, key in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    for flag in ("no_cycle", "no_discriminators", "lowercase"):
        if getattr(args, flag, None):
            values[flag] = True
    return TrainConfig.from_dict(values)


# train

def build_manifest(config, style_files, out):
    """Everything that determines a run's artifacts, with paths relative to ``out``."""
    resolved = config.resolved()
    return {
        "tool": "cae",
        "version": __version__,
        "config": resolved.to_dict(),
        "seed": config.seed,
        "corpora": [{"style": i + 1, "path": str(f), "sha256": file_sha256(f)}
                    for i, f in enumerate(style_files)],
        "split_ratios": list(SPLIT_RATIOS),
        "artifacts": {
            "vocab": "vocab.txt",
            "config": "config.txt",
            "metrics": "metrics.txt",
            "checkpoint": "model.ckpt",
            "best_checkpoint": "best.ckpt",
            "splits": {f"style{s}.{n}": f"splits/style{s}.{n}.txt" for s in (1, 2) for n in SPLIT_NAMES},
        },
    }


def run_training(config, style1_file, style2_file, out):
    """The full train pipeline; returns (model, vocab, splits) with splits[style][name] as token lists."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = (style1_file, style2_file)
    for f in files:
        if not Path(f).is_file():
            raise OSError(f"corpus file not found: {f}")
    manifest = build_manifest(config, files, out)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    config.resolved().save(out / "config.txt")

    splits = {}
    for style, f in zip((1, 2), files):
        sentences, _ = read_sentences(f, config.lowercase)
        if not sentences:
            raise ConfigError(f"corpus {f} has no sentences")
        parts = split_sentences(sentences, SPLIT_RATIOS, config.seed * 2 + style)
        splits[style] = dict(zip(SPLIT_NAMES, parts))
        (out / "splits").mkdir(exist_ok=True)
        for name, part in splits[style].items():
            write_sentences(out / "splits" / f"style{style}.{name}.txt", part)
    for style in (1, 2):
        if not splits[style]["train"]:
            raise ConfigError(f"style {style} training split is empty")

    vocab = build_vocabulary([out / "splits" / f"style{s}.train.txt" for s in (1, 2)], config.vocab_size)
    vocab.save(out / "vocab.txt")

    def corpus(style, name):
        return Corpus(style, [vocab.encode(s) for s in splits[style][name]])

    valid = None
    if splits[1]["valid"] and splits[2]["valid"]:
        valid = (corpus(1, "valid"), corpus(2, "valid"))

    def progress(epoch, tlog):
        rec = {"event": "epoch", "epoch": epoch, "step": tlog.steps[-1][0] if tlog.steps else 0}
        if tlog.steps:
            rec.update({k: float(v) for k, v in tlog.steps[-1][2].as_dict().items()})
        if tlog.validation:
            rec["valid_recon"] = tlog.validation[-1][1]
        _emit(rec)

    model, tlog = train(corpus(1, "train"), corpus(2, "train"), config, vocab_size=len(vocab),
                        valid=valid, vocab_digest=vocab.digest(), metrics_path=out / "metrics.txt",
                        checkpoint_dir=out, progress=progress)
    _emit({"event": "done", "checkpoint": str(out / "model.ckpt"), "steps": len(tlog.steps)})
    return model, vocab, splits, tlog


def cmd_train(args):
    config = resolve_config(args)
    run_training(config, args.style1_file, args.style2_file, args.out)
    return EXIT_OK


# transfer

def _load_model(checkpoint, vocab_path):
    try:
        vocab = Vocabulary.load(vocab_path)
    except OSError as e:
        raise OSError(f"cannot read vocabulary {vocab_path}: {e}") from e
    try:
        model, config, _ = load_checkpoint(checkpoint, vocab.digest())
    except CheckpointError as e:
        if not Path(checkpoint).exists():
            raise OSError(str(e)) from e
        raise
    return model, config, vocab


def cmd_transfer(args):
    vocab_path = args.vocab or str(Path(args.checkpoint).parent / "vocab.txt")
    model, config, vocab = _load_model(args.checkpoint, vocab_path)
    if not Path(args.input).is_file():
        raise OSError(f"input file not found: {args.input}")
    n = transfer_file(model, vocab, args.input, args.output, args.direction,
                      max_len=args.max_len or config.max_len, lowercase=config.lowercase)
    _emit({"event": "transfer", "direction": args.direction, "lines": n, "output": args.output})
    return EXIT_OK


# evaluate

def _read_tokens(path):
    try:
        return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e


def lm_config_from(args):
    return LmConfig(embedding=args.lm_embedding, hidden=args.lm_hidden, dropout=args.lm_dropout,
                    epochs=args.lm_epochs)


def evaluation_models(vocab, real1, real2, lm_config, seed):
    """Style classifier and real-text language model shared by every evaluated output set."""
    ids1 = [vocab.encode(s) for s in real1 if s]
    ids2 = [vocab.encode(s) for s in real2 if s]
    fit = train_classifier(ids1, ids2, len(vocab), seed=seed)
    lm = train_lm(ids1 + ids2, len(vocab), lm_config, seed)
    return fit, lm


def cmd_evaluate(args):
    for name in ("transferred", "source", "style1_file", "style2_file", "heldout", "vocab"):
        path = getattr(args, name)
        if not path or not Path(path).is_file():
            raise UsageError(f"missing input --{name.replace('_', '-')}: {path}")
    vocab = Vocabulary.load(args.vocab)
    outputs, sources = _read_tokens(args.transferred), _read_tokens(args.source)
    if len(outputs) != len(sources):
        raise UsageError(f"{args.transferred} has {len(outputs)} lines, {args.source} has {len(sources)}")
    pairs = [(s, o) for s, o in zip(sources, outputs) if s]
    lm_cfg = lm_config_from(args)
    fit, lm = evaluation_models(vocab, _read_tokens(args.style1_file), _read_tokens(args.style2_file),
                                lm_cfg, args.seed)
    heldout = [s for s in _read_tokens(args.heldout) if s]
    report = evaluate([s for s, _ in pairs], [o for _, o in pairs], args.target_style, fit, lm,
                      heldout, vocab, lm_cfg, args.seed, args.rppl_min)
    report.save(args.report)
    _emit({"event": "evaluate", "report": args.report, **report.metrics()})
    return EXIT_OK


# ablate

def format_ablation_table(rows):
    """rows: [(name, EvalReport)] -> aligned text table."""
    head = f"{'Model':<24}{'Transfer':>10}{'BLEU':>8}{'PPL':>9}{'RPPL':>10}"
    lines = [head]
    for name, r in rows:
        lines.append(f"{name:<24}{100 * r.transfer_rate:>9.1f}%{r.bleu:>8.2f}{r.ppl:>9.1f}{r.rppl:>10.1f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    base = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lm_cfg = lm_config_from(args)
    rows = []
    models = None
    for name, overrides in ABLATIONS:
        cfg = TrainConfig.from_dict({**base.to_dict(), **overrides})
        run_dir = out / name.replace("/", "").replace(" ", "-").lower()
        model, vocab, splits, _ = run_training(cfg, args.style1_file, args.style2_file, run_dir)
        if models is None:
            models = evaluation_models(vocab, splits[1]["train"], splits[2]["train"], lm_cfg, base.seed)
        report = evaluate_both_directions(model, vocab, splits, models, cfg, lm_cfg, base.seed, args.rppl_min)
        report.save(run_dir / "report.txt")
        rows.append((name, report))
        _emit({"event": "ablation", "variant": name, **report.metrics()})
    table = format_ablation_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    sys.stderr.write(table)
    return EXIT_OK


def evaluate_both_directions(model, vocab, splits, models, config, lm_config, seed, rppl_min):
    """Transfer each style's test split to the other style and score the union."""
    fit, lm = models
    sources, outputs, targets = [], [], []
    for direction, src, tgt in (("1to2", 1, 2), ("2to1", 2, 1)):
        test = splits[src]["test"]
        sources += test
        outputs += transfer_sentences(model, vocab, test, direction, config.max_len)
        targets += [tgt] * len(test)
    heldout = splits[1]["test"] + splits[2]["test"]
    return evaluate(sources, outputs, targets, fit, lm, heldout, vocab, lm_config, seed, rppl_min)


# synth

def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s1, s2 = synthetic.generate_pair(args.n, args.seed, args.zipf)
    write_sentences(out / "style1.txt", s1)
    write_sentences(out / "style2.txt", s2)
    _emit({"event": "synth", "n": args.n, "style1": str(out / "style1.txt"), "style2": str(out / "style2.txt")})
    return EXIT_OK


# entry point

def _add_lm_flags(p):
    d = LmConfig()
    p.add_argument("--lm-embedding", type=int, default=d.embedding)
    p.add_argument("--lm-hidden", type=int, default=d.hidden)
    p.add_argument("--lm-dropout", type=float, default=d.dropout)
    p.add_argument("--lm-epochs", type=int, default=d.epochs)
    p.add_argument("--rppl-min", type=int, default=1000, help="minimum generated sentences for RPPL")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="cae", description="Cycle-consistent adversarial autoencoders for text style transfer")
    p.add_argument("--version", action="version", version=f"cae {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="build vocabulary, split, train, checkpoint")
    add_train_flags(t)
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transfer", help="transfer a file of sentences to the other style")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--vocab", help="defaults to vocab.txt next to the checkpoint")
    x.add_argument("--input", required=True)
    x.add_argument("--output", required=True)
    x.add_argument("--direction", required=True, choices=("1to2", "2to1"))
    x.add_argument("--max-len", type=int)
    x.set_defaults(func=cmd_transfer)

    e = sub.add_parser("evaluate", help="Transfer, BLEU, PPL and RPPL of a transferred file")
    e.add_argument("--transferred", required=True)
    e.add_argument("--source", required=True)
    e.add_argument("--style1-file", required=True, help="real style-1 text for classifier and LM training")
    e.add_argument("--style2-file", required=True)
    e.add_argument("--heldout", required=True, help="real held-out text for RPPL")
    e.add_argument("--vocab", required=True)
    e.add_argument("--target-style", type=int, choices=(1, 2), required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int, default=0)
    _add_lm_flags(e)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train full, no-cycle and no-discriminator variants and tabulate")
    add_train_flags(a)
    _add_lm_flags(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write two template-grammar corpora with disjoint style markers")
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--zipf", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"cae: error: {e}\n")
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergenceError as e:
        sys.stderr.write(f"cae: training diverged: {e}\n")
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, ContractError) as e:
        sys.stderr.write(f"cae: error: {e}\n")
        return EXIT_CONFIG
    except OSError as e:
        sys.stderr.write(f"cae: I/O error: {e}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
