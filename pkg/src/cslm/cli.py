"""Command-line entry point: ``cslm {synth,prep,train,eval,sample,analyze}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import corpus as C
from . import numerics as nx
from .model import ModelError, build_model, load_model
from .seqgan import (
    NGRAM_LABELS,
    NoveltyError,
    ngram_novelty,
    novelty_tsv,
    rounds_tsv,
    sample_sequences,
    same_source_pretrain,
)
from .training import (
    decomposed_perplexity,
    decomposition_tsv,
    log_tsv,
    monolingual_corpus,
    perplexity,
    perplexity_tsv,
    pretrain_then_finetune,
    timing_tsv,
    train_mle,
)

log = logging.getLogger("cslm")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
LAYOUT = ("splits", "checkpoints", "logs", "reports")
PARTS = ("train", "dev", "test")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _layout(out: Path) -> None:
    for d in LAYOUT:
        (out / d).mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------
# synth / prep


def cmd_synth(out, seed=0, n=1000, switch_prob=0.2, mean_len=8.0, vocab_size=50, start_lang=None) -> Path:
    lines = C.synth_corpus(seed, n, switch_prob, (vocab_size, vocab_size), mean_len, start_lang=start_lang)
    out = Path(out)
    _write(out, "".join(line + "\n" for line in lines))
    return out


def cmd_prep(corpus_in, out_dir, min_count: int = 1, seed: int = 0, features=None, lang_feature: bool = False) -> C.Vocabulary:
    """Tokenise, split 80/10/10, build the vocabulary on the training part and
    write ``vocab.tsv``, ``splits/*.txt`` (plus ``*.feat``) and ``reports/stats.tsv``.

    A feature file has one line per non-empty corpus line.
    """
    out = Path(out_dir)
    _layout(out)
    toks, _ = C.tokenize_lines(C.read_lines(corpus_in))
    if not toks:
        raise C.DataError(f"{corpus_in}: empty corpus")
    feats = C.load_features(features, toks) if features else None
    if lang_feature:
        lf = C.lang_features(toks)
        feats = lf if feats is None else C.merge_features(feats, lf)
    split = C.split_corpus(list(range(len(toks))), seed)
    vocab = C.build_vocabulary([toks[i] for i in split.train], min_count)
    vocab.save(out / "vocab.tsv")
    for name, idx in split.parts().items():
        _write(out / "splits" / f"{name}.txt", "".join(C.render([t.text for t in toks[i]]) + "\n" for i in idx))
        if feats is not None:
            _write(out / "splits" / f"{name}.feat", C.format_features(feats.cardinalities, [feats.sequences[i] for i in idx]))
    stats = C.corpus_stats(C.CorpusSplit(*([toks[i] for i in idx] for idx in split.parts().values()), seed=seed))
    _write(out / "reports" / "stats.tsv", C.stats_tsv({k.capitalize(): v for k, v in stats.items()}))
    return vocab


def load_corpus(path, vocab: C.Vocabulary, with_features: bool = False) -> tuple[list[C.Utterance], dict[str, int]]:
    """Encode a tokenised corpus file, attaching ``<stem>.feat`` when asked."""
    path = Path(path)
    toks, _ = C.tokenize_lines(C.read_lines(path))
    decl: dict[str, int] = {}
    feats = None
    feat_path = path.with_suffix(".feat")
    if with_features and feat_path.exists():
        fs = C.load_features(feat_path, toks)
        decl, feats = fs.cardinalities, fs.sequences
    return C.encode_all(toks, vocab, feats), decl


def load_split(out: Path, vocab: C.Vocabulary) -> tuple[C.CorpusSplit, dict[str, int]]:
    parts, decl = {}, {}
    for name in PARTS:
        parts[name], d = load_corpus(out / "splits" / f"{name}.txt", vocab, with_features=True)
        decl = decl or d
    return C.CorpusSplit(**parts), decl


# --------------------------------------------------------------------------
# train


def cmd_train(config_path=None, overrides: list[str] | None = None, out_dir=None) -> Path:
    overrides = list(overrides or [])
    cfg = cfgmod.resolve(config_path, overrides)
    if out_dir is None:
        raise cfgmod.ConfigError(["an output directory is required"])
    out = Path(out_dir)
    _layout(out)
    _write(out / "config.resolved", cfgmod.dump(cfg))
    if not (out / "vocab.tsv").exists():
        if not cfg["data.corpus"]:
            raise cfgmod.ConfigError([f"{out} is not prepared and data.corpus is unset"])
        cmd_prep(cfg["data.corpus"], out, cfg["data.min_count"], cfg["data.split_seed"],
                 cfg["data.features"] or None, cfg["data.lang_feature"])
    vocab = C.Vocabulary.load(out / "vocab.tsv")
    split, decl = load_split(out, vocab)
    if not split.train:
        raise C.DataError("empty training split")
    mcfg = cfgmod.model_config(cfg, decl)
    tcfg = cfgmod.train_config(cfg)
    pcfg = cfgmod.pretrain_config(cfg)
    gcfg = cfgmod.gan_config(cfg)
    mode = cfg["pretrain.mode"]
    ckpt = out / "checkpoints"

    def on_best(model, rec):
        model.save(ckpt / f"best_{rec.phase}.ckpt", {"epoch": str(rec.epoch)})

    gan_result = samples = None
    log.info("training %s with pretraining mode %s", mcfg.kind, mode)
    if mode == "none":
        model = build_model(vocab, mcfg, seed=cfg["seed"])
        model, logs = train_mle(model, split, tcfg, on_best=on_best)
    elif mode == "monolingual":
        mono0, _ = load_corpus(cfg["data.mono0"], vocab)
        mono1, _ = load_corpus(cfg["data.mono1"], vocab)
        model = build_model(vocab, mcfg, seed=cfg["seed"])
        model, logs = pretrain_then_finetune(model, monolingual_corpus(mono0, mono1), split, pcfg, tcfg,
                                             pretrain_vocab=vocab, on_best=on_best)
    else:
        generator = mode.removeprefix("same-source-")
        res = same_source_pretrain(mcfg.kind, split, vocab, gcfg, tcfg, mcfg, pcfg, generator=generator,
                                   checkpoint_dir=ckpt, on_best=on_best)
        model, logs, gan_result, samples = res.model, res.logs, res.gan, res.samples

    model.save(ckpt / "final.ckpt")
    _write(out / "logs" / "train.tsv", log_tsv(logs))
    _write(out / "logs" / "timing.tsv", timing_tsv(logs))
    if gan_result is not None:
        _write(out / "logs" / "generator.tsv", log_tsv(gan_result.mle_logs))
        _write(out / "logs" / "gan.tsv", rounds_tsv(gan_result.rounds))
    label = _label(mcfg.kind, mode)
    row = {"Dev": perplexity(model, split.dev) if split.dev else None,
           "Test": perplexity(model, split.test) if split.test else None}
    _write(out / "reports" / "perplexity.tsv", perplexity_tsv({label: row}))
    if split.dev:
        _write(out / "reports" / "decomposed.tsv", decomposition_tsv({label: decomposed_perplexity(model, split.dev)}))
    if samples is not None:
        samples.save(out / "splits" / "pretrain.txt", vocab)
        _write(out / "reports" / "novelty.tsv", novelty_tsv({label: samples}, split.train))
    return out


def _label(kind: str, mode: str) -> str:
    name = "D-RNNLM" if kind == "dual" else "RNNLM"
    return {"none": name, "monolingual": f"Mono {name}", "same-source-naive": f"{name} naive",
            "same-source-scheduled": f"{name} scheduled", "same-source-seqgan": f"{name} SeqGAN"}[mode]


# --------------------------------------------------------------------------
# eval / sample / analyze


def _experiment_vocab(checkpoint, vocab_path=None) -> tuple[Path, C.Vocabulary]:
    exp = Path(checkpoint).resolve().parent.parent
    vpath = Path(vocab_path) if vocab_path else exp / "vocab.tsv"
    return exp, C.Vocabulary.load(vpath)


def _resolve_corpus(exp: Path, name) -> Path:
    return exp / "splits" / f"{name}.txt" if name in PARTS else Path(name)


def cmd_eval(checkpoint, eval_split="dev", decompose: bool = False, vocab_path=None, out=None) -> str:
    exp, vocab = _experiment_vocab(checkpoint, vocab_path)
    model = load_model(checkpoint, vocab)
    utts, _ = load_corpus(_resolve_corpus(exp, eval_split), vocab, with_features=bool(model.config.features))
    if not utts:
        raise C.DataError("empty evaluation set")
    label = f"{model.kind}:{Path(checkpoint).stem}"
    if decompose:
        d = decomposed_perplexity(model, utts)
        text = decomposition_tsv({label: d})
    else:
        text = perplexity_tsv({label: {str(eval_split): perplexity(model, utts)}})
    if out:
        _write(Path(out), text)
    return text


def cmd_sample(checkpoint, n=100, length=20, seed=0, train=None, out=None, novelty_out=None, vocab_path=None) -> str:
    exp, vocab = _experiment_vocab(checkpoint, vocab_path)
    model = load_model(checkpoint, vocab)
    samples = sample_sequences(model, n, length, nx.make_rng(seed), seed=seed)
    out = Path(out) if out else exp / "reports" / "samples.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    samples.save(out, vocab)
    ref, _ = load_corpus(_resolve_corpus(exp, train or "train"), vocab)
    text = novelty_tsv({Path(checkpoint).stem: samples}, ref)
    _write(Path(novelty_out) if novelty_out else out.with_name(out.stem + "_novelty.tsv"), text)
    return text


def cmd_analyze(corpus, reference=None, out=None) -> str:
    """Statistics of a raw corpus file, optionally with novelty against a reference file."""
    toks, _ = C.tokenize_lines(C.read_lines(corpus))
    counts = C.utterance_counts(toks)
    rows = list(counts.items()) + [("switch_rate", f"{C.switch_rate(toks):.6f}")]
    surf = [[t for t in u] for u in toks]
    for n, label in NGRAM_LABELS.items():
        types = set().union(*({tuple(u[i : i + n]) for i in range(len(u) - n + 1)} for u in surf)) if surf else set()
        rows.append((f"{label}_types", len(types)))
    if reference is not None:
        ref, _ = C.tokenize_lines(C.read_lines(reference))
        for n, label in NGRAM_LABELS.items():
            try:
                rows.append((f"{label}_novelty", f"{ngram_novelty(surf, ref, n):.4f}"))
            except NoveltyError:
                rows.append((f"{label}_novelty", "n/a"))
    text = "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows)
    if out:
        _write(Path(out), text)
    return text


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cslm", description="Code-switched language modelling toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic code-switched corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--switch-prob", type=float, default=0.2)
    s.add_argument("--mean-len", type=float, default=8.0)
    s.add_argument("--vocab-size", type=int, default=50)
    s.add_argument("--start-lang", type=int, choices=(0, 1), default=None)

    s = sub.add_parser("prep", help="tokenise, split and build the vocabulary")
    s.add_argument("corpus")
    s.add_argument("out_dir")
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="80/10/10", help="only 80/10/10 is supported")
    s.add_argument("--features", default=None)
    s.add_argument("--lang-feature", action="store_true")

    s = sub.add_parser("train", help="train a model into an experiment directory")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    s = sub.add_parser("eval", help="perplexity of a checkpoint on a split")
    s.add_argument("checkpoint")
    s.add_argument("split", nargs="?", default="dev")
    s.add_argument("--decompose", action="store_true")
    s.add_argument("--vocab", default=None)
    s.add_argument("--out", default=None)

    s = sub.add_parser("sample", help="draw fixed-length samples and report n-gram novelty")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--len", dest="length", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train", default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--vocab", default=None)

    s = sub.add_parser("analyze", help="corpus statistics, switch rate and n-gram counts")
    s.add_argument("corpus")
    s.add_argument("--reference", default=None)
    s.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.out, args.seed, args.n, args.switch_prob, args.mean_len, args.vocab_size, args.start_lang)
        elif args.command == "prep":
            if args.split != "80/10/10":
                raise cfgmod.ConfigError(["--split: only 80/10/10 is supported"])
            cmd_prep(args.corpus, args.out_dir, args.min_count, args.seed, args.features, args.lang_feature)
        elif args.command == "train":
            cmd_train(args.config, args.overrides, args.out)
        elif args.command == "eval":
            sys.stdout.write(cmd_eval(args.checkpoint, args.split, args.decompose, args.vocab, args.out))
        elif args.command == "sample":
            sys.stdout.write(cmd_sample(args.checkpoint, args.n, args.length, args.seed, args.train, args.out,
                                        vocab_path=args.vocab))
        elif args.command == "analyze":
            sys.stdout.write(cmd_analyze(args.corpus, args.reference, args.out))
    except cfgmod.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (C.DataError, ModelError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nx.NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
