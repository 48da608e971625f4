"""``advfusion`` command line: corpus and tokenizer preparation, adapter and
fusion training, evaluation, attention analysis and checkpoint tools.

Exit codes: 0 success, 1 data/config/usage error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from .adapters import Adapter, AdapterStack, attach
from .analysis import AttentionTrace, contributions, heatmap_export
from .autodiff import no_grad
from .checkpoint import inspect, load_checkpoint, save_checkpoint
from .corpus import gen_synthetic, load_jsonl, save_jsonl, split
from .errors import AdvFusionError, ConfigError, DataError
from .metrics import corpus_eval, format_report
from .model import ModelConfig, TransformerModel, count_parameters
from .tokenizer import Vocabulary, train_bpe
from .trainer import (PhaseSchedule, TrainConfig, encode_pairs, finetune, pad_batch, pretrain_backbone,
                      train_advfusion, train_fusion, train_language_adapter)

MODEL_KEYS = ("n_layers", "hidden", "n_heads", "ff_dim", "max_len", "n_decoder_layers", "dtype")
DEFAULTS = {
    "n_layers": 4, "hidden": 64, "n_heads": 4, "ff_dim": 256, "max_len": 128, "n_decoder_layers": 2,
    "dtype": "float32", "vocab_size": 1024, "batch_size": 8, "steps": 100, "lr": None, "eval_every": 0,
    "mask_rate": 0.15, "reduction": 8, "rank": 8, "alpha": 16, "split_seed": 0, "max_new": 32,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _coerce(value):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return None if value.lower() in ("none", "null", "") else value


def read_config(path):
    """Flat ``key=value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(value)
    return out


def _settings(args):
    s = dict(DEFAULTS)
    if args.config:
        s.update(read_config(args.config))
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            s[key] = v
    return s


def _train_cfg(args, s, steps=None):
    return TrainConfig(seed=args.seed, batch_size=int(s["batch_size"]), max_steps=int(s["steps"] if steps is None else steps),
                       lr=s["lr"], eval_every=int(s["eval_every"]), mask_rate=float(s["mask_rate"]), log_path=args.log)


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required for {args.command}")


def _corpus_split(args, s, which):
    corpus = load_jsonl(args.corpus)
    if which == "all":
        return corpus.examples, corpus
    parts = split(corpus, seed=int(s["split_seed"]))
    return parts.subset(which), corpus


def _load_model(args, s, vocab):
    """Model from --checkpoint-in or a fresh one seeded with --seed, plus stored adapters."""
    if args.checkpoint_in:
        ck = load_checkpoint(args.checkpoint_in)
        if ck.model.config.vocab != vocab.size:
            raise ConfigError(f"checkpoint vocabulary {ck.model.config.vocab} != tokenizer size {vocab.size}")
        return ck.model, ck.adapters
    cfg = ModelConfig(vocab=vocab.size, **{k: s[k] for k in MODEL_KEYS})
    return TransformerModel(cfg, seed=args.seed), {}


def _save(args, model, adapters=(), extra=None):
    if args.checkpoint_out:
        save_checkpoint(model, args.checkpoint_out, adapters=adapters, extra=extra)
        print(f"wrote {args.checkpoint_out}")


def _stack(adapters, languages, strict):
    tags = [l for l in languages if l in adapters]
    tags += sorted(t for t in adapters if t not in tags and adapters[t].kind == "language")
    if strict:
        missing = [l for l in languages if l not in adapters]
        if missing:
            raise DataError(f"no language adapter for {missing}")
    if not tags:
        raise DataError("checkpoint holds no language adapters")
    return AdapterStack([adapters[t] for t in tags])


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args, s):
    counts = [int(c) for c in args.counts.split(",")] if args.counts else None
    n = len(counts) if counts else args.n_langs
    corpus = gen_synthetic(n, counts, seed=args.seed)
    save_jsonl(corpus, args.out)
    print(json.dumps({"examples": len(corpus), "counts": corpus.counts, "low_resource": corpus.low_resource()}))


def cmd_tokenizer_train(args, s):
    _need(args, "corpus")
    corpus = load_jsonl(args.corpus)
    texts = [t for e in corpus.examples for t in (e.code, e.doc)]
    vocab = train_bpe(texts, int(s["vocab_size"]))
    vocab.save(args.out)
    print(json.dumps({"vocab_size": vocab.size, "merges": len(vocab.merges)}))


def _common_setup(args, s, which="train"):
    _need(args, "corpus", "vocab")
    vocab = Vocabulary.load(args.vocab)
    examples, corpus = _corpus_split(args, s, which)
    model, adapters = _load_model(args, s, vocab)
    return vocab, examples, corpus, model, adapters


def cmd_pretrain_base(args, s):
    vocab, examples, _, model, adapters = _common_setup(args, s, args.split)
    res = pretrain_backbone(model, examples, vocab, _train_cfg(args, s))
    print(json.dumps({"first_loss": res.losses[0] if res.losses else None, "last_loss": res.losses[-1] if res.losses else None}))
    _save(args, model, adapters.values())


def cmd_pretrain_lang_adapter(args, s):
    vocab, examples, corpus, model, adapters = _common_setup(args, s, args.split)
    langs = args.lang or corpus.languages
    summary = {}
    for i, lang in enumerate(langs):
        subset = [e for e in examples if e.lang == lang]
        ad = Adapter.create(model.config, lang, kind="language", reduction=int(s["reduction"]), seed=args.seed + 1000 + i)
        cfg = _train_cfg(args, s)
        cfg.seed = args.seed + i
        res = train_language_adapter(model, ad, subset, vocab, cfg)
        adapters[lang] = ad
        summary[lang] = {"first_loss": res.losses[0] if res.losses else None,
                         "last_loss": res.losses[-1] if res.losses else None}
    print(json.dumps(summary, sort_keys=True))
    _save(args, model, adapters.values())


def cmd_finetune(args, s):
    vocab, examples, _, model, adapters = _common_setup(args, s, args.split)
    res = finetune(model, args.mechanism, args.task, examples, vocab, _train_cfg(args, s),
                   reduction=int(s["reduction"]), rank=int(s["rank"]), alpha=float(s["alpha"]))
    print(json.dumps({"steps": len(res.losses), "last_loss": res.losses[-1] if res.losses else None}))
    _save(args, model, adapters.values())


def _fusion_common(args, s, advfusion):
    vocab, examples, corpus, model, adapters = _common_setup(args, s, args.split)
    if model.attachment is not None:
        raise ConfigError("input checkpoint already carries an attachment; start from a backbone with language adapters")
    stack = _stack(adapters, corpus.languages, strict=advfusion)
    if advfusion:
        p1 = args.phase1_steps if args.phase1_steps is not None else int(s["steps"]) // 2
        p2 = args.phase2_steps if args.phase2_steps is not None else int(s["steps"]) - p1
        sched = PhaseSchedule(p1, p2, args.exclusion_mode)
        attach(model, "advfusion", stack=stack, seed=args.seed, exclusion_mode=args.exclusion_mode)
        res = train_advfusion(model, stack, args.task, examples, vocab, sched, _train_cfg(args, s))
    else:
        attach(model, "fusion", stack=stack, seed=args.seed)
        res = train_fusion(model, stack, args.task, examples, vocab, _train_cfg(args, s))
    print(json.dumps({"steps": len(res.losses), "last_loss": res.losses[-1] if res.losses else None,
                      "stack": stack.tags}))
    _save(args, model)


def cmd_train_fusion(args, s):
    _fusion_common(args, s, advfusion=False)


def cmd_train_advfusion(args, s):
    _fusion_common(args, s, advfusion=True)


def cmd_eval(args, s):
    vocab, examples, _, model, _ = _common_setup(args, s, args.split)
    with no_grad():
        report = corpus_eval(model, examples, args.task, vocab, max_new=int(s["max_new"]), aggregate=args.aggregate)
    text = format_report(report)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    if args.log:
        with open(args.log, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"step": None, "phase": None, "language": None, "loss": None,
                                 "metric": json.loads(text)}) + "\n")


def cmd_analyze_attention(args, s):
    vocab, examples, _, model, _ = _common_setup(args, s, args.split)
    att = model.attachment
    if att is None or not hasattr(att, "stack"):
        raise ConfigError("attention analysis needs a fusion or advfusion checkpoint")
    pairs = encode_pairs(examples, vocab, args.task, model.config.max_len)
    trace = AttentionTrace(model.config.n_layers, att.stack.tags)
    with no_grad():
        for start in range(0, len(pairs), 32):
            model.encode(pad_batch([p.src for p in pairs[start : start + 32]]), trace=trace)
        report = contributions(trace)
        if args.out:
            report.to_csv(args.out)
        for layer, tag, m, _, pct in report.rows():
            print(f"layer {layer} {tag:>12s} mean={m:.4f} contribution={pct:6.2f}%")
        if args.heatmap is not None:
            if not 0 <= args.heatmap < len(pairs):
                raise DataError(f"--heatmap index {args.heatmap} outside split of {len(pairs)}")
            single = AttentionTrace(model.config.n_layers, att.stack.tags, per_token=True)
            model.encode(pairs[args.heatmap].src, trace=single)
            path = args.heatmap_out or "heatmap.csv"
            heatmap_export(single, vocab, path, example=0, layer=args.layer)
            print(f"wrote {path}")


def cmd_param_report(args, s):
    if args.checkpoint_in:
        model = load_checkpoint(args.checkpoint_in).model
    else:
        vocab = int(args.vocab_size_model or (Vocabulary.load(args.vocab).size if args.vocab else s["vocab_size"]))
        cfg = ModelConfig(vocab=vocab, **{k: s[k] for k in MODEL_KEYS})
        model = TransformerModel(cfg, seed=args.seed, materialize=False)
        if args.mechanism:
            kw = {"reduction": int(s["reduction"]), "rank": int(s["rank"]), "alpha": float(s["alpha"]), "seed": args.seed}
            if args.mechanism in ("fusion", "advfusion"):
                tags = [f"lang{i}" for i in range(args.n_adapters)]
                kw["stack"] = AdapterStack([Adapter.create(cfg, t, "language", kw["reduction"], args.seed + i)
                                            for i, t in enumerate(tags)])
            attach(model, args.mechanism, **kw)
    from .trainer import MECHANISM_GROUPS, TrainablePartition

    mech = model.attachment.mechanism if model.attachment else "full"
    if mech in MECHANISM_GROUPS:
        TrainablePartition.from_groups(model, MECHANISM_GROUPS[mech](model)).apply(model)
    out = {k: count_parameters(model, k)._asdict() for k in ("all", "trainable", "frozen")}
    out["mechanism"] = mech
    print(json.dumps(out, sort_keys=True))


def cmd_checkpoint_inspect(args, s):
    _need(args, "checkpoint_in")
    print(json.dumps(inspect(args.checkpoint_in), sort_keys=True, indent=1))


# ----------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="flat key=value file overriding defaults")
    common.add_argument("--corpus")
    common.add_argument("--vocab", help="tokenizer file from tokenizer-train")
    common.add_argument("--checkpoint-in")
    common.add_argument("--checkpoint-out")
    common.add_argument("--log", help="append line-delimited JSON records here")
    common.add_argument("--steps", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", type=int)

    p = _Parser(prog="advfusion", description="Adapter, fusion and AdvFusion training on a miniature transformer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("tokenizer-train", cmd_tokenizer_train, "train a byte-level BPE vocabulary")
    sp.add_argument("--vocab-size", type=int)
    sp.add_argument("--out", required=True)

    sp = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic multilingual corpus")
    sp.add_argument("--n-langs", type=int, default=3)
    sp.add_argument("--counts", help="comma-separated examples per language, e.g. 200,200,40")
    sp.add_argument("--out", required=True)

    def split_arg(sp, default):
        sp.add_argument("--split", default=default, choices=("train", "valid", "test", "all"))

    sp = add("pretrain-base", cmd_pretrain_base, "MLM-pretrain the backbone")
    split_arg(sp, "train")

    sp = add("pretrain-lang-adapter", cmd_pretrain_lang_adapter, "MLM-train one language adapter per language")
    sp.add_argument("--lang", action="append", help="language tag (repeatable; default: every language)")
    sp.add_argument("--reduction", type=int)
    split_arg(sp, "train")

    sp = add("finetune", cmd_finetune, "seq2seq fine-tuning")
    sp.add_argument("--mechanism", choices=("full", "task-adapter", "lora"), default="task-adapter")
    sp.add_argument("--task", choices=("summarization", "mnp"), default="summarization")
    sp.add_argument("--reduction", type=int)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--alpha", type=float)
    split_arg(sp, "train")

    for name, fn in (("train-fusion", cmd_train_fusion), ("train-advfusion", cmd_train_advfusion)):
        sp = add(name, fn, "AdapterFusion training" if name == "train-fusion" else "two-phase AdvFusion training")
        sp.add_argument("--task", choices=("summarization", "mnp"), default="summarization")
        split_arg(sp, "train")
        if name == "train-advfusion":
            sp.add_argument("--phase1-steps", type=int)
            sp.add_argument("--phase2-steps", type=int)
            sp.add_argument("--exclusion-mode", choices=("exclude", "zero-weights"), default="exclude")

    sp = add("eval", cmd_eval, "generate and score a split")
    sp.add_argument("--task", choices=("summarization", "mnp"), default="summarization")
    sp.add_argument("--aggregate", choices=("sentence", "corpus"), default="sentence")
    sp.add_argument("--max-new", type=int)
    sp.add_argument("--out")
    split_arg(sp, "test")

    sp = add("analyze-attention", cmd_analyze_attention, "per-layer adapter contributions and heatmaps")
    sp.add_argument("--task", choices=("summarization", "mnp"), default="summarization")
    sp.add_argument("--out", help="contribution CSV")
    sp.add_argument("--heatmap", type=int, metavar="INDEX", help="example index for a per-token heatmap")
    sp.add_argument("--heatmap-out")
    sp.add_argument("--layer", type=int, help="heatmap layer (default: mean over layers)")
    split_arg(sp, "test")

    sp = add("param-report", cmd_param_report, "trainable/frozen parameter counts")
    sp.add_argument("--mechanism", choices=("task-adapter", "lora", "fusion", "advfusion"))
    sp.add_argument("--n-adapters", type=int, default=3)
    sp.add_argument("--vocab-size-model", type=int, help="vocabulary size when no tokenizer file is given")
    for key in ("n_layers", "hidden", "n_heads", "ff_dim", "max_len", "n_decoder_layers", "reduction", "rank"):
        sp.add_argument("--" + key.replace("_", "-"), type=int)

    add("checkpoint-inspect", cmd_checkpoint_inspect, "print a checkpoint manifest summary")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.fn(args, _settings(args))
    except (AdvFusionError, OSError) as exc:
        print(f"advfusion: error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - report and map to the internal-error code
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
