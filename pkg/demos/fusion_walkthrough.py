"""Walk through one AdvFusion run on a tiny synthetic corpus.

Trains a backbone and three language adapters, fuses them with the two-phase
schedule, then prints per-layer adapter contributions.  Runs in well under a minute.

    python demos/fusion_walkthrough.py
"""

from advfusion import (Adapter, AdapterStack, AttentionTrace, PhaseSchedule, TrainConfig, TransformerModel, ModelConfig,
                       contributions, corpus_eval, gen_synthetic, pretrain_backbone, split, train_advfusion,
                       train_bpe, train_language_adapter)
from advfusion.autodiff import no_grad
from advfusion.trainer import encode_pairs, pad_batch

corpus = split(gen_synthetic(3, [200, 200, 40], seed=0))
train, test = corpus.subset("train"), corpus.subset("test")
vocab = train_bpe([t for e in train for t in (e.code, e.doc)], 400)
print(f"{len(train)} training examples, vocabulary {vocab.size}, low-resource: {corpus.low_resource()}")

cfg = ModelConfig(vocab=vocab.size, n_layers=2, hidden=32, n_heads=2, ff_dim=64, max_len=64, n_decoder_layers=1)
model = TransformerModel(cfg, seed=0)
pretrain_backbone(model, train, vocab, TrainConfig(max_steps=200, lr=1e-3))

adapters = []
for i, lang in enumerate(corpus.languages):
    a = Adapter.create(cfg, lang, "language", reduction=4, seed=i)
    res = train_language_adapter(model, a, [e for e in train if e.lang == lang], vocab, TrainConfig(max_steps=150, lr=1e-3))
    print(f"language adapter {lang}: MLM loss {res.losses[0]:.2f} -> {res.losses[-1]:.2f}")
    adapters.append(a)

stack = AdapterStack(adapters)
excluded_seen = set()


def watch(info):
    if info.phase == 1:
        excluded_seen.add(info.exclude)


res = train_advfusion(model, stack, "summarization", train, vocab, PhaseSchedule(200, 200),
                      TrainConfig(max_steps=400, lr=1e-3), callback=watch)
print(f"fusion loss {res.losses[0]:.2f} -> {res.losses[-1]:.2f}; phase 1 withheld {sorted(excluded_seen)}")

with no_grad():
    for lang in corpus.languages:
        rep = corpus_eval(model, [e for e in test if e.lang == lang], "summarization", vocab, max_new=24)
        print(f"{lang:>5s} test BLEU {rep['bleu']:.2f}")
    trace = AttentionTrace(cfg.n_layers, stack.tags)
    for lang in corpus.languages:
        pairs = encode_pairs([e for e in test if e.lang == lang], vocab, "summarization")
        model.encode(pad_batch([p.src for p in pairs]), trace=trace)

for layer, tag, mean, _, pct in contributions(trace).rows():
    print(f"layer {layer}  {tag:>5s}  mean attention {mean:.3f}  contribution {pct:5.1f}%")
