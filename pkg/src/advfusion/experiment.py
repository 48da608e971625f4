"""Scaled-down low-resource comparison of AdapterFusion and AdvFusion.

Both runs start from the same backbone and language adapters and train for
the same number of steps; only the fusion schedule differs.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass

from .adapters import Adapter, AdapterStack
from .autodiff import no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import gen_synthetic, split
from .metrics import corpus_eval
from .model import ModelConfig, TransformerModel
from .tokenizer import train_bpe
from .trainer import PhaseSchedule, TrainConfig, pretrain_backbone, train_advfusion, train_fusion, train_language_adapter


@dataclass
class TrendSettings:
    counts: tuple = (200, 200, 40)
    vocab_size: int = 400
    n_layers: int = 2
    hidden: int = 32
    n_heads: int = 2
    ff_dim: int = 64
    max_len: int = 64
    n_decoder_layers: int = 1
    reduction: int = 4
    backbone_steps: int = 300
    adapter_steps: int = 200
    fusion_steps: int = 600
    batch_size: int = 8
    lr: float = 1e-3
    max_new: int = 24


def run_trend(seed, settings=None, log=None):
    """One seed of the comparison; returns low-resource test BLEU for both runs."""
    st = settings or TrendSettings()
    t0 = time.perf_counter()
    corpus = split(gen_synthetic(len(st.counts), list(st.counts), seed=seed), seed=seed)
    train, test = corpus.subset("train"), corpus.subset("test")
    low = corpus.low_resource()[0]
    vocab = train_bpe([t for e in train for t in (e.code, e.doc)], st.vocab_size)
    cfg = ModelConfig(vocab=vocab.size, n_layers=st.n_layers, hidden=st.hidden, n_heads=st.n_heads, ff_dim=st.ff_dim,
                      max_len=st.max_len, n_decoder_layers=st.n_decoder_layers)
    model = TransformerModel(cfg, seed=seed)
    tc = lambda steps, s=seed: TrainConfig(seed=s, batch_size=st.batch_size, max_steps=steps, lr=st.lr)
    pretrain_backbone(model, train, vocab, tc(st.backbone_steps))
    adapters = []
    for i, lang in enumerate(corpus.languages):
        a = Adapter.create(cfg, lang, "language", st.reduction, seed=seed + 1000 + i)
        train_language_adapter(model, a, [e for e in train if e.lang == lang], vocab, tc(st.adapter_steps, seed + i))
        adapters.append(a)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "start.avf")
        save_checkpoint(model, path, adapters=adapters)
        scores = {}
        for name in ("fusion", "advfusion"):
            ck = load_checkpoint(path)
            m = ck.model
            stack = AdapterStack([ck.adapters[t] for t in corpus.languages])
            if name == "fusion":
                train_fusion(m, stack, "summarization", train, vocab, tc(st.fusion_steps))
            else:
                train_advfusion(m, stack, "summarization", train, vocab, PhaseSchedule.split(st.fusion_steps),
                                tc(st.fusion_steps))
            with no_grad():
                rep = corpus_eval(m, [e for e in test if e.lang == low], "summarization", vocab, max_new=st.max_new)
            scores[name] = rep["bleu"]
    row = {"seed": seed, "language": low, "adapterfusion_bleu": scores["fusion"],
           "advfusion_bleu": scores["advfusion"], "seconds": round(time.perf_counter() - t0, 1)}
    if log is not None:
        log(row)
    return row
