"""Smoothed sentence BLEU-4 and subtoken precision/recall/F1."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass

from .corpus import subtokenize
from .errors import DataError


@dataclass(frozen=True)
class BleuReport:
    score: float
    precisions: tuple
    brevity_penalty: float
    candidate_length: int
    reference_length: int


@dataclass(frozen=True)
class PrfReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def text_tokens(text: str) -> list[str]:
    return re.findall(r"\w+|[^\w\s]", text.lower())


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(candidate, reference, max_n=4):
    """Clipped matches and candidate n-gram totals for n = 1..max_n."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = _ngram_counts(candidate, n)
        ref = _ngram_counts(reference, n)
        matches.append(sum(min(c, ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals


def _score(matches, totals, c, r):
    if c == 0 or matches[0] == 0:
        precisions = tuple(
            (m + (1 if n else 0)) / (t + (1 if n else 0)) if t or n else 0.0
            for n, (m, t) in enumerate(zip(matches, totals))
        )
        bp = 0.0 if c == 0 else (1.0 if c >= r else math.exp(1 - r / c))
        return 0.0, precisions, bp
    # add-one smoothing for n >= 2
    precisions = tuple(
        (m + (1 if n else 0)) / (t + (1 if n else 0)) for n, (m, t) in enumerate(zip(matches, totals))
    )
    log_mean = sum(math.log(p) for p in precisions) / len(precisions)
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(log_mean), precisions, bp


def smoothed_bleu4(candidate, reference) -> BleuReport:
    """Sentence BLEU-4 with add-one smoothing on orders 2-4.

    ``candidate`` and ``reference`` are token sequences.  The unigram
    precision is unsmoothed, so a candidate sharing no token with the
    reference scores 0.
    """
    candidate, reference = list(candidate), list(reference)
    if not reference:
        raise DataError("empty reference")
    matches, totals = bleu_stats(candidate, reference)
    score, precisions, bp = _score(matches, totals, len(candidate), len(reference))
    return BleuReport(score, precisions, bp, len(candidate), len(reference))


def corpus_bleu4(pairs) -> BleuReport:
    """Corpus-level pooling of n-gram statistics (alternative aggregation)."""
    M, T, c, r = [0] * 4, [0] * 4, 0, 0
    for cand, ref in pairs:
        if not ref:
            raise DataError("empty reference")
        m, t = bleu_stats(list(cand), list(ref))
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        c += len(cand)
        r += len(ref)
    if r == 0:
        raise DataError("no references")
    score, precisions, bp = _score(M, T, c, r)
    return BleuReport(score, precisions, bp, c, r)


def token_prf(predicted_name: str, gold_name: str, multiset=True) -> PrfReport:
    pred = subtokenize(predicted_name)
    gold = subtokenize(gold_name)
    return prf_from_tokens(pred, gold, multiset)


def prf_from_tokens(pred, gold, multiset=True) -> PrfReport:
    if not gold:
        raise DataError("empty gold name")
    if multiset:
        cp, cg = Counter(pred), Counter(gold)
        tp = sum(min(c, cg[t]) for t, c in cp.items())
        n_pred, n_gold = len(pred), len(gold)
    else:
        sp, sg = set(pred), set(gold)
        tp = len(sp & sg)
        n_pred, n_gold = len(sp), len(sg)
    return _prf(tp, n_pred - tp, n_gold - tp)


def _prf(tp, fp, fn) -> PrfReport:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PrfReport(p, r, f1, tp, fp, fn)


def micro_prf(reports) -> PrfReport:
    tp = sum(x.tp for x in reports)
    fp = sum(x.fp for x in reports)
    fn = sum(x.fn for x in reports)
    return _prf(tp, fp, fn)


# ----------------------------------------------------------------------------
# corpus-level evaluation


def corpus_eval(model, examples, task, vocab, *, max_new=32, batch_size=32, trace=None, aggregate="sentence"):
    """Generate for every example and score against its reference.

    Summarization reports the mean sentence-level smoothed BLEU-4 (or pooled
    corpus BLEU with ``aggregate="corpus"``); method-name prediction reports
    micro-averaged subtoken P/R/F1.  Both include a per-language breakdown.
    """
    from .trainer import encode_pairs, pad_batch

    examples = list(examples)
    if not examples:
        raise DataError("empty evaluation split")
    pairs = encode_pairs(examples, vocab, task, max_src=model.config.max_len)
    preds = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        src = pad_batch([p.src for p in chunk])
        enc = model.encode(src, trace=trace)
        for ids in model.decode_generate(enc, max_new):
            preds.append(vocab.decode([i for i in ids if i > 5]))
    by_lang: dict[str, list] = {}
    for ex, pair, pred in zip(examples, pairs, preds):
        by_lang.setdefault(ex.lang, []).append((pair, pred))

    def summarize(items):
        if task == "summarization":
            cands = [(text_tokens(pred), p.reference) for p, pred in items]
            if aggregate == "corpus":
                return {"bleu": corpus_bleu4(cands).score, "n": len(items)}
            scores = [smoothed_bleu4(c, r).score for c, r in cands]
            return {"bleu": sum(scores) / len(scores), "n": len(items)}
        reps = [prf_from_tokens(subtokenize(pred), p.reference) for p, pred in items]
        m = micro_prf(reps)
        return {"precision": m.precision, "recall": m.recall, "f1": m.f1, "n": len(items)}

    everything = [x for items in by_lang.values() for x in items]
    report = {"task": task, **summarize(everything)}
    report["per_language"] = {lang: summarize(items) for lang, items in by_lang.items()}
    report["predictions"] = preds
    return report


def format_report(report) -> str:
    """JSON with every float rounded to two decimals (scores are 0-100 or 0-1)."""

    def rnd(x):
        if isinstance(x, float):
            return round(x, 2)
        if isinstance(x, dict):
            return {k: rnd(v) for k, v in x.items()}
        if isinstance(x, list):
            return [rnd(v) for v in x]
        return x

    body = {k: v for k, v in report.items() if k != "predictions"}
    return json.dumps(rnd(body), sort_keys=True)


def report_dict(rep):
    return asdict(rep)
