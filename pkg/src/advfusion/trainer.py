"""Training loops: MLM for the backbone and language adapters, seq2seq
fine-tuning, AdapterFusion and the two-phase AdvFusion schedule."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import Adapter, AdapterAttachment, AdapterStack, FusionAttachment, attach, detach
from .corpus import mask_method_name, subtokenize
from .errors import ConfigError, DataError, NumericError, UsageError
from .metrics import text_tokens
from .tokenizer import BOS, EOS, MASK, N_SPECIAL, PAD

IGNORE = -100
TASKS = ("summarization", "mnp")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    max_steps: int = 100
    lr: float | None = None  # None: 1e-4 for adapters/fusion, 5e-5 for full
    eval_every: int = 0
    objective: str = "seq2seq"
    mask_rate: float = 0.15
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 0:
            raise ConfigError("batch_size must be positive; max_steps and eval_every non-negative")
        if self.lr is not None and self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.objective not in ("mlm", "seq2seq"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if not 0 < self.mask_rate < 1:
            raise ConfigError("mask_rate must lie in (0, 1)")

    def lr_for(self, mechanism):
        if self.lr is not None:
            return self.lr
        return 5e-5 if mechanism in ("full", "backbone") else 1e-4


@dataclass(frozen=True)
class PhaseSchedule:
    phase1_steps: int
    phase2_steps: int
    exclusion_mode: str = "exclude"

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("phase step counts must be non-negative")
        if self.exclusion_mode not in ("exclude", "zero-weights"):
            raise ConfigError(f"unknown exclusion mode {self.exclusion_mode!r}")

    @classmethod
    def split(cls, max_steps, exclusion_mode="exclude"):
        return cls(max_steps // 2, max_steps - max_steps // 2, exclusion_mode)

    @property
    def total(self):
        return self.phase1_steps + self.phase2_steps

    def phase_at(self, step):
        """Phase of the 1-based ``step``."""
        return 1 if step <= self.phase1_steps else 2


@dataclass(frozen=True)
class TrainablePartition:
    trainable: frozenset
    frozen: frozenset

    @classmethod
    def from_groups(cls, model, groups):
        groups = set(groups)
        train = frozenset(n for n, g in model.groups.items() if g in groups)
        return cls(train, frozenset(model.params) - train)

    def apply(self, model):
        if self.trainable | self.frozen != set(model.params) or self.trainable & self.frozen:
            raise UsageError("partition does not cover the model's parameters exactly once")
        for n, t in model.params.items():
            t.requires_grad = n in self.trainable
            t.grad = None
        return self


@dataclass
class OptimizerState:
    params: dict
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, model, partition, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        params = {n: model.params[n] for n in sorted(partition.trainable)}
        m = {n: np.zeros_like(t.data) for n, t in params.items()}
        v = {n: np.zeros_like(t.data) for n, t in params.items()}
        return cls(params, lr, tuple(betas), eps, weight_decay, 0, m, v)


def adam_step(opt: OptimizerState, partition: TrainablePartition):
    """One bias-corrected Adam update of the trainable parameters that have a gradient."""
    live = [(n, t) for n, t in opt.params.items() if n in partition.trainable and t.grad is not None]
    for n, t in live:
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient in parameter {n!r}")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1 - b1**opt.step
    c2 = 1 - b2**opt.step
    for n, t in live:
        g = t.grad
        if opt.weight_decay:
            g = g + opt.weight_decay * t.data
        opt.m[n] = b1 * opt.m[n] + (1 - b1) * g
        opt.v[n] = b2 * opt.v[n] + (1 - b2) * g * g
        upd = opt.lr * (opt.m[n] / c1) / (np.sqrt(opt.v[n] / c2) + opt.eps)
        t.data = (t.data - upd).astype(t.data.dtype, copy=False)


def param_checksum(model, names=None) -> str:
    h = hashlib.sha256()
    for n in sorted(model.params if names is None else names):
        t = model.params[n].data
        h.update(n.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Pair:
    src: list
    tgt: list  # BOS ... EOS
    reference: list  # metric tokens
    lang: str


def encode_pairs(examples, vocab, task, max_src=128, max_tgt=None):
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    max_tgt = max_tgt or max_src
    out = []
    for i, ex in enumerate(examples):
        if task == "summarization":
            if not ex.doc:
                raise DataError(f"example {i} has an empty doc")
            src = vocab.encode(ex.code)
            body = vocab.encode(ex.doc)
            ref = text_tokens(ex.doc)
        else:
            if not ex.name:
                raise DataError(f"example {i} has no method name")
            m = mask_method_name(ex, vocab)
            src, body, ref = m.input_ids, m.target_ids, subtokenize(ex.name)
        out.append(Pair(src[:max_src], [BOS] + body[: max_tgt - 2] + [EOS], ref, ex.lang))
    return out


def pad_batch(seqs, pad=PAD):
    width = max(len(s) for s in seqs)
    arr = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
    return arr


@dataclass(frozen=True)
class Batch:
    src: np.ndarray
    dec_in: np.ndarray | None
    labels: np.ndarray
    lang: str


def collate_seq2seq(pairs):
    tg = [p.tgt for p in pairs]
    dec_in = pad_batch([t[:-1] for t in tg])
    labels = pad_batch([t[1:] for t in tg], pad=IGNORE)
    return Batch(pad_batch([p.src for p in pairs]), dec_in, labels, pairs[0].lang)


def language_batches(items, batch_size, seed, lang_of=lambda x: x.lang):
    """Endless stream of single-language batches, languages taken round-robin.

    Each language walks its own seeded permutation and reshuffles when it
    runs out, so low-resource languages get as many batches as large ones.
    """
    items = list(items)
    if not items:
        raise DataError("empty training corpus")
    rng = np.random.default_rng(seed)
    by_lang: dict[str, list] = {}
    for it in items:
        by_lang.setdefault(lang_of(it), []).append(it)
    langs = list(by_lang)
    order = {l: [] for l in langs}
    while True:
        for l in langs:
            pool = by_lang[l]
            chunk = []
            while len(chunk) < min(batch_size, len(pool)):
                if not order[l]:
                    order[l] = list(rng.permutation(len(pool)))
                chunk.append(pool[order[l].pop(0)])
            yield l, chunk


def mlm_mask(batch, mask_rate=0.15, seed=0, vocab_size=None):
    """BERT-style masking of ``ceil(mask_rate * n)`` non-pad positions per row.

    Selected positions become MASK (80%), a random non-special token (10%) or
    stay unchanged (10%).  Targets hold the original id at selected positions
    and -100 elsewhere.  ``seed`` may be an int or a numpy Generator.
    """
    if not 0 < mask_rate < 1:
        raise ConfigError("mask_rate must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.array(batch, dtype=np.int64)
    squeeze = ids.ndim == 1
    ids = np.atleast_2d(ids)
    masked = ids.copy()
    targets = np.full_like(ids, IGNORE)
    pool = np.unique(ids[ids >= N_SPECIAL]) if vocab_size is None else None
    for row in range(ids.shape[0]):
        cand = np.flatnonzero(ids[row] != PAD)
        if cand.size == 0:
            continue
        k = min(cand.size, max(1, math.ceil(mask_rate * cand.size - 1e-9)))
        pos = np.sort(rng.choice(cand, size=k, replace=False))
        targets[row, pos] = ids[row, pos]
        u = rng.random(k)
        masked[row, pos[u < 0.8]] = MASK
        rnd = pos[(u >= 0.8) & (u < 0.9)]
        if rnd.size:
            if vocab_size is not None:
                masked[row, rnd] = rng.integers(N_SPECIAL, vocab_size, size=rnd.size)
            elif pool.size:
                masked[row, rnd] = rng.choice(pool, size=rnd.size)
    if squeeze:
        return masked[0], targets[0]
    return masked, targets


# ----------------------------------------------------------------------------
# losses


def seq2seq_loss(model, batch: Batch, exclude=None, trace=None):
    enc = model.encode(batch.src, exclude=exclude, trace=trace)
    logits = model.decoder_logits(enc, batch.dec_in)
    return ad.cross_entropy_logits(logits, batch.labels, ignore_id=IGNORE)


def mlm_loss(model, masked, targets):
    enc = model.encode(masked)
    return ad.cross_entropy_logits(model.mlm_logits(enc), targets, ignore_id=IGNORE)


# ----------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class StepInfo:
    step: int
    phase: int
    language: str
    loss: float
    batch: object
    exclude: str | None


@dataclass
class TrainResult:
    losses: list
    records: list
    attachment: object = None
    metrics: dict | None = None


class _Logger:
    def __init__(self, path):
        self.records = []
        self.path = path
        if path:
            open(path, "a").close()

    def __call__(self, **rec):
        rec = {k: rec.get(k) for k in ("step", "phase", "language", "loss", "metric")} | {
            k: v for k, v in rec.items() if k not in ("step", "phase", "language", "loss", "metric")
        }
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=False) + "\n")


def _loop(model, partition, lr, cfg, steps, plan, *, tag, callback=None, evaluate=None):
    """Shared optimisation loop.

    ``plan(step)`` returns ``(phase, language, loss_thunk, batch, exclude)``.
    """
    partition.apply(model)
    opt = OptimizerState.create(model, partition, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    log = _Logger(cfg.log_path)
    losses = []
    for step in range(1, steps + 1):
        phase, lang, thunk, batch, exclude = plan(step)
        for t in opt.params.values():
            t.grad = None
        loss = thunk()
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        ad.backward(loss)
        adam_step(opt, partition)
        losses.append(value)
        metric = None
        if evaluate is not None and cfg.eval_every and step % cfg.eval_every == 0:
            metric = evaluate()
        log(step=step, phase=phase, language=lang, loss=value, metric=metric, run=tag)
        if callback is not None:
            callback(StepInfo(step, phase, lang, value, batch, exclude))
    for t in model.params.values():
        t.grad = None
    return TrainResult(losses, log.records)


def _mlm_plan(model, seqs, cfg, phase=0):
    stream = language_batches(seqs, cfg.batch_size, cfg.seed, lang_of=lambda x: x[0])
    rng = np.random.default_rng(cfg.seed + 1)

    def plan(step):
        lang, chunk = next(stream)
        masked, targets = mlm_mask(pad_batch([s for _, s in chunk]), cfg.mask_rate, rng, model.config.vocab)
        return phase, lang, lambda: mlm_loss(model, masked, targets), (masked, targets), None

    return plan


def _mlm_sequences(examples, vocab, max_len):
    seqs = [(ex.lang, vocab.encode(ex.code)[:max_len]) for ex in examples]
    seqs = [s for s in seqs if s[1]]
    if not seqs:
        raise DataError("empty corpus")
    return seqs


def pretrain_backbone(model, examples, vocab, cfg: TrainConfig, callback=None) -> TrainResult:
    """MLM pretraining of the backbone so adapters sit on a meaningful encoder."""
    if model.attachment is not None:
        raise UsageError("pretrain the backbone before attaching adapters")
    seqs = _mlm_sequences(examples, vocab, model.config.max_len)
    part = TrainablePartition.from_groups(model, {"base"})
    plan = _mlm_plan(model, seqs, cfg)
    return _loop(model, part, cfg.lr_for("backbone"), cfg, cfg.max_steps, plan, tag="pretrain", callback=callback)


def train_language_adapter(model, adapter: Adapter, examples, vocab, cfg: TrainConfig, callback=None) -> TrainResult:
    """MLM-train one language adapter on top of the frozen backbone.

    The adapter is attached for the duration of training and detached
    afterwards; only its own tensors change.
    """
    if adapter.kind != "language":
        raise UsageError("train_language_adapter needs an adapter of kind 'language'")
    examples = list(examples)
    if not examples:
        raise DataError(f"empty corpus for language adapter {adapter.tag!r}")
    seqs = _mlm_sequences(examples, vocab, model.config.max_len)
    att = attach(model, AdapterAttachment(adapter))
    try:
        part = TrainablePartition.from_groups(model, {adapter.group})
        plan = _mlm_plan(model, seqs, cfg)
        res = _loop(model, part, cfg.lr_for("adapter"), cfg, cfg.max_steps, plan, tag=f"lang-adapter:{adapter.tag}",
                    callback=callback)
    finally:
        detach(model)
        for t in adapter.named_tensors().values():
            t.requires_grad = False
    res.attachment = att
    return res


MECHANISM_GROUPS = {
    "full": lambda model: {"base", "decoder"},
    "task-adapter": lambda model: {model.attachment.adapter.group, "decoder"},
    "lora": lambda model: {"lora", "decoder"},
    "fusion": lambda model: {"fusion", "decoder"},
    "advfusion": lambda model: {"fusion", "decoder"},
}


def _seq2seq_plan(model, pairs, cfg, schedule=None, trace=None):
    stream = language_batches(pairs, cfg.batch_size, cfg.seed)
    tags = None
    if schedule is not None:
        tags = set(model.attachment.stack.tags)

    def plan(step):
        lang, chunk = next(stream)
        batch = collate_seq2seq(chunk)
        phase, exclude = 0, None
        if schedule is not None:
            phase = schedule.phase_at(step)
            if lang not in tags:
                raise DataError(f"batch language {lang!r} has no adapter in the stack {sorted(tags)}")
            if phase == 1:
                exclude = lang
        return phase, lang, lambda: seq2seq_loss(model, batch, exclude, trace), batch, exclude

    return plan


def _evaluator(model, eval_examples, task, vocab):
    if not eval_examples:
        return None
    from .metrics import corpus_eval

    def run():
        with ad.no_grad():
            rep = corpus_eval(model, eval_examples, task, vocab)
        return rep["bleu"] if task == "summarization" else rep["f1"]

    return run


def finetune(model, mechanism, task, examples, vocab, cfg: TrainConfig, *, reduction=8, rank=8, alpha=16,
             eval_examples=None, callback=None) -> TrainResult:
    """Seq2seq fine-tuning with ``full``, ``task-adapter`` or ``lora``.

    The decoder and generation head always train; the backbone encoder only
    trains in ``full`` mode.  The mechanism is attached if the model carries
    no attachment yet.
    """
    if mechanism not in ("full", "task-adapter", "lora"):
        raise ConfigError(f"unknown fine-tuning mechanism {mechanism!r}")
    pairs = encode_pairs(examples, vocab, task, model.config.max_len)
    if not pairs:
        raise DataError("empty training corpus")
    if mechanism != "full" and model.attachment is None:
        attach(model, mechanism, seed=cfg.seed, reduction=reduction, rank=rank, alpha=alpha)
    if mechanism != "full" and model.attachment.mechanism != mechanism:
        raise UsageError(f"model carries a {model.attachment.mechanism} attachment, not {mechanism}")
    part = TrainablePartition.from_groups(model, MECHANISM_GROUPS[mechanism](model))
    plan = _seq2seq_plan(model, pairs, cfg)
    res = _loop(model, part, cfg.lr_for(mechanism), cfg, cfg.max_steps, plan, tag=f"finetune:{mechanism}",
                callback=callback, evaluate=_evaluator(model, eval_examples, task, vocab))
    res.attachment = model.attachment
    return res


def _fusion_attachment(model, stack, mode, exclusion_mode, seed):
    if model.attachment is None:
        return attach(model, mode, stack=stack, seed=seed, exclusion_mode=exclusion_mode)
    att = model.attachment
    if not isinstance(att, FusionAttachment) or att.stack is not stack:
        raise UsageError("model carries an attachment other than fusion over this stack")
    return att


def train_fusion(model, stack: AdapterStack, task, examples, vocab, cfg: TrainConfig, *, trace=None,
                 eval_examples=None, callback=None) -> TrainResult:
    """AdapterFusion: train the fusion blocks (and decoder) over frozen adapters."""
    if len(stack) < 2:
        warnings.warn("fusion over fewer than two adapters degenerates to a pass-through", stacklevel=2)
    return _train_fused(model, stack, task, examples, vocab, cfg, None, "fusion", trace, eval_examples, callback)


def train_advfusion(model, stack: AdapterStack, task, examples, vocab, schedule: PhaseSchedule, cfg: TrainConfig, *,
                    trace=None, eval_examples=None, callback=None) -> TrainResult:
    """Two-phase AdvFusion.

    Phase 1 withholds the batch language's adapter from the fusion softmax
    (or zeroes its weights in ``zero-weights`` mode); phase 2 trains with
    every adapter available.  ``schedule.total`` replaces ``cfg.max_steps``.
    """
    if len(stack) < 2:
        raise ConfigError("AdvFusion needs at least two language adapters")
    return _train_fused(model, stack, task, examples, vocab, cfg, schedule, "advfusion", trace, eval_examples,
                        callback)


def _train_fused(model, stack, task, examples, vocab, cfg, schedule, mode, trace, eval_examples, callback):
    pairs = encode_pairs(examples, vocab, task, model.config.max_len)
    if not pairs:
        raise DataError("empty training corpus")
    missing = sorted({p.lang for p in pairs} - set(stack.tags))
    if schedule is not None and missing:
        raise DataError(f"languages {missing} have no adapter in the stack")
    att = _fusion_attachment(model, stack, mode, "exclude" if schedule is None else schedule.exclusion_mode, cfg.seed)
    if schedule is not None:
        att.exclusion_mode = schedule.exclusion_mode
    part = TrainablePartition.from_groups(model, {"fusion", "decoder"})
    steps = cfg.max_steps if schedule is None else schedule.total
    plan = _seq2seq_plan(model, pairs, cfg, schedule, trace)
    res = _loop(model, part, cfg.lr_for(mode), cfg, steps, plan, tag=mode, callback=callback,
                evaluate=_evaluator(model, eval_examples, task, vocab))
    res.attachment = att
    return res
