"""Bottleneck adapters, LoRA deltas, and attention-based adapter fusion.

An *attachment* instruments a :class:`~advfusion.model.TransformerModel`
encoder.  The model calls ``attachment.adapt(layer, h, ctx, act)`` on each
feed-forward sublayer output and ``attachment.project(layer, which, x)``
inside self-attention for the query and value projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, UsageError


def _uniform(rng, shape, dtype, low=-0.05, high=0.05):
    return Tensor(rng.uniform(low, high, size=shape).astype(dtype))


# ----------------------------------------------------------------------------
# bottleneck adapters


@dataclass
class BottleneckAdapter:
    """One layer's adapter: down (h x d), ReLU, up (d x h), plus residual."""

    down: Tensor
    down_bias: Tensor
    up: Tensor
    up_bias: Tensor
    kind: str = "task"
    language_tag: str | None = None

    def __post_init__(self):
        h, d = self.down.shape
        if not d < h:
            raise ConfigError(f"bottleneck dimension {d} must be smaller than hidden size {h}")
        if self.up.shape != (d, h) or self.down_bias.shape != (d,) or self.up_bias.shape != (h,):
            raise DimensionError("inconsistent adapter parameter shapes")

    @classmethod
    def init(cls, hidden, bottleneck, rng, dtype="float32", kind="task", language_tag=None):
        dt = np.dtype(dtype)
        return cls(
            down=_uniform(rng, (hidden, bottleneck), dt),
            down_bias=Tensor(np.zeros(bottleneck, dtype=dt)),
            up=Tensor(np.zeros((bottleneck, hidden), dtype=dt)),
            up_bias=Tensor(np.zeros(hidden, dtype=dt)),
            kind=kind,
            language_tag=language_tag,
        )

    def named(self):
        return {"down.w": self.down, "down.b": self.down_bias, "up.w": self.up, "up.b": self.up_bias}

    def zeroed(self):
        """A copy with every weight set to zero (used by the literal zeroing mode)."""
        z = {k: Tensor(np.zeros_like(t.data)) for k, t in self.named().items()}
        return BottleneckAdapter(z["down.w"], z["down.b"], z["up.w"], z["up.b"], self.kind, self.language_tag)

    def __call__(self, h, r):
        return adapter_forward(self, h, r)


def adapter_forward(adapter: BottleneckAdapter, h, r):
    """``U(ReLU(D h + b_d)) + b_u + r``."""
    if h.shape != r.shape:
        raise DimensionError(f"adapter input {h.shape} and residual {r.shape} differ")
    if h.shape[-1] != adapter.down.shape[0]:
        raise DimensionError(f"adapter expects hidden size {adapter.down.shape[0]}, got {h.shape}")
    mid = ad.relu(ad.add_bias(ad.matmul(h, adapter.down), adapter.down_bias))
    return ad.add(ad.add_bias(ad.matmul(mid, adapter.up), adapter.up_bias), r)


class Adapter:
    """A named adapter spanning every encoder layer (one block per layer)."""

    def __init__(self, tag, blocks, kind="task"):
        self.tag = tag
        self.kind = kind
        self.blocks = list(blocks)

    @classmethod
    def create(cls, config, tag, kind="task", reduction=8, seed=0):
        d = max(1, config.hidden // reduction)
        rng = np.random.default_rng(seed)
        lang = tag if kind == "language" else None
        blocks = [
            BottleneckAdapter.init(config.hidden, d, rng, config.dtype, kind, lang) for _ in range(config.n_layers)
        ]
        return cls(tag, blocks, kind)

    @property
    def group(self):
        return f"adapter:{self.tag}"

    def named_tensors(self):
        out = {}
        for l, block in enumerate(self.blocks):
            for k, t in block.named().items():
                out[f"adapter.{self.tag}.{l}.{k}"] = t
        return out

    def n_params(self):
        return sum(t.size for t in self.named_tensors().values())


class AdapterStack:
    """Ordered collection of N language adapters with unique tags."""

    def __init__(self, adapters):
        self.adapters = list(adapters)
        tags = [a.tag for a in self.adapters]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate adapter tags in stack: {tags}")
        if not self.adapters:
            raise ConfigError("adapter stack is empty")

    @property
    def tags(self):
        return [a.tag for a in self.adapters]

    def __len__(self):
        return len(self.adapters)

    def index(self, tag):
        try:
            return self.tags.index(tag)
        except ValueError:
            raise UsageError(f"language {tag!r} is not in the adapter stack {self.tags}") from None


# ----------------------------------------------------------------------------
# LoRA


@dataclass
class LoraDelta:
    a: Tensor
    b: Tensor
    rank: int
    scaling: float

    @classmethod
    def init(cls, hidden, rank, alpha, rng, dtype="float32"):
        if not 0 < rank < hidden:
            raise ConfigError(f"LoRA rank {rank} must be in [1, {hidden})")
        dt = np.dtype(dtype)
        return cls(
            a=_uniform(rng, (hidden, rank), dt),
            b=Tensor(np.zeros((rank, hidden), dtype=dt)),
            rank=rank,
            scaling=alpha / rank,
        )

    def delta(self, x):
        return ad.scale(ad.matmul(ad.matmul(x, self.a), self.b), self.scaling)


def lora_forward(base_weight, delta: LoraDelta, x, base_bias=None):
    """``x (W + s A B)`` computed as ``x W + s (x A) B``."""
    if delta.rank >= base_weight.shape[0]:
        raise ConfigError(f"LoRA rank {delta.rank} must be smaller than {base_weight.shape[0]}")
    out = ad.matmul(x, base_weight)
    if base_bias is not None:
        out = ad.add_bias(out, base_bias)
    return ad.add(out, delta.delta(x))


# ----------------------------------------------------------------------------
# fusion


@dataclass
class FusionBlock:
    query: Tensor
    key: Tensor
    value: Tensor
    mode: str = "fusion"

    @classmethod
    def init(cls, hidden, rng, dtype="float32", mode="fusion"):
        dt = np.dtype(dtype)
        return cls(
            query=_uniform(rng, (hidden, hidden), dt),
            key=_uniform(rng, (hidden, hidden), dt),
            value=Tensor(np.eye(hidden, dtype=dt)),
            mode=mode,
        )

    def named(self):
        return {"query": self.query, "key": self.key, "value": self.value}


def fusion_forward(fb: FusionBlock, h, candidates, excluded=None):
    """Mix candidate adapter outputs with per-token attention.

    ``s_n = softmax_n((h Q) . (z_n K))`` over the included candidates and
    ``O = sum_n s_n z_n V``.  ``excluded`` is a candidate index dropped from
    the mix entirely (its entry in ``candidates`` may be ``None``).  Returns
    the output tensor and the attention weights as a numpy array of shape
    ``h.shape[:-1] + (N,)`` with an exact zero column for the excluded index.
    """
    N = len(candidates)
    if N < 1:
        raise UsageError("fusion needs at least one candidate")
    if excluded is not None:
        if N < 2:
            raise UsageError("cannot exclude the only fusion candidate")
        if not 0 <= excluded < N:
            raise UsageError(f"excluded index {excluded} outside stack of {N}")
    included = [i for i in range(N) if i != excluded]
    zs = []
    for i in included:
        z = candidates[i]
        if z is None or z.shape != h.shape:
            raise DimensionError(f"candidate {i} must have shape {h.shape}")
        zs.append(z)
    n = len(zs)
    lead = h.shape[:-1]
    hid = h.shape[-1]
    z = ad.stack(zs, axis=-2)  # (..., n, h)
    q = ad.reshape(ad.matmul(h, fb.query), lead + (hid, 1))
    k = ad.matmul(z, fb.key)
    scores = ad.reshape(ad.matmul(k, q), lead + (n,))
    s = ad.softmax_lastdim(scores)
    v = ad.matmul(z, fb.value)
    out = ad.reshape(ad.matmul(ad.reshape(s, lead + (1, n)), v), lead + (hid,))
    S = np.zeros(lead + (N,), dtype=s.data.dtype)
    S[..., included] = s.data
    return out, S


# ----------------------------------------------------------------------------
# attachments


class Attachment:
    mechanism = "none"

    def named_parameters(self):
        """``{name: (tensor, group)}`` for every tensor this attachment owns."""
        return {}

    def adapt(self, layer, h, ctx, act):
        return h

    def project(self, layer, which, x):
        return None

    def describe(self):
        return {"mechanism": self.mechanism}


class AdapterAttachment(Attachment):
    """A single adapter after every encoder layer (task or language adapter)."""

    def __init__(self, adapter: Adapter):
        self.adapter = adapter
        self.mechanism = "language-adapter" if adapter.kind == "language" else "task-adapter"

    def named_parameters(self):
        return {n: (t, self.adapter.group) for n, t in self.adapter.named_tensors().items()}

    def adapt(self, layer, h, ctx, act):
        out = self.adapter.blocks[layer](h, h)
        act.r, act.z, act.out = h, [out], out
        return out

    def describe(self):
        return {"mechanism": self.mechanism, "tag": self.adapter.tag}


class LoraAttachment(Attachment):
    mechanism = "lora"

    def __init__(self, deltas, rank, alpha):
        self.deltas = deltas  # list of {"q": LoraDelta, "v": LoraDelta}
        self.rank = rank
        self.alpha = alpha

    @classmethod
    def create(cls, config, rank=8, alpha=16, seed=0):
        rng = np.random.default_rng(seed)
        deltas = [
            {w: LoraDelta.init(config.hidden, rank, alpha, rng, config.dtype) for w in ("q", "v")}
            for _ in range(config.n_layers)
        ]
        return cls(deltas, rank, alpha)

    def named_parameters(self):
        out = {}
        for l, per in enumerate(self.deltas):
            for w, d in per.items():
                out[f"lora.{l}.{w}.a"] = (d.a, "lora")
                out[f"lora.{l}.{w}.b"] = (d.b, "lora")
        return out

    def project(self, layer, which, x):
        d = self.deltas[layer].get(which)
        return None if d is None else d.delta(x)

    def describe(self):
        return {"mechanism": self.mechanism, "rank": self.rank, "alpha": self.alpha}


class FusionAttachment(Attachment):
    """AdapterFusion / AdvFusion over a stack of frozen language adapters.

    With ``exclusion_mode="exclude"`` the excluded language's candidate is
    dropped from the softmax.  ``"zero-weights"`` instead evaluates that
    adapter with all-zero weights, so its candidate collapses to the residual
    and still competes for attention.
    """

    def __init__(self, stack: AdapterStack, blocks, mode="fusion", exclusion_mode="exclude"):
        if exclusion_mode not in ("exclude", "zero-weights"):
            raise ConfigError(f"unknown exclusion mode {exclusion_mode!r}")
        self.stack = stack
        self.blocks = list(blocks)
        self.mode = mode
        self.mechanism = mode
        self.exclusion_mode = exclusion_mode
        self.last_attention: dict[int, np.ndarray] = {}

    @classmethod
    def create(cls, config, stack, mode="fusion", exclusion_mode="exclude", seed=0):
        rng = np.random.default_rng(seed)
        blocks = [FusionBlock.init(config.hidden, rng, config.dtype, mode) for _ in range(config.n_layers)]
        return cls(stack, blocks, mode, exclusion_mode)

    def named_parameters(self):
        out = {}
        for a in self.stack.adapters:
            for n, t in a.named_tensors().items():
                out[n] = (t, a.group)
        for l, fb in enumerate(self.blocks):
            for k, t in fb.named().items():
                out[f"fusion.{l}.{k}"] = (t, "fusion")
        return out

    def adapt(self, layer, h, ctx, act):
        idx = None if ctx.exclude is None else self.stack.index(ctx.exclude)
        cands = []
        for i, a in enumerate(self.stack.adapters):
            block = a.blocks[layer]
            if i == idx:
                if self.exclusion_mode == "exclude":
                    cands.append(None)
                    continue
                block = block.zeroed()
            cands.append(block(h, h))
        excluded = idx if self.exclusion_mode == "exclude" else None
        out, S = fusion_forward(self.blocks[layer], h, cands, excluded=excluded)
        act.r, act.z, act.out, act.attention = h, cands, out, S
        self.last_attention[layer] = S
        if ctx.trace is not None:
            ctx.trace.record(S, layer, ctx.tokens, ctx.mask)
        return out

    def describe(self):
        return {"mechanism": self.mechanism, "stack": self.stack.tags, "exclusion_mode": self.exclusion_mode}


def attach(model, mechanism, *, stack=None, adapter=None, seed=0, reduction=8, rank=8, alpha=16,
           exclusion_mode="exclude", tag="task"):
    """Instrument ``model`` with one mechanism and register its parameters.

    ``mechanism`` is ``task-adapter``, ``language-adapter``, ``lora``,
    ``fusion`` or ``advfusion``, or a prebuilt :class:`Attachment`.
    """
    if model.attachment is not None:
        raise UsageError(f"model already has a {model.attachment.mechanism} attachment")
    cfg = model.config
    if isinstance(mechanism, Attachment):
        att = mechanism
    elif mechanism in ("task-adapter", "language-adapter"):
        kind = "language" if mechanism == "language-adapter" else "task"
        adapter = adapter or Adapter.create(cfg, tag, kind=kind, reduction=reduction, seed=seed)
        att = AdapterAttachment(adapter)
    elif mechanism == "lora":
        att = LoraAttachment.create(cfg, rank=rank, alpha=alpha, seed=seed)
    elif mechanism in ("fusion", "advfusion"):
        if stack is None:
            raise UsageError(f"{mechanism} needs an adapter stack")
        att = FusionAttachment.create(cfg, stack, mode=mechanism, exclusion_mode=exclusion_mode, seed=seed)
    else:
        raise UsageError(f"unknown mechanism {mechanism!r}")
    named = att.named_parameters()
    for name, (t, _) in named.items():
        if t.dtype != model.np_dtype:
            raise DimensionError(f"{name}: dtype {t.dtype} does not match model dtype {model.np_dtype}")
    _check_layout(att, cfg)
    for name, (t, group) in named.items():
        model.register(name, t, group)
    model.attachment = att
    return att


def _check_layout(att, cfg):
    adapters = []
    if isinstance(att, AdapterAttachment):
        adapters = [att.adapter]
    elif isinstance(att, FusionAttachment):
        adapters = att.stack.adapters
        if len(att.blocks) != cfg.n_layers or att.blocks[0].query.shape != (cfg.hidden, cfg.hidden):
            raise DimensionError(f"fusion blocks do not fit {cfg.n_layers} layers of hidden size {cfg.hidden}")
    elif isinstance(att, LoraAttachment):
        if len(att.deltas) != cfg.n_layers or att.deltas[0]["q"].a.shape[0] != cfg.hidden:
            raise DimensionError(f"LoRA deltas do not fit {cfg.n_layers} layers of hidden size {cfg.hidden}")
    for a in adapters:
        if len(a.blocks) != cfg.n_layers:
            raise DimensionError(f"adapter {a.tag!r} has {len(a.blocks)} layers, model has {cfg.n_layers}")
        if a.blocks[0].down.shape[0] != cfg.hidden:
            raise DimensionError(f"adapter {a.tag!r} hidden size {a.blocks[0].down.shape[0]} != {cfg.hidden}")


def detach(model):
    att = model.attachment
    if att is None:
        raise UsageError("model has no attachment")
    model.unregister(att.named_parameters())
    model.attachment = None
    return att
