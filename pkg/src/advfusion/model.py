"""Miniature encoder-decoder transformer with adapter slots in the encoder."""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DataError, UsageError
from .tokenizer import BOS, EOS, PAD

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    n_layers: int = 4
    hidden: int = 64
    n_heads: int = 4
    ff_dim: int = 256
    max_len: int = 128
    n_decoder_layers: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        for key in ("vocab", "n_layers", "hidden", "n_heads", "ff_dim", "max_len", "n_decoder_layers"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LayerActivations:
    """Per-layer tensors exposed for analysis (all tokens x hidden)."""

    h: Tensor
    r: Tensor | None = None
    z: list | None = None
    out: Tensor | None = None
    attention: np.ndarray | None = None


@dataclass
class ForwardContext:
    tokens: np.ndarray
    mask: np.ndarray
    exclude: str | None = None
    trace: object = None


@dataclass
class EncoderOutput:
    states: Tensor
    mask: np.ndarray
    activations: list = field(default_factory=list)


ParameterCount = namedtuple("ParameterCount", ["total", "by_group"])


def _uniform(rng, shape, dtype, materialize=True):
    if not materialize:
        return np.zeros(shape, dtype=dtype)
    return rng.uniform(-0.05, 0.05, size=shape).astype(dtype)


class TransformerModel:
    """Post-norm encoder-decoder.

    ``params`` maps hierarchical names to leaf tensors and ``groups`` maps the
    same names to a group tag (``base``, ``decoder``, ``adapter:<tag>``,
    ``fusion`` or ``lora``).  One attachment at a time may instrument the
    encoder; see :mod:`advfusion.adapters`.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, materialize: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.attachment = None
        self._build(np.random.default_rng(seed), materialize)

    # -- registry ---------------------------------------------------------

    @property
    def np_dtype(self):
        return np.dtype(self.config.dtype)

    def register(self, name, tensor, group):
        if name in self.params:
            raise UsageError(f"parameter {name!r} already registered")
        self.params[name] = tensor
        self.groups[name] = group
        return tensor

    def unregister(self, names):
        for name in names:
            del self.params[name]
            del self.groups[name]

    def names_in(self, *groups):
        return [n for n, g in self.groups.items() if g in groups]

    def group_names(self):
        return sorted(set(self.groups.values()))

    def _new(self, name, group, shape, rng, init, materialize):
        dt = self.np_dtype
        if init == "uniform":
            arr = _uniform(rng, shape, dt, materialize)
        elif init == "ones":
            arr = np.ones(shape, dtype=dt)
        else:
            arr = np.zeros(shape, dtype=dt)
        return self.register(name, Tensor(arr), group)

    def _linear_params(self, prefix, group, n_in, n_out, rng, mat, bias=True):
        self._new(f"{prefix}.w", group, (n_in, n_out), rng, "uniform", mat)
        if bias:
            self._new(f"{prefix}.b", group, (n_out,), rng, "zeros", mat)

    def _ln_params(self, prefix, group, h, rng, mat):
        self._new(f"{prefix}.g", group, (h,), rng, "ones", mat)
        self._new(f"{prefix}.b", group, (h,), rng, "zeros", mat)

    def _build(self, rng, mat):
        c = self.config
        h, V = c.hidden, c.vocab
        self._new("embed.tok", "base", (V, h), rng, "uniform", mat)
        self._new("embed.pos", "base", (c.max_len, h), rng, "uniform", mat)
        self._ln_params("embed.ln", "base", h, rng, mat)
        for l in range(c.n_layers):
            p = f"encoder.{l}"
            for proj in "qkvo":
                # key bias cancels inside the softmax
                self._linear_params(f"{p}.attn.{proj}", "base", h, h, rng, mat, bias=proj != "k")
            self._ln_params(f"{p}.ln1", "base", h, rng, mat)
            self._linear_params(f"{p}.ff1", "base", h, c.ff_dim, rng, mat)
            self._linear_params(f"{p}.ff2", "base", c.ff_dim, h, rng, mat)
            self._ln_params(f"{p}.ln2", "base", h, rng, mat)
        self._linear_params("mlm", "base", h, V, rng, mat)

        self._new("decoder.embed.tok", "decoder", (V, h), rng, "uniform", mat)
        self._new("decoder.embed.pos", "decoder", (c.max_len, h), rng, "uniform", mat)
        self._ln_params("decoder.embed.ln", "decoder", h, rng, mat)
        for l in range(c.n_decoder_layers):
            p = f"decoder.{l}"
            for part in ("self", "cross"):
                for proj in "qkvo":
                    self._linear_params(f"{p}.{part}.{proj}", "decoder", h, h, rng, mat, bias=proj != "k")
            for k in (1, 2, 3):
                self._ln_params(f"{p}.ln{k}", "decoder", h, rng, mat)
            self._linear_params(f"{p}.ff1", "decoder", h, c.ff_dim, rng, mat)
            self._linear_params(f"{p}.ff2", "decoder", c.ff_dim, h, rng, mat)
        self._linear_params("decoder.head", "decoder", h, V, rng, mat)

    # -- building blocks --------------------------------------------------

    def _linear(self, prefix, x):
        out = ad.matmul(x, self.params[f"{prefix}.w"])
        b = self.params.get(f"{prefix}.b")
        return out if b is None else ad.add_bias(out, b)

    def _ln(self, prefix, x):
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _split_heads(self, x):
        B, T, h = x.shape
        H = self.config.n_heads
        return ad.swapaxes(ad.reshape(x, (B, T, H, h // H)), 1, 2)

    def _attention(self, prefix, xq, xkv, mask_add, layer=None):
        q = self._linear(f"{prefix}.q", xq)
        k = self._linear(f"{prefix}.k", xkv)
        v = self._linear(f"{prefix}.v", xkv)
        if layer is not None and self.attachment is not None:
            dq = self.attachment.project(layer, "q", xq)
            dv = self.attachment.project(layer, "v", xkv)
            if dq is not None:
                q = ad.add(q, dq)
            if dv is not None:
                v = ad.add(v, dv)
        B, Tq, h = q.shape
        dh = h // self.config.n_heads
        qh, kh, vh = self._split_heads(q), self._split_heads(k), self._split_heads(v)
        scores = ad.scale(ad.matmul(qh, ad.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
        probs = ad.softmax_lastdim(ad.add_constant(scores, mask_add))
        ctx = ad.reshape(ad.swapaxes(ad.matmul(probs, vh), 1, 2), (B, Tq, h))
        return self._linear(f"{prefix}.o", ctx)

    def _embed(self, prefix, ids):
        B, T = ids.shape
        pos = np.broadcast_to(np.arange(T), (B, T))
        x = ad.add(ad.embedding(self.params[f"{prefix}.tok"], ids), ad.embedding(self.params[f"{prefix}.pos"], pos))
        return self._ln(f"{prefix}.ln", x)

    def _check_ids(self, tokens, truncate):
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise DataError("expected a non-empty token sequence or a 2-D batch")
        if ids.shape[1] > self.config.max_len:
            if not truncate:
                raise DataError(f"input of length {ids.shape[1]} exceeds max_len={self.config.max_len}")
            ids = ids[:, : self.config.max_len]
        if ids.min() < 0 or ids.max() >= self.config.vocab:
            raise DataError(f"token id outside vocabulary of size {self.config.vocab}")
        return ids

    # -- public forward passes -------------------------------------------

    def encode(self, tokens, *, truncate=False, exclude=None, trace=None) -> EncoderOutput:
        """Run the encoder; ``tokens`` is one id sequence or a padded 2-D batch.

        ``exclude`` names a language whose adapter candidate is withheld from
        fusion (only meaningful with a fusion attachment).  ``trace`` receives
        fusion attention weights when given.
        """
        ids = self._check_ids(tokens, truncate)
        keep = ids != PAD
        mask_add = np.where(keep, 0.0, NEG_INF)[:, None, None, :]
        ctx = ForwardContext(tokens=ids, mask=keep, exclude=exclude, trace=trace)
        if exclude is not None and self.attachment is None:
            raise UsageError("exclusion requires a fusion attachment")
        x = self._embed("embed", ids)
        acts = []
        for l in range(self.config.n_layers):
            p = f"encoder.{l}"
            a = self._attention(f"{p}.attn", x, x, mask_add, layer=l)
            x1 = self._ln(f"{p}.ln1", ad.add(x, a))
            ff = self._linear(f"{p}.ff2", ad.relu(self._linear(f"{p}.ff1", x1)))
            h = self._ln(f"{p}.ln2", ad.add(x1, ff))
            act = LayerActivations(h=h)
            if self.attachment is not None:
                x = self.attachment.adapt(l, h, ctx, act)
            else:
                x = h
            acts.append(act)
        return EncoderOutput(states=x, mask=keep, activations=acts)

    def mlm_logits(self, enc: EncoderOutput) -> Tensor:
        return self._linear("mlm", enc.states)

    def decoder_logits(self, enc: EncoderOutput, dec_in) -> Tensor:
        ids = np.asarray(dec_in, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        if T > self.config.max_len:
            raise DataError(f"decoder input of length {T} exceeds max_len={self.config.max_len}")
        causal = np.triu(np.full((T, T), NEG_INF), k=1)[None, None]
        cross = np.where(enc.mask, 0.0, NEG_INF)[:, None, None, :]
        y = self._embed("decoder.embed", ids)
        for l in range(self.config.n_decoder_layers):
            p = f"decoder.{l}"
            y = self._ln(f"{p}.ln1", ad.add(y, self._attention(f"{p}.self", y, y, causal)))
            y = self._ln(f"{p}.ln2", ad.add(y, self._attention(f"{p}.cross", y, enc.states, cross)))
            ff = self._linear(f"{p}.ff2", ad.relu(self._linear(f"{p}.ff1", y)))
            y = self._ln(f"{p}.ln3", ad.add(y, ff))
        return self._linear("decoder.head", y)

    def decode_generate(self, enc: EncoderOutput, max_new: int, mode: str = "greedy"):
        """Greedy autoregressive decoding; each output ends at EOS (inclusive) or ``max_new``."""
        if mode != "greedy":
            raise UsageError(f"unsupported decoding mode {mode!r}")
        if max_new < 1:
            raise UsageError("max_new must be at least 1")
        B = enc.states.shape[0]
        max_new = min(max_new, self.config.max_len - 1)
        seqs = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        with no_grad():
            for _ in range(max_new):
                logits = self.decoder_logits(enc, seqs).data[:, -1, :]
                nxt = logits.argmax(axis=-1)
                for i in np.flatnonzero(~done):
                    out[i].append(int(nxt[i]))
                done |= nxt == EOS
                if done.all():
                    break
                seqs = np.concatenate([seqs, np.where(done, PAD, nxt)[:, None]], axis=1)
        return out


def count_parameters(model: TransformerModel, filter: str = "all") -> ParameterCount:
    """Exact parameter count, with a per-group breakdown.

    ``filter`` is ``all``, ``trainable`` (``requires_grad`` set) or ``frozen``.
    """
    if filter not in ("all", "trainable", "frozen"):
        raise UsageError(f"unknown filter {filter!r}")
    by_group: dict[str, int] = {}
    for name, t in model.params.items():
        if filter == "trainable" and not t.requires_grad:
            continue
        if filter == "frozen" and t.requires_grad:
            continue
        g = model.groups[name]
        by_group[g] = by_group.get(g, 0) + int(np.prod(t.shape))
    return ParameterCount(sum(by_group.values()), by_group)
