"""Fusion attention traces, per-layer language contributions and heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError


class AttentionTrace:
    """Accumulates fusion attention per (layer, adapter).

    Pass an instance as ``trace=`` to :meth:`TransformerModel.encode`; the
    fusion attachment calls :meth:`record` once per layer.  With
    ``per_token=True`` every real token's attention row is kept as well,
    keyed by a running sequence index.
    """

    def __init__(self, n_layers, tags, per_token=False):
        self.tags = list(tags)
        self.n_layers = int(n_layers)
        self.sums = np.zeros((self.n_layers, len(self.tags)), dtype=np.float64)
        self.token_count = np.zeros(self.n_layers, dtype=np.int64)
        self.per_token = per_token
        self.records = []  # (sequence, position, token id, layer, attention row)
        self._seen = np.zeros(self.n_layers, dtype=np.int64)

    def record(self, S, layer, tokens, mask=None):
        if not 0 <= layer < self.n_layers:
            raise UsageError(f"layer {layer} outside [0, {self.n_layers})")
        S = np.asarray(S, dtype=np.float64)
        tokens = np.asarray(tokens)
        if S.ndim == 2:
            S, tokens = S[None], tokens[None]
            mask = None if mask is None else np.asarray(mask)[None]
        if S.shape[-1] != len(self.tags):
            raise UsageError(f"attention has {S.shape[-1]} columns, trace tracks {len(self.tags)} adapters")
        keep = np.ones(S.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        self.sums[layer] += S[keep].sum(axis=0)
        self.token_count[layer] += int(keep.sum())
        if self.per_token:
            base = self._seen[layer]
            for b in range(S.shape[0]):
                for t in np.flatnonzero(keep[b]):
                    self.records.append((int(base + b), int(t), int(tokens[b, t]), layer, S[b, t].copy()))
        self._seen[layer] += S.shape[0]

    def means(self):
        if np.any(self.token_count == 0):
            raise DataError("trace has a layer with no recorded tokens")
        return self.sums / self.token_count[:, None]

    def sequence(self, index):
        """Token ids and a (layer, position, adapter) attention array for one sequence."""
        if not self.per_token:
            raise UsageError("per-token recording is disabled for this trace")
        rows = [r for r in self.records if r[0] == index]
        if not rows:
            raise DataError(f"no per-token records for sequence {index}")
        positions = sorted({r[1] for r in rows})
        col = {p: i for i, p in enumerate(positions)}
        ids = [0] * len(positions)
        att = np.zeros((self.n_layers, len(positions), len(self.tags)))
        for _, pos, tok, layer, row in rows:
            ids[col[pos]] = tok
            att[layer, col[pos]] = row
        return ids, att


@dataclass(frozen=True)
class LayerContribution:
    layer: int
    means: tuple
    normalized: tuple
    percentages: tuple


@dataclass(frozen=True)
class ContributionReport:
    tags: tuple
    layers: tuple

    def rows(self):
        for lc in self.layers:
            for i, tag in enumerate(self.tags):
                yield lc.layer, tag, lc.means[i], lc.normalized[i], lc.percentages[i]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "adapter_tag", "mean_attention", "normalized", "percentage"])
            for layer, tag, m, n, p in self.rows():
                w.writerow([layer, tag, repr(float(m)), repr(float(n)), repr(float(p))])


def minmax_percentages(means):
    """Min-max normalise, then rescale so the layer sums to 100.

    All-equal means give uniform percentages.
    """
    m = np.asarray(means, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.ones_like(m), np.full_like(m, 100.0 / m.size)
    norm = (m - lo) / (hi - lo)
    return norm, norm / norm.sum() * 100.0


def contributions(trace: AttentionTrace) -> ContributionReport:
    layers = []
    for l, row in enumerate(trace.means()):
        norm, pct = minmax_percentages(row)
        layers.append(LayerContribution(l, tuple(row), tuple(norm), tuple(pct)))
    return ContributionReport(tuple(trace.tags), tuple(layers))


def heatmap_export(trace: AttentionTrace, vocab, path, example=0, layer=None):
    """Write an adapters x tokens CSV for one sequence.

    The header holds decoded token texts; ``layer=None`` averages the
    attention over all layers.  Returns the written matrix.
    """
    ids, att = trace.sequence(example)
    mat = att.mean(axis=0) if layer is None else att[layer]
    texts = [vocab.token_text(i) for i in ids]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["adapter"] + texts)
        for j, tag in enumerate(trace.tags):
            w.writerow([tag] + [repr(float(x)) for x in mat[:, j]])
    return mat.T
