"""Bimodal (code, documentation) corpora, method-name masking and splits."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .tokenizer import NAME_MASK, Vocabulary


@dataclass(frozen=True)
class Example:
    lang: str
    code: str
    doc: str
    name: str | None = None

    def to_dict(self):
        d = {"lang": self.lang, "code": self.code, "doc": self.doc}
        if self.name is not None:
            d["name"] = self.name
        return d


@dataclass(frozen=True)
class Corpus:
    examples: tuple
    splits: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)

    @property
    def counts(self) -> dict[str, int]:
        return dict(Counter(e.lang for e in self.examples))

    @property
    def languages(self) -> list[str]:
        """Languages in order of first appearance."""
        return list(dict.fromkeys(e.lang for e in self.examples))

    def low_resource(self, ratio=0.2) -> list[str]:
        counts = self.counts
        top = max(counts.values())
        return [l for l in self.languages if counts[l] <= ratio * top]

    def subset(self, split=None, lang=None) -> list[Example]:
        idx = range(len(self.examples)) if split is None else self.splits[split]
        out = [self.examples[i] for i in idx]
        if lang is not None:
            out = [e for e in out if e.lang == lang]
        return out


# ----------------------------------------------------------------------------
# jsonl


def load_jsonl(path) -> Corpus:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            for key in ("lang", "code", "doc"):
                if not isinstance(rec.get(key), str):
                    raise DataError(f"{path}:{lineno}: missing required field {key!r}")
            if not rec["code"]:
                raise DataError(f"{path}:{lineno}: empty code")
            name = rec.get("name")
            if name is not None and not isinstance(name, str):
                raise DataError(f"{path}:{lineno}: field 'name' must be a string")
            examples.append(Example(rec["lang"], rec["code"], rec["doc"], name or None))
    if not examples:
        raise DataError(f"{path}: no records")
    return Corpus(tuple(examples))


def save_jsonl(corpus: Corpus, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in corpus.examples:
            fh.write(json.dumps(e.to_dict(), ensure_ascii=False) + "\n")


# ----------------------------------------------------------------------------
# splits

SPLIT_NAMES = {2: ("train", "test"), 3: ("train", "valid", "test")}


def split(corpus: Corpus, ratios=(0.8, 0.1, 0.1), seed=0) -> Corpus:
    """Language-stratified split; largest-remainder rounding per language."""
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios {ratios} must be non-negative and sum to 1")
    names = SPLIT_NAMES.get(len(ratios), tuple(f"split{i}" for i in range(len(ratios))))
    rng = np.random.default_rng(seed)
    parts = {n: [] for n in names}
    for lang in corpus.languages:
        idx = [i for i, e in enumerate(corpus.examples) if e.lang == lang]
        if len(idx) < len(ratios):
            raise DataError(f"language {lang!r} has {len(idx)} examples, fewer than {len(ratios)} splits")
        idx = [idx[i] for i in rng.permutation(len(idx))]
        exact = [r * len(idx) for r in ratios]
        sizes = [math.floor(x) for x in exact]
        order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - sizes[k]), k))
        for k in order[: len(idx) - sum(sizes)]:
            sizes[k] += 1
        start = 0
        for n, size in zip(names, sizes):
            parts[n].extend(idx[start : start + size])
            start += size
    return Corpus(corpus.examples, {n: tuple(sorted(v)) for n, v in parts.items()})


# ----------------------------------------------------------------------------
# method names

_SUBTOKEN = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def subtokenize(name: str) -> list[str]:
    """Split an identifier on camelCase, underscores and digits; lowercase."""
    out = []
    for part in re.split(r"[^A-Za-z0-9]+", name):
        out.extend(t.lower() for t in _SUBTOKEN.findall(part))
    return out


def _name_pattern(name):
    return re.compile(r"(?<![A-Za-z0-9_])" + re.escape(name) + r"(?![A-Za-z0-9_])")


@dataclass(frozen=True)
class MaskedName:
    input_ids: list
    target_ids: list
    subtokens: list


def mask_method_name(ex: Example, vocab: Vocabulary) -> MaskedName:
    """Replace every whole-token occurrence of ``ex.name`` with the name mask."""
    if not ex.name:
        raise DataError("example has no method name")
    pieces = _name_pattern(ex.name).split(ex.code)
    if len(pieces) == 1:
        raise DataError(f"method name {ex.name!r} does not occur in the code")
    ids: list[int] = []
    for i, piece in enumerate(pieces):
        if i:
            ids.append(NAME_MASK)
        ids.extend(vocab.encode(piece))
    subs = subtokenize(ex.name)
    return MaskedName(ids, vocab.encode(" ".join(subs)), subs)


def masked_text(ex: Example) -> str:
    return _name_pattern(ex.name).sub("<name>", ex.code)


# ----------------------------------------------------------------------------
# synthetic corpus

LANGUAGE_TAGS = ("go", "java", "javascript", "php", "python", "ruby")

VERBS = {
    "get": "returns the {b} of the {a}",
    "set": "sets the {b} of the {a}",
    "load": "loads the {a} {b} from disk",
    "save": "saves the {a} {b} to disk",
    "find": "finds the {b} for the given {a}",
    "check": "checks whether the {a} has a valid {b}",
    "build": "builds a new {a} {b}",
    "parse": "parses the {a} {b} string",
}
NOUNS = ("user", "file", "order", "item", "config", "node", "path", "token", "page", "record", "cache", "stream")
ARGS = ("value", "data", "ctx", "key", "obj", "input", "opts", "src")

# keyword, case, open, close, return keyword, statement end, arg prefix, field access
STYLES = {
    "go": ("func", "camel", "{", "}", "return", "", "", "."),
    "java": ("public Object", "camel", "{", "}", "return", ";", "Object ", "."),
    "javascript": ("function", "camel", "{", "}", "return", ";", "", "."),
    "php": ("function", "camel", "{", "}", "return", ";", "$", "->"),
    "python": ("def", "snake", ":", "", "return", "", "", "."),
    "ruby": ("def", "snake", "", "end", "", "", "", "."),
}


def _fmt_name(words, case):
    if case == "snake":
        return "_".join(words)
    return words[0] + "".join(w.capitalize() for w in words[1:])


def _render(lang, verb, a, b, arg, extra):
    kw, case, op, cl, ret, end, pre, dot = STYLES[lang]
    name = _fmt_name([verb, a, b], case)
    field = _fmt_name([a, b], case)
    body = []
    if extra:
        body.append(f"{pre}{arg} = {_fmt_name(['load', a], case)}({pre}{arg}){end}")
    expr = {
        "get": f"{pre}{arg}{dot}{field}",
        "set": f"{pre}{arg}{dot}{field} = {b}",
        "load": f"read{dot}{field}({pre}{arg})",
        "save": f"write{dot}{field}({pre}{arg})",
        "find": f"lookup{dot}{b}({pre}{arg}{dot}{a})",
        "check": f"{pre}{arg}{dot}{b} != null",
        "build": f"new {field}({pre}{arg})",
        "parse": f"split{dot}{b}({pre}{arg})",
    }[verb]
    body.append(f"{ret} {expr}{end}".strip())
    head = f"{kw} {name}({pre}{arg}) {op}".rstrip()
    return name, head + " " + " ".join(body) + (" " + cl if cl else "")


def gen_synthetic(n_langs=3, per_lang_counts=None, seed=0) -> Corpus:
    """Template-generated function/doc pairs over toy language styles.

    Every language draws from the same verbs, nouns and argument names; only
    keywords, delimiters and identifier casing differ.  The last language is
    the low-resource one under the default counts.
    """
    if n_langs < 2:
        raise ConfigError("need at least two languages")
    if per_lang_counts is None:
        per_lang_counts = [200] * (n_langs - 1) + [40]
    if len(per_lang_counts) != n_langs:
        raise ConfigError("per_lang_counts must have one entry per language")
    if n_langs <= len(LANGUAGE_TAGS):
        tags = list(LANGUAGE_TAGS[: n_langs - 1]) + ["ruby"]
    else:
        tags = [f"lang{i}" for i in range(n_langs)]
    style_of = {t: (t if t in STYLES else LANGUAGE_TAGS[i % len(LANGUAGE_TAGS)]) for i, t in enumerate(tags)}
    rng = np.random.default_rng(seed)
    verbs = list(VERBS)
    examples = []
    for tag, count in zip(tags, per_lang_counts):
        for _ in range(int(count)):
            verb = verbs[rng.integers(len(verbs))]
            a, b = (NOUNS[i] for i in rng.choice(len(NOUNS), size=2, replace=False))
            arg = ARGS[rng.integers(len(ARGS))]
            extra = bool(rng.random() < 0.3)
            name, code = _render(style_of[tag], verb, a, b, arg, extra)
            doc = VERBS[verb].format(a=a, b=b)
            examples.append(Example(tag, code, doc, name))
    return Corpus(tuple(examples))
