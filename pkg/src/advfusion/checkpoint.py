"""Binary checkpoints: ``AVF1`` magic, length-prefixed JSON manifest, then a
little-endian tensor blob.

Every tensor carries a group tag (``base``, ``decoder``, ``adapter:<tag>``,
``fusion`` or ``lora``) so a subset can be loaded on its own.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .adapters import Adapter, AdapterAttachment, AdapterStack, BottleneckAdapter, FusionAttachment, LoraAttachment, attach
from .autodiff import Tensor
from .errors import DimensionError, IntegrityError, MissingGroupError, UsageError, VersionError
from .model import ModelConfig, TransformerModel

MAGIC = b"AVF1"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    model: TransformerModel | None
    adapters: dict
    manifest: dict


def _attachment_info(att):
    if att is None:
        return None
    info = dict(att.describe())
    if isinstance(att, FusionAttachment):
        info["adapter_kinds"] = {a.tag: a.kind for a in att.stack.adapters}
    return info


def save_checkpoint(model, path, adapters=(), extra=None):
    """Write every registered parameter plus any detached ``adapters``.

    The file is written to a temporary sibling and renamed into place.
    """
    entries, chunks, offset = [], [], 0
    named = [(n, t, model.groups[n]) for n, t in model.params.items()]
    kinds = {}
    for a in adapters:
        if a.group in model.groups.values():
            continue
        kinds[a.tag] = a.kind
        named.extend((n, t, a.group) for n, t in a.named_tensors().items())
    att = model.attachment
    if isinstance(att, AdapterAttachment):
        kinds[att.adapter.tag] = att.adapter.kind
    for name, t, group in named:
        dt = _DTYPES[str(t.data.dtype)]
        raw = np.ascontiguousarray(t.data, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dt, "offset": offset,
                        "length": len(raw), "group": group})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "attachment": _attachment_info(att),
        "adapter_kinds": kinds,
        "entries": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    data = MAGIC + struct.pack("<I", len(head)) + head + blob
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".avf-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return manifest


def read_checkpoint(path):
    """Validate a checkpoint and return ``(manifest, {name: array})``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise IntegrityError(f"{path}: not an AVF1 checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    if 8 + n > len(data):
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[8 : 8 + n])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise IntegrityError(f"{path}: unreadable manifest") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    blob = data[8 + n :]
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise IntegrityError(f"{path}: checksum mismatch (file truncated or corrupted)")
    arrays, end = {}, 0
    for e in sorted(manifest["entries"], key=lambda e: e["offset"]):
        if e["offset"] < end or e["offset"] + e["length"] > len(blob):
            raise IntegrityError(f"{path}: entry {e['name']!r} overlaps or runs past the blob")
        end = e["offset"] + e["length"]
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"][1:])  # native byte order
    return manifest, arrays


def _groups_of(manifest):
    return {e["name"]: e["group"] for e in manifest["entries"]}


def _check_groups(manifest, groups):
    present = set(_groups_of(manifest).values())
    missing = [g for g in groups if g not in present]
    if missing:
        raise MissingGroupError(f"checkpoint has no group(s) {missing}; available: {sorted(present)}")


def _adapter_from(tag, kind, arrays, config=None):
    prefix = f"adapter.{tag}."
    layers = sorted({int(n[len(prefix):].split(".")[0]) for n in arrays if n.startswith(prefix)})
    blocks = []
    for l in layers:
        p = f"{prefix}{l}."
        if config is not None:
            w = arrays[p + "down.w"]
            if w.shape[0] != config.hidden:
                raise DimensionError(f"entry {p}down.w has shape {w.shape}, model hidden size is {config.hidden}")
        blocks.append(BottleneckAdapter(
            Tensor(arrays[p + "down.w"].copy()), Tensor(arrays[p + "down.b"].copy()),
            Tensor(arrays[p + "up.w"].copy()), Tensor(arrays[p + "up.b"].copy()),
            kind, tag if kind == "language" else None,
        ))
    if config is not None and len(blocks) != config.n_layers:
        raise DimensionError(f"adapter {tag!r} has {len(blocks)} layers, model has {config.n_layers}")
    return Adapter(tag, blocks, kind)


def load_adapter(path, tag, model=None) -> Adapter:
    """Load one adapter group; shapes are checked against ``model`` if given."""
    manifest, arrays = read_checkpoint(path)
    _check_groups(manifest, [f"adapter:{tag}"])
    kind = _adapter_kinds(manifest).get(tag, "language")
    return _adapter_from(tag, kind, arrays, None if model is None else model.config)


def _adapter_kinds(manifest):
    kinds = dict(manifest.get("adapter_kinds") or {})
    att = manifest.get("attachment") or {}
    kinds.update(att.get("adapter_kinds", {}))
    return kinds


def load_checkpoint(path, groups=None) -> Checkpoint:
    """Rebuild the model, its attachment and any stored adapters.

    With ``groups`` only those groups are read from the file; a model is
    rebuilt only when ``base`` is among them.  Nothing is returned unless
    the whole file validates.
    """
    manifest, arrays = read_checkpoint(path)
    by_name = _groups_of(manifest)
    if groups is not None:
        _check_groups(manifest, groups)
        arrays = {n: a for n, a in arrays.items() if by_name[n] in groups}
    kinds = _adapter_kinds(manifest)
    adapter_tags = sorted({g.split(":", 1)[1] for n, g in by_name.items() if g.startswith("adapter:") and n in arrays})
    adapters = {t: _adapter_from(t, kinds.get(t, "language"), arrays) for t in adapter_tags}
    model = None
    if groups is None or "base" in groups:
        config = ModelConfig(**manifest["config"])
        model = TransformerModel(config, materialize=False)
        att = manifest.get("attachment")
        if att is not None and groups is None:
            _rebuild_attachment(model, att, adapters, arrays)
        for name, t in model.params.items():
            if name in arrays:
                if arrays[name].shape != t.shape:
                    raise DimensionError(f"entry {name!r} has shape {arrays[name].shape}, expected {t.shape}")
                t.data = arrays[name].copy()
    return Checkpoint(model, adapters, manifest)


def _rebuild_attachment(model, info, adapters, arrays):
    mech = info["mechanism"]
    cfg = model.config
    if mech in ("task-adapter", "language-adapter"):
        attach(model, AdapterAttachment(adapters[info["tag"]]))
    elif mech == "lora":
        rank = arrays["lora.0.q.a"].shape[1]
        attach(model, LoraAttachment.create(cfg, rank=rank, alpha=info["alpha"]))
    elif mech in ("fusion", "advfusion"):
        stack = AdapterStack([adapters[t] for t in info["stack"]])
        attach(model, FusionAttachment.create(cfg, stack, mode=mech, exclusion_mode=info["exclusion_mode"]))
    else:
        raise UsageError(f"unknown attachment mechanism {mech!r} in checkpoint")


def load_into(model, path, groups):
    """Copy the named groups into an existing model's registered parameters.

    Every entry is shape-checked before anything is written.
    """
    manifest, arrays = read_checkpoint(path)
    _check_groups(manifest, groups)
    by_name = _groups_of(manifest)
    todo = []
    for name, arr in arrays.items():
        if by_name[name] not in groups:
            continue
        if name not in model.params:
            raise DimensionError(f"entry {name!r} has no counterpart in the model")
        if model.params[name].shape != arr.shape:
            raise DimensionError(f"entry {name!r} has shape {arr.shape}, model expects {model.params[name].shape}")
        todo.append((name, arr))
    for name, arr in todo:
        model.params[name].data = arr.astype(model.params[name].data.dtype)
    return [n for n, _ in todo]


def inspect(path):
    manifest, _ = read_checkpoint(path)
    groups = {}
    for e in manifest["entries"]:
        g = groups.setdefault(e["group"], {"tensors": 0, "values": 0})
        g["tensors"] += 1
        g["values"] += int(np.prod(e["shape"], dtype=np.int64))
    return {
        "format_version": manifest["format_version"],
        "config": manifest["config"],
        "attachment": manifest["attachment"],
        "groups": groups,
        "sha256": manifest["sha256"],
    }
