"""Checkpoint and adapter-bank files.

Both use one container: a single-line JSON manifest, a newline, then raw
little-endian float64 blocks whose byte offsets (relative to the end of
the manifest line) are listed in the manifest. ``content_hash`` is the
SHA-256 of the manifest without that field followed by the data blocks.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .adapters import AdapterBank, AdapterPair, AttributeAdapter
from .diffusion import schedule_from_betas
from .errors import ArtifactMismatchError
from .nn import DenoiserModel, ModelSpec
from .world import ConditionVocab

FORMAT_VERSION = 1


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config_dict):
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()[:16]


def _pack(kind, arrays, meta):
    blocks, entries, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    data = b"".join(blocks)
    manifest = {"format": f"attrdebias-{kind}", "version": FORMAT_VERSION, "arrays": entries, "meta": meta}
    digest = hashlib.sha256(canonical_json(manifest).encode() + data).hexdigest()
    manifest["content_hash"] = digest
    return canonical_json(manifest).encode() + b"\n" + data, digest


def _unpack(blob, kind):
    head, sep, data = blob.partition(b"\n")
    if not sep:
        raise ArtifactMismatchError("file has no manifest line")
    try:
        manifest = json.loads(head)
    except json.JSONDecodeError as exc:
        raise ArtifactMismatchError(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != f"attrdebias-{kind}":
        raise ArtifactMismatchError(f"expected a {kind} file, found {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ArtifactMismatchError(f"unsupported format version {manifest.get('version')}")
    stated = manifest.pop("content_hash", None)
    if hashlib.sha256(canonical_json(manifest).encode() + data).hexdigest() != stated:
        raise ArtifactMismatchError("content hash mismatch; file is corrupted")
    manifest["content_hash"] = stated
    arrays = {}
    for e in manifest["arrays"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return manifest, arrays


# -- checkpoints ----------------------------------------------------------------

def checkpoint_bytes(model, sched, cfg_hash=""):
    meta = {
        "architecture": model.spec.to_dict(),
        "schedule": {"beta": sched.beta.tolist()},
        "vocab": list(model.vocab.tokens),
        "config_hash": cfg_hash,
    }
    return _pack("checkpoint", sorted(model.params.items()), meta)


def save_checkpoint(path, model, sched, cfg_hash=""):
    blob, digest = checkpoint_bytes(model, sched, cfg_hash)
    with open(path, "wb") as fh:
        fh.write(blob)
    return digest


def load_checkpoint(path):
    """Returns ``(model, schedule, manifest)``; the model comes back frozen."""
    with open(path, "rb") as fh:
        manifest, arrays = _unpack(fh.read(), "checkpoint")
    meta = manifest["meta"]
    spec = ModelSpec(**meta["architecture"])
    model = DenoiserModel(spec, arrays, ConditionVocab(meta["vocab"])).freeze()
    return model, schedule_from_betas(meta["schedule"]["beta"]), manifest


# -- banks ----------------------------------------------------------------------

def bank_bytes(bank, architecture, base_hash, train_config, cfg_hash=""):
    arrays = []
    for a in bank.adapters:
        for pair in a.pairs:
            arrays.append((f"{a.category}/{pair.target}.p", pair.p))
            arrays.append((f"{a.category}/{pair.target}.q", pair.q))
    meta = {
        "attribute": bank.attribute,
        "categories": list(bank.categories),
        "targets": bank.targets,
        "architecture": architecture,
        "base_hash": base_hash,
        "train_config": train_config,
        "metrics": dict(bank.meta),
        "config_hash": cfg_hash,
    }
    return _pack("bank", arrays, meta)


def save_bank(path, bank, architecture, base_hash, train_config, cfg_hash=""):
    blob, digest = bank_bytes(bank, architecture, base_hash, train_config, cfg_hash)
    with open(path, "wb") as fh:
        fh.write(blob)
    return digest


def load_bank(path):
    with open(path, "rb") as fh:
        manifest, arrays = _unpack(fh.read(), "bank")
    meta = manifest["meta"]
    adapters = [
        AttributeAdapter(cat, [AdapterPair(t, arrays[f"{cat}/{t}.p"], arrays[f"{cat}/{t}.q"]) for t in meta["targets"]])
        for cat in meta["categories"]
    ]
    bank = AdapterBank(meta["attribute"], meta["categories"], adapters, dict(meta["metrics"]))
    return bank, manifest


def check_bank_compatible(bank_manifest, checkpoint_manifest):
    """Raise on architecture mismatch; return ``True`` when the bank was
    trained against exactly this checkpoint, ``False`` for a transfer."""
    if bank_manifest["meta"]["architecture"] != checkpoint_manifest["meta"]["architecture"]:
        raise ArtifactMismatchError(
            f"bank {bank_manifest['meta']['attribute']!r} was trained for a different architecture"
        )
    return bank_manifest["meta"]["base_hash"] == checkpoint_manifest["content_hash"]
