"""Run-directory workflow behind the CLI commands.

Layout of one run directory::

    config.json            resolved configuration
    checkpoint.fgc         base model + schedule
    banks/<attribute>.fgb  one adapter bank per attribute
    records/<set>.jsonl    generated samples, one JSON object per line
    records/metadata.json  provenance (hashes, transfer warnings, timings)
    reports/               pretrain/train CSVs and eval.json

Everything except ``records/metadata.json`` is a pure function of the
config, so two runs of the same config are byte-identical.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .diffusion import make_schedule
from .errors import ArtifactMismatchError, ConfigError
from .inference import DistributionSpec, generate_batch, uniform_pmf
from .io import check_bank_compatible, load_bank, load_checkpoint, save_bank, save_checkpoint
from .metrics import fd_score, fidelity_score, split_by_component
from .nn import ModelSpec
from .train import pretrain_base, train_attribute
from .world import classify, make_world

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.fgc"


class RunLockedError(ConfigError):
    def __init__(self, path):
        super().__init__("out", f"run directory is locked by another process ({path})")


@contextmanager
def run_lock(out):
    """Exclusive lock file; a second writer fails instead of interleaving."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(path) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        path.unlink(missing_ok=True)


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            # repr keeps full precision with a '.' decimal regardless of locale
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def world_of(cfg):
    return make_world(cfg.world, cfg.world_seed)


def expected_architecture(cfg, world):
    m = cfg.model
    return ModelSpec(dim=world.dim, vocab_size=len(world.vocab), max_timesteps=cfg.schedule.T_steps,
                     hidden_tokens=m.hidden_tokens, token_dim=m.token_dim, cond_tokens=m.cond_tokens,
                     cond_dim=m.cond_dim, attn_dim=m.attn_dim, heads=m.heads, time_dim=m.time_dim,
                     layout=tuple(m.layout)).to_dict()


def load_base(cfg, world, checkpoint):
    path = Path(checkpoint)
    if not path.exists():
        raise ConfigError("checkpoint", f"no checkpoint at {path}")
    model, sched, manifest = load_checkpoint(path)
    if manifest["meta"]["architecture"] != expected_architecture(cfg, world):
        raise ArtifactMismatchError(f"checkpoint {path} architecture does not match the config")
    if list(model.vocab.tokens) != list(world.vocab.tokens):
        raise ArtifactMismatchError(f"checkpoint {path} vocabulary does not match the config world")
    return model, sched, manifest


# -- commands ---------------------------------------------------------------------

def pretrain(cfg, out, progress=None):
    out = Path(out)
    h = cfg.content_hash()
    world = world_of(cfg)
    s = cfg.schedule
    sched = make_schedule(s.T_steps, s.beta_min, s.beta_max)
    m = cfg.model
    kwargs = dict(hidden_tokens=m.hidden_tokens, token_dim=m.token_dim, cond_tokens=m.cond_tokens,
                  cond_dim=m.cond_dim, attn_dim=m.attn_dim, heads=m.heads, time_dim=m.time_dim,
                  layout=tuple(m.layout))
    model, history = pretrain_base(world, sched, cfg.pretrain_config(), kwargs, progress=progress)
    (out / "config.json").write_text(cfg.dumps())
    digest = save_checkpoint(out / CHECKPOINT, model, sched, h)
    _write_csv(out / "reports" / "pretrain_metrics.csv", ["epoch", "train_loss", "heldout_loss", "config_hash"],
               [(r["epoch"], r["train_loss"], r["heldout_loss"], h) for r in history])
    return {"checkpoint": str(out / CHECKPOINT), "content_hash": digest,
            "final_train_loss": history[-1]["train_loss"], "final_heldout_loss": history[-1]["heldout_loss"]}


def train_adapters(cfg, out, checkpoint=None, progress=None):
    out = Path(out)
    h = cfg.content_hash()
    world = world_of(cfg)
    model, sched, manifest = load_base(cfg, world, checkpoint or out / CHECKPOINT)
    targets = model.adapter_targets(cfg.adapters.placement, tuple(cfg.adapters.projections))
    banks, rows, summary = [], [], {}
    for name in cfg.attribute_order:
        tcfg = cfg.adapters.train_config(name, cfg.seed)
        bank, curve = train_attribute(model, world.attribute(name)[1], banks, tcfg, targets,
                                      cfg.adapters.group, sched, progress=progress)
        snapshot = json.loads(json.dumps({**vars(tcfg), "t_range": list(tcfg.t_range)}))
        (out / "banks").mkdir(parents=True, exist_ok=True)
        save_bank(out / "banks" / f"{name}.fgb", bank, manifest["meta"]["architecture"], manifest["content_hash"], snapshot, h)
        rows += [(name, c["category"], c["step"], c["L_guidance"], c["L_orth"], c["total"], h) for c in curve]
        summary[name] = dict(bank.meta)
        banks.append(bank)
    _write_csv(out / "reports" / "train_curves.csv",
               ["attribute", "category", "step", "L_guidance", "L_orth", "total", "config_hash"], rows)
    return summary


def _target_sets(cfg, world):
    sets = dict(cfg.generation.targets)
    if not sets:
        sets = {"uniform": {a.name: list(uniform_pmf(a.K).pmf) for a in world.attributes}}
    return sets


def sample(cfg, out, checkpoint=None, banks_dir=None):
    """Generate the base set plus one set per configured target."""
    out = Path(out)
    h = cfg.content_hash()
    world = world_of(cfg)
    ckpt = Path(checkpoint or out / CHECKPOINT)
    model, sched, manifest = load_base(cfg, world, ckpt)
    g = cfg.generation
    banks_dir = Path(banks_dir or out / "banks")
    sets = _target_sets(cfg, world)
    needed = [a for a in cfg.attribute_order if any(a in t for t in sets.values())]
    banks, warnings = {}, []
    for name in needed:
        path = banks_dir / f"{name}.fgb"
        if not path.exists():
            raise ConfigError("banks", f"no bank for attribute {name!r} at {path}")
        bank, bman = load_bank(path)
        if bank.categories != world.attribute(name)[1].categories:
            raise ArtifactMismatchError(f"bank {path} categories do not match the config world")
        if not check_bank_compatible(bman, manifest):
            msg = (f"bank {name!r} was trained against checkpoint {bman['meta']['base_hash'][:16]}, "
                   f"applying it to {manifest['content_hash'][:16]} (transfer mode)")
            log.warning(msg)
            warnings.append({"attribute": name, "bank_base_hash": bman["meta"]["base_hash"],
                             "checkpoint_hash": manifest["content_hash"], "message": msg})
        banks[name] = bank

    rec_dir = out / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    all_sets = {"base": {}, **sets}
    for i, (set_name, targets) in enumerate(all_sets.items()):
        t0 = time.perf_counter()
        order = [a for a in cfg.attribute_order if a in targets]
        specs = [DistributionSpec(a, tuple(targets[a])) for a in order]
        alpha = cfg.generation_alpha(order[0]) if order else 0.0
        recs = generate_batch(model, sched, g.group, specs, [banks[a] for a in order], g.n,
                              g.guidance_scale, alpha, [g.seed, cfg.seed, i])
        with open(rec_dir / f"{set_name}.jsonl", "w") as fh:
            for r in recs:
                fh.write(json.dumps({**r.to_json(), "set": set_name, "config_hash": h}, sort_keys=True) + "\n")
        timings[set_name] = time.perf_counter() - t0
    meta = {
        "config_hash": h,
        "checkpoint": str(ckpt),
        "checkpoint_hash": manifest["content_hash"],
        "sets": {k: {"targets": v, "n": g.n} for k, v in all_sets.items()},
        "transfer": warnings,
        "timings_seconds": timings,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    _write_json(rec_dir / "metadata.json", meta)
    return meta


def read_records(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def evaluate(cfg, out):
    out = Path(out)
    h = cfg.content_hash()
    world = world_of(cfg)
    meta_path = out / "records" / "metadata.json"
    if not meta_path.exists():
        raise ConfigError("records", f"no records in {out / 'records'}; run 'sample' first")
    meta = json.loads(meta_path.read_text())
    ev = cfg.eval
    sets = {}
    for set_name, info in meta["sets"].items():
        recs = read_records(out / "records" / f"{set_name}.jsonl")
        z = np.array([r["z0"] for r in recs], dtype=float).reshape(len(recs), world.dim)
        # base samples are scored against every target set, adapted sets against their own
        targets = {k: v["targets"] for k, v in meta["sets"].items() if k != "base"} if set_name == "base" \
            else {set_name: info["targets"]}
        fd = {}
        for tname, tmap in targets.items():
            fd[tname] = {a: fd_score(z, a, pmf, world, ev.bootstrap, ev.seed).to_dict() for a, pmf in tmap.items()}
        freqs = {}
        for a in world.attributes:
            cls = classify(world, z, a.name) if len(z) else np.zeros(0, int)
            freqs[a.name] = (np.bincount(cls, minlength=a.K) / max(1, len(z))).tolist()
        fid = fidelity_score(split_by_component(world, z), world, ev.fidelity_ref, ev.seed)
        sets[set_name] = {"n": len(z), "fd": fd, "frequencies": freqs, "fidelity": fid.to_dict()}
    report = {
        "label": cfg.label,
        "config_hash": h,
        "seed": cfg.seed,
        "placement": cfg.adapters.placement,
        "gamma": {a: cfg.adapters.train_config(a).gamma for a in cfg.attribute_order},
        "categories": {a.name: list(a.categories) for a in world.attributes},
        "sets": sets,
    }
    _write_json(out / "reports" / "eval.json", report)
    return report
