"""Base-model pretraining and data-free adapter optimisation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterBank, adapter_orthogonality, init_adapter, random_baseline, orthogonality_loss
from .diffusion import cfg_epsilon, ldm_loss, q_sample, reverse_step
from .errors import ConfigError, NumericalDivergenceError
from .nn import DenoiserModel, ModelSpec, backward
from .world import sample_dataset

log = logging.getLogger(__name__)


# -- pretraining -----------------------------------------------------------------

@dataclass
class PretrainConfig:
    n_samples: int = 20000
    epochs: int = 40
    batch: int = 256
    lr: float = 2e-3
    lr_final: float = 2e-4
    cond_dropout: float = 0.1
    group_token_prob: float = 0.5
    heldout: int = 1024
    init_seed: int = 0
    seed: int = 0


class Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1, c2 = 1 - self.b1 ** self.k, 1 - self.b2 ** self.k
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def assign_conditions(world, data, rng, group_token_prob):
    """Caption each sample with its group token or one of its category tokens."""
    n = len(data)
    use_group = rng.random(n) < group_token_prob
    which = rng.integers(0, len(world.attributes), n)
    cond = data.cond.copy()
    for i in np.flatnonzero(~use_group):
        j = which[i]
        cond[i] = world.vocab.id(world.attributes[j].categories[data.labels[i, j]])
    data.cond = cond
    return data


def pretrain_base(world, sched, cfg, model_kwargs=None, group_mix=None, progress=None):
    """Fit a conditional denoiser on the world's biased data.

    Returns ``(model, history)``; ``history`` holds per-epoch train loss and
    a held-out loss on fixed ``(x0, t, eps)`` draws.
    """
    rng = np.random.default_rng(cfg.seed)
    groups = list(world.groups)
    mix = np.asarray(group_mix if group_mix is not None else np.full(len(groups), 1.0 / len(groups)))
    counts = rng.multinomial(cfg.n_samples, mix)
    parts = [assign_conditions(world, sample_dataset(world, g, int(c), rng), rng, cfg.group_token_prob)
             for g, c in zip(groups, counts)]
    x = np.concatenate([p.samples for p in parts])
    cond = np.concatenate([p.cond for p in parts])

    spec = ModelSpec(dim=world.dim, vocab_size=len(world.vocab), max_timesteps=sched.T_steps, **(model_kwargs or {}))
    model = DenoiserModel.init(spec, seed=cfg.init_seed, vocab=world.vocab)

    hrng = np.random.default_rng([cfg.seed, 1])
    hidx = hrng.integers(0, len(x), cfg.heldout)
    held = (x[hidx], cond[hidx], hrng.integers(0, sched.T_steps, cfg.heldout),
            hrng.standard_normal((cfg.heldout, world.dim)))

    def heldout_loss():
        x0, c, t, eps = held
        pred = model.forward(q_sample(x0, t, eps, sched), t, c)
        return float(((pred - eps) ** 2).sum(axis=1).mean())

    opt = Adam(model.params, cfg.lr)
    steps_per_epoch = max(1, len(x) // cfg.batch)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch:(s + 1) * cfg.batch]
            c = cond[idx].copy()
            c[rng.random(len(idx)) < cfg.cond_dropout] = 0
            t = rng.integers(0, sched.T_steps, len(idx))
            eps = rng.standard_normal((len(idx), world.dim))
            loss, grads = ldm_loss(model, x[idx], c, t, eps, sched)
            if not np.isfinite(loss):
                raise NumericalDivergenceError(f"pretraining loss non-finite at epoch {epoch}", step=step)
            # cosine decay from lr to lr_final
            frac = step / max(1, total - 1)
            opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
            opt.step(model.params, grads)
            losses.append(loss)
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "heldout_loss": heldout_loss()}
        history.append(row)
        if progress:
            progress(row)
    return model.freeze(), history


# -- self-discovering adapter training ---------------------------------------------

@dataclass
class TrainConfig:
    eta: float = 1.0
    gamma: float = 0.1
    lr: float = 0.1
    iters: int = 2000
    alpha_scale: float = 0.3
    batch: int = 32
    t_range: tuple = (0.05, 0.95)
    discover_guidance: float = 1.0
    discover_pool: int = 8
    q_init_std: float = 0.2
    pairing: str = "positional"
    seed: int = 0

    def __post_init__(self):
        self.t_range = tuple(self.t_range)
        if not self.eta > 0:
            raise ConfigError("eta", f"must be > 0, got {self.eta}")
        if self.gamma < 0:
            raise ConfigError("gamma", f"must be >= 0, got {self.gamma}")
        if self.iters < 1:
            raise ConfigError("iters", f"must be >= 1, got {self.iters}")
        if self.batch < 1:
            raise ConfigError("batch", f"must be >= 1, got {self.batch}")
        if self.pairing not in ("positional", "all_pairs"):
            raise ConfigError("pairing", f"must be 'positional' or 'all_pairs', got {self.pairing!r}")
        lo, hi = self.t_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("t_range", f"need 0 <= lo <= hi <= 1, got {self.t_range}")

    def t_bounds(self, T):
        lo, hi = self.t_range
        return int(round(lo * T)), min(T - 1, int(round(hi * T)))


@dataclass
class SelfDiscoveryBatch:
    latents: np.ndarray
    timesteps: np.ndarray
    group: int


def self_discover_latents(model, group_id, sched, batch, rng, t_bounds, guidance_scale=1.0):
    """Partially denoise fresh Gaussian draws under the frozen model.

    Each element gets its own index ``t`` uniform on ``t_bounds``
    (inclusive) and is emitted as the latent the model sees at ``t``.
    """
    T = sched.T_steps
    lo, hi = t_bounds
    t = rng.integers(lo, hi + 1, batch)
    z = rng.standard_normal((batch, model.spec.dim))
    out = np.empty_like(z)
    done = t == T - 1
    out[done] = z[done]
    active = np.flatnonzero(~done)
    zs = z[active]
    for step in range(T - 1, int(t.min()), -1):
        noise = rng.standard_normal((batch, model.spec.dim))[active]
        if len(active) == 0:
            continue
        eps = cfg_epsilon(model, zs, group_id, step, guidance_scale)
        zs = reverse_step(zs, step, eps, sched, noise)
        hit = t[active] == step - 1
        out[active[hit]] = zs[hit]
        active, zs = active[~hit], zs[~hit]
    return SelfDiscoveryBatch(out, t, group_id)


def guidance_target(model, X, g, d, t, eta):
    """``eps(X, g, t) + eta * (eps(X, d, t) - eps(X, g, t))`` from the frozen model."""
    eps_g = model.forward(X, t, g)
    eps_d = model.forward(X, t, d)
    return eps_g + eta * (eps_d - eps_g)


def adapter_train_step(model, adapter, banks_prior, batch, d, cfg, target=None, slot=None):
    """One gradient-descent update of ``adapter``'s vectors.

    ``target`` (the composed noise) is recomputed from the frozen model
    unless supplied. ``slot`` is the adapter's category index, used by
    positional orthogonality pairing. Returns the loss components before
    the update.
    """
    X, t, g = batch.latents, batch.timesteps, batch.group
    if target is None:
        target = guidance_target(model, X, g, d, t, cfg.eta)
    pred, tape = model.forward(X, t, g, adapters=adapter.terms(cfg.alpha_scale, trainable=True), tape_mode="adapter")
    diff = pred - target
    B = len(X)
    l_guid = float((diff ** 2).sum() / B)
    grads = backward(tape, 2.0 * diff / B)
    paired = slot if cfg.pairing == "positional" else None
    l_orth, og = adapter_orthogonality(banks_prior, adapter, paired) if cfg.gamma > 0 else (0.0, {})
    for name, gv in og.items():
        grads[name] = grads[name] + cfg.gamma * gv
    bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
    if bad or not np.isfinite(l_guid):
        raise NumericalDivergenceError(
            f"non-finite gradient for {adapter.category!r} in {bad or ['loss']} "
            f"(L_guidance={l_guid:.4g}, L_orth={l_orth:.4g})"
        )
    for pair in adapter.pairs:
        pair.p -= cfg.lr * grads[pair.target + ".p"]
        pair.q -= cfg.lr * grads[pair.target + ".q"]
    return {"L_guidance": l_guid, "L_orth": l_orth, "total": l_guid + cfg.gamma * l_orth}


def train_attribute(model, attribute, banks_prior, cfg, targets, group, sched, progress=None):
    """Train one adapter per category of ``attribute`` against the frozen base.

    Returns ``(bank, curve)``; ``curve`` rows are
    ``(category, step, L_guidance, L_orth, total)``.
    """
    if attribute.K < 2:
        raise ConfigError(f"attribute {attribute.name}", "needs at least two categories")
    vocab = model.vocab
    g = vocab.id(group)
    t_bounds = cfg.t_bounds(sched.T_steps)
    curve = []
    adapters = []
    for k, category in enumerate(attribute.categories):
        rng = np.random.default_rng([cfg.seed, k])
        adapter = init_adapter(model, category, targets, rng, cfg.q_init_std)
        d = vocab.id(category)
        pool = []
        for it in range(cfg.iters):
            if not pool:
                n_pool = min(cfg.discover_pool, cfg.iters - it)
                big = self_discover_latents(model, g, sched, cfg.batch * n_pool, rng, t_bounds, cfg.discover_guidance)
                pool = [SelfDiscoveryBatch(big.latents[j::n_pool], big.timesteps[j::n_pool], g)
                        for j in range(n_pool)]
            losses = adapter_train_step(model, adapter, banks_prior, pool.pop(0), d, cfg, slot=k)
            curve.append({"category": category, "step": it, **losses})
            if progress and (it % 100 == 0 or it == cfg.iters - 1):
                progress(attribute.name, category, it, losses)
        adapters.append(adapter)
    bank = AdapterBank(attribute.name, attribute.categories, adapters)
    if banks_prior:
        bank.meta["orthogonality"] = orthogonality_loss(banks_prior, bank, cfg.pairing)[0]
        bank.meta["orthogonality_random_baseline"] = random_baseline(banks_prior, bank, [cfg.seed, 99], pairing=cfg.pairing)
    return bank, curve
