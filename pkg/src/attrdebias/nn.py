"""Dense conditional denoiser with cross-attention and hand-written backprop.

The sample path is a flat vector lifted into a hidden state of
``hidden_tokens * token_dim`` entries. The trunk interleaves residual
SiLU blocks with cross-attention blocks whose keys and values come from
the embedded condition (``cond_tokens`` tokens of ``cond_dim`` entries).

Rank-1 adapters are applied lazily: every linear map ``y = W x + b`` that
has active terms computes ``y + sum(scale * (q . x) * p)``. The weights
themselves are never touched.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AdapterShapeError, ShapeError, StaleTapeError, VocabError

PROJECTIONS = ("w_q", "w_k", "w_v", "w_out")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor; two models with equal specs are congruent."""

    dim: int
    vocab_size: int
    max_timesteps: int
    hidden_tokens: int = 2
    token_dim: int = 32
    cond_tokens: int = 2
    cond_dim: int = 32
    attn_dim: int = 32
    heads: int = 2
    time_dim: int = 16
    layout: tuple = ("mlp", "xattn", "mlp", "xattn", "mlp")

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(self.layout))
        if self.layout.count("xattn") < 2:
            raise ShapeError("denoiser needs at least two cross-attention blocks")
        if self.attn_dim % self.heads:
            raise ShapeError("attn_dim must be divisible by heads")
        if set(self.layout) - {"mlp", "xattn"}:
            raise ShapeError(f"unknown block kind in layout {self.layout}")

    @property
    def hidden(self):
        return self.hidden_tokens * self.token_dim

    def to_dict(self):
        d = asdict(self)
        d["layout"] = list(self.layout)
        return d


@dataclass(frozen=True)
class Rank1:
    """One active rank-1 term on ``target``: adds ``scale * p q^T``.

    ``key`` marks the term trainable; gradients are reported as
    ``key + ".p"`` / ``key + ".q"``.
    """

    target: str
    p: np.ndarray
    q: np.ndarray
    scale: float = 1.0
    key: str | None = None


def silu(u):
    return u / (1.0 + np.exp(-u))


def silu_grad(u):
    s = 1.0 / (1.0 + np.exp(-u))
    return s * (1.0 + u * (1.0 - s))


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class LinearLayer:
    """Thin accessor over a weight (and optional bias) in a parameter dict."""

    def __init__(self, params, name):
        self.name = name
        self.weight = params[name + ".w"]
        self.bias = params.get(name + ".b")

    @property
    def shape(self):
        return self.weight.shape


def linear_forward(layer, x, terms=()):
    """``y = W x + bias`` over the last axis of ``x``, plus rank-1 terms."""
    m, n = layer.weight.shape
    if x.shape[-1] != n:
        raise ShapeError(f"layer {layer.name!r} expects input size {n}, got {x.shape[-1]}")
    y = x @ layer.weight.T
    if layer.bias is not None:
        y = y + layer.bias
    for term in terms:
        if term.p.shape != (m,) or term.q.shape != (n,):
            raise AdapterShapeError(
                f"adapter on {layer.name!r} has p{term.p.shape}, q{term.q.shape}; "
                f"matrix is {m}x{n}"
            )
        s = x @ term.q
        y = y + term.scale * s[..., None] * term.p
    return y


def cross_attention_forward(block, X, C, heads, terms=None):
    """Multi-head attention from sample tokens ``X`` (B, n, d) to condition
    tokens ``C`` (B, k, d_c).

    ``block`` maps ``w_q``/``w_k``/``w_v``/``w_out`` to :class:`LinearLayer`;
    ``terms`` maps layer names to active rank-1 terms. Returns the block
    output (without residual) and the intermediates used by backward.
    """
    terms = terms or {}
    lin = lambda p, inp: linear_forward(block[p], inp, terms.get(block[p].name, ()))
    B, n = X.shape[:2]
    Q, K, V = lin("w_q", X), lin("w_k", C), lin("w_v", C)
    dh = Q.shape[-1] // heads
    Qh = Q.reshape(B, -1, heads, dh).transpose(0, 2, 1, 3)
    Kh = K.reshape(B, -1, heads, dh).transpose(0, 2, 1, 3)
    Vh = V.reshape(B, -1, heads, dh).transpose(0, 2, 1, 3)
    A = softmax(Qh @ Kh.transpose(0, 1, 3, 2) / math.sqrt(dh))
    O = (A @ Vh).transpose(0, 2, 1, 3).reshape(B, n, heads * dh)
    return lin("w_out", O), {"Qh": Qh, "Kh": Kh, "Vh": Vh, "A": A, "O": O}


class GradientTape:
    """Forward intermediates for one backward pass.

    ``mode`` is ``"adapter"`` (gradients only for keyed rank-1 terms) or
    ``"pretrain"`` (gradients for every model parameter).
    """

    def __init__(self, model, mode, terms):
        if mode not in ("adapter", "pretrain"):
            raise ValueError(f"unknown tape mode {mode!r}")
        self.model = model
        self.mode = mode
        self.terms = terms
        self.cache = {}
        self.consumed = False


def _group_terms(terms):
    grouped = {}
    for term in terms or ():
        grouped.setdefault(term.target, []).append(term)
    return grouped


class DenoiserModel:
    """Conditional noise predictor ``eps(x_t, cond, t)``.

    ``params`` maps names to float64 arrays. Call :meth:`freeze` to make
    every array read-only; adapter training and sampling never write to it.
    """

    def __init__(self, spec, params, vocab=None):
        self.spec = spec
        self.params = params
        self.vocab = vocab

    # -- construction ------------------------------------------------------
    @classmethod
    def init(cls, spec, seed=0, vocab=None):
        rng = np.random.default_rng(seed)
        params = {}

        def dense(name, m, n, bias=True):
            params[name + ".w"] = rng.standard_normal((m, n)) / math.sqrt(n)
            if bias:
                params[name + ".b"] = np.zeros(m)

        H = spec.hidden
        params["cond_emb"] = rng.standard_normal((spec.vocab_size, spec.cond_tokens * spec.cond_dim))
        dense("time", H, spec.time_dim)
        dense("in", H, spec.dim)
        for i, kind in enumerate(spec.layout):
            if kind == "mlp":
                dense(f"blocks.{i}.lin", H, H)
            else:
                dense(f"blocks.{i}.w_q", spec.attn_dim, spec.token_dim, bias=False)
                dense(f"blocks.{i}.w_k", spec.attn_dim, spec.cond_dim, bias=False)
                dense(f"blocks.{i}.w_v", spec.attn_dim, spec.cond_dim, bias=False)
                dense(f"blocks.{i}.w_out", spec.token_dim, spec.attn_dim)
        dense("out", spec.dim, H)
        return cls(spec, params, vocab)

    def freeze(self):
        for arr in self.params.values():
            arr.flags.writeable = False
        return self

    def copy(self):
        return DenoiserModel(self.spec, {k: v.copy() for k, v in self.params.items()}, self.vocab)

    def layer(self, name):
        return LinearLayer(self.params, name)

    def weight_shape(self, target):
        return self.params[target + ".w"].shape

    def linear_names(self):
        names = ["time", "in"]
        for i, kind in enumerate(self.spec.layout):
            if kind == "mlp":
                names.append(f"blocks.{i}.lin")
            else:
                names.extend(f"blocks.{i}.{p}" for p in PROJECTIONS)
        names.append("out")
        return names

    def adapter_targets(self, placement="cross_attention", projections=PROJECTIONS):
        """Adapted matrices in canonical order.

        ``placement`` is ``cross_attention`` (the given projections of every
        cross-attention block), ``non_cross_attention`` (every other linear)
        or ``all``.
        """
        bad = set(projections) - set(PROJECTIONS)
        if bad:
            raise ValueError(f"unknown projections {sorted(bad)}")
        ca, non_ca = [], []
        for name in self.linear_names():
            proj = name.rsplit(".", 1)[-1]
            if proj in PROJECTIONS:
                if proj in projections:
                    ca.append(name)
            else:
                non_ca.append(name)
        if placement == "cross_attention":
            return ca
        if placement == "non_cross_attention":
            return non_ca
        if placement == "all":
            return [n for n in self.linear_names() if n in ca or n in non_ca]
        raise ValueError(f"unknown placement {placement!r}")

    def parameter_count(self):
        return int(sum(v.size for v in self.params.values()))

    # -- forward -----------------------------------------------------------
    def forward(self, x, t, cond, adapters=None, tape_mode=None):
        """Predict noise for a batch.

        ``x`` is ``(B, D)`` (or ``(D,)``), ``t`` and ``cond`` are integer
        scalars or length-``B`` arrays. With ``tape_mode`` set, returns
        ``(eps, tape)``.
        """
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != spec.dim:
            raise ShapeError(f"sample must have {spec.dim} entries, got shape {x.shape}")
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,))
        if np.any((t < 0) | (t >= spec.max_timesteps)):
            raise ValueError(f"timestep outside [0, {spec.max_timesteps})")
        if np.any((cond < 0) | (cond >= spec.vocab_size)):
            bad = cond[(cond < 0) | (cond >= spec.vocab_size)][0]
            raise VocabError(f"condition id {int(bad)} not in vocabulary of size {spec.vocab_size}")

        terms = _group_terms(adapters)
        tape = GradientTape(self, tape_mode, adapters or ()) if tape_mode else None
        c = tape.cache if tape else None
        lin = lambda name, inp: linear_forward(self.layer(name), inp, terms.get(name, ()))

        temb = timestep_embedding(t, spec.time_dim)
        h = lin("in", x) + lin("time", temb)
        C = self.params["cond_emb"][cond].reshape(B, spec.cond_tokens, spec.cond_dim)
        if c is not None:
            c.update(x=x, temb=temb, C=C, cond=cond, B=B)

        nh = spec.heads
        for i, kind in enumerate(spec.layout):
            if kind == "mlp":
                u = lin(f"blocks.{i}.lin", h)
                if c is not None:
                    c[i] = {"h": h, "u": u}
                h = h + silu(u)
            else:
                X = h.reshape(B, spec.hidden_tokens, spec.token_dim)
                block = {p: self.layer(f"blocks.{i}.{p}") for p in PROJECTIONS}
                Y, cache = cross_attention_forward(block, X, C, nh, terms)
                if c is not None:
                    c[i] = {"X": X, **cache}
                h = (X + Y).reshape(B, spec.hidden)
        if c is not None:
            c["h_final"] = h
        eps = lin("out", h)
        if single:
            eps = eps[0]
        if tape is not None:
            tape.cache["single"] = single
            return eps, tape
        return eps

    __call__ = forward


def _linear_backward(tape, grads, name, x, gy, terms):
    """Backprop through one (possibly adapted) linear map; returns dL/dx."""
    params = tape.model.params
    W = params[name + ".w"]
    gx = gy @ W
    n = W.shape[1]
    if tape.mode == "pretrain":
        x2 = x.reshape(-1, n)
        g2 = gy.reshape(-1, W.shape[0])
        grads[name + ".w"] = grads.get(name + ".w", 0.0) + g2.T @ x2
        if name + ".b" in params:
            grads[name + ".b"] = grads.get(name + ".b", 0.0) + g2.sum(axis=0)
    for term in terms.get(name, ()):
        s = x @ term.q
        gs = gy @ term.p
        gx = gx + term.scale * gs[..., None] * term.q
        if term.key is not None:
            gp = term.scale * (gy * s[..., None]).reshape(-1, W.shape[0]).sum(axis=0)
            gq = term.scale * (gs[..., None] * x).reshape(-1, n).sum(axis=0)
            grads[term.key + ".p"] = grads.get(term.key + ".p", 0.0) + gp
            grads[term.key + ".q"] = grads.get(term.key + ".q", 0.0) + gq
    return gx


def backward(tape, loss_grad):
    """Consume ``tape`` and return the gradient map for ``dL/deps = loss_grad``."""
    if tape.consumed:
        raise StaleTapeError("gradient tape already consumed by a previous backward pass")
    tape.consumed = True
    model, spec, c = tape.model, tape.model.spec, tape.cache
    terms = _group_terms(tape.terms)
    grads = {}
    g = np.asarray(loss_grad, dtype=np.float64)
    if c["single"]:
        g = g[None, :]
    B = c["B"]
    nh, dh = spec.heads, spec.attn_dim // spec.heads

    gh = _linear_backward(tape, grads, "out", c["h_final"], g, terms)
    gC = np.zeros_like(c["C"])
    for i in reversed(range(len(spec.layout))):
        blk = c[i]
        if spec.layout[i] == "mlp":
            gu = gh * silu_grad(blk["u"])
            gh = gh + _linear_backward(tape, grads, f"blocks.{i}.lin", blk["h"], gu, terms)
        else:
            gX = gh.reshape(B, spec.hidden_tokens, spec.token_dim)
            gO = _linear_backward(tape, grads, f"blocks.{i}.w_out", blk["O"], gX, terms)
            gOh = gO.reshape(B, spec.hidden_tokens, nh, dh).transpose(0, 2, 1, 3)
            A = blk["A"]
            gA = gOh @ blk["Vh"].transpose(0, 1, 3, 2)
            gVh = A.transpose(0, 1, 3, 2) @ gOh
            gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
            gQh = gS @ blk["Kh"]
            gKh = gS.transpose(0, 1, 3, 2) @ blk["Qh"]
            merge = lambda a: a.transpose(0, 2, 1, 3).reshape(B, a.shape[2], spec.attn_dim)
            gX = gX + _linear_backward(tape, grads, f"blocks.{i}.w_q", blk["X"], merge(gQh), terms)
            gC = gC + _linear_backward(tape, grads, f"blocks.{i}.w_k", c["C"], merge(gKh), terms)
            gC = gC + _linear_backward(tape, grads, f"blocks.{i}.w_v", c["C"], merge(gVh), terms)
            gh = gX.reshape(B, spec.hidden)
    _linear_backward(tape, grads, "time", c["temb"], gh, terms)
    _linear_backward(tape, grads, "in", c["x"], gh, terms)
    if tape.mode == "pretrain":
        ge = np.zeros_like(model.params["cond_emb"])
        np.add.at(ge, c["cond"], gC.reshape(B, -1))
        grads["cond_emb"] = ge
    return grads


# -- finite-difference checking ------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values()) or math.isinf(self.tolerance)

    def lines(self):
        for name, err in sorted(self.errors.items()):
            status = "ok" if (err < self.tolerance or math.isinf(self.tolerance)) else "FAIL"
            yield f"{name:<28s} rel_err={err:.3e}  {status}"


def grad_check(params, loss_and_grad, tolerance=1e-4, step=1e-5, names=None):
    """Compare analytic gradients with central finite differences.

    ``params`` maps names to arrays that ``loss_and_grad`` reads on every
    call; ``loss_and_grad()`` returns ``(loss, grads)``. Each entry is
    perturbed in place and restored. The per-parameter error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    """
    _, analytic = loss_and_grad()
    report = GradCheckReport(tolerance)
    for name in names or sorted(params):
        arr = params[name]
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp, _ = loss_and_grad()
            flat[j] = orig - step
            lm, _ = loss_and_grad()
            flat[j] = orig
            nflat[j] = (lp - lm) / (2 * step)
        ana = np.asarray(analytic.get(name, np.zeros_like(arr)))
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        diff = np.abs(ana - num).max(initial=0.0)
        report.errors[name] = 0.0 if scale == 0.0 else float(diff / scale)
    return report
