"""Run configuration: JSON on disk, validated dataclasses in memory."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .train import PretrainConfig, TrainConfig
from .world import AttributeSpec, WorldSpec

PLACEMENTS = ("cross_attention", "non_cross_attention", "all")


@dataclass
class ScheduleConfig:
    T_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.2


@dataclass
class ModelConfig:
    hidden_tokens: int = 2
    token_dim: int = 32
    cond_tokens: int = 2
    cond_dim: int = 32
    attn_dim: int = 32
    heads: int = 2
    time_dim: int = 16
    layout: list = field(default_factory=lambda: ["mlp", "xattn", "mlp", "xattn", "mlp"])


@dataclass
class AdapterConfig:
    group: str = "worker"
    placement: str = "cross_attention"
    projections: list = field(default_factory=lambda: ["w_q", "w_k", "w_v", "w_out"])
    order: list = field(default_factory=list)
    train: dict = field(default_factory=dict)
    per_attribute: dict = field(default_factory=dict)

    def train_config(self, attribute, root_seed=0):
        merged = {**self.train, **self.per_attribute.get(attribute, {})}
        path = f"adapters.per_attribute.{attribute}" if attribute in self.per_attribute else "adapters.train"
        cfg = _build(TrainConfig, merged, path)
        cfg.seed = [root_seed, cfg.seed] if isinstance(cfg.seed, int) else cfg.seed
        return cfg


@dataclass
class GenerationConfig:
    group: str = "worker"
    n: int = 2000
    guidance_scale: float = 1.0
    alpha_scale: float | None = None
    seed: int = 0
    targets: dict = field(default_factory=dict)


@dataclass
class EvalConfig:
    bootstrap: int = 1000
    fidelity_ref: int = 10000
    seed: int = 0


@dataclass
class RunConfig:
    world: WorldSpec
    world_seed: int = 0
    label: str = "run"
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "run"

    # -- serialisation ----------------------------------------------------------
    def to_dict(self):
        d = {
            "label": self.label,
            "seed": self.seed,
            "out": self.out,
            "world": {
                "dim": self.world.dim,
                "attributes": [{"name": a.name, "categories": list(a.categories)} for a in self.world.attributes],
                "groups": self.world.groups,
                "std": self.world.std,
                "separation": self.world.separation,
                "spread": self.world.spread,
                "seed": self.world_seed,
            },
        }
        for name in ("schedule", "model", "pretrain", "adapters", "generation", "eval"):
            d[name] = asdict(getattr(self, name))
        d["adapters"]["train"] = {**asdict(TrainConfig()), **self.adapters.train}
        d["adapters"]["train"]["t_range"] = list(d["adapters"]["train"]["t_range"])
        return json.loads(json.dumps(d))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def content_hash(self):
        """Hash of everything that determines results (the output dir is excluded)."""
        from .io import config_hash

        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    @property
    def attribute_order(self):
        return self.adapters.order or [a.name for a in self.world.attributes]

    def pretrain_config(self):
        cfg = copy.copy(self.pretrain)
        cfg.seed = [self.seed, self.pretrain.seed]
        return cfg

    def generation_alpha(self, attribute):
        if self.generation.alpha_scale is not None:
            return self.generation.alpha_scale
        return self.adapters.train_config(attribute).alpha_scale


_TYPES = {int: (int,), float: (int, float), str: (str,), list: (list, tuple), dict: (dict,), bool: (bool,)}


def _check_type(value, default, key):
    if default is None or value is None:
        return value
    kind = type(default)
    if kind is bool or kind not in _TYPES:
        return value
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}")
    if not isinstance(value, _TYPES[kind]):
        raise ConfigError(key, f"expected {kind.__name__}, got {value!r}")
    return float(value) if kind is float else value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    defaults = cls()
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _check_type(v, getattr(defaults, k), f"{path}.{k}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.key}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _world(data):
    if not isinstance(data, dict):
        raise ConfigError("world", "expected a mapping")
    allowed = {"dim", "attributes", "groups", "std", "separation", "spread", "seed"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"world.{unknown[0]}", "unknown key")
    for key in ("dim", "attributes", "groups"):
        if key not in data:
            raise ConfigError(f"world.{key}", "missing")
    dim = data["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ConfigError("world.dim", f"must be a positive integer, got {dim!r}")
    attrs = []
    for i, a in enumerate(data["attributes"]):
        if not isinstance(a, dict) or set(a) != {"name", "categories"}:
            raise ConfigError(f"world.attributes[{i}]", "needs exactly 'name' and 'categories'")
        attrs.append(AttributeSpec(a["name"], a["categories"]))
    groups = data["groups"]
    if not isinstance(groups, dict) or not groups:
        raise ConfigError("world.groups", "at least one group required")
    for k in ("std", "separation", "spread"):
        if k in data and not (isinstance(data[k], (int, float)) and data[k] > 0):
            raise ConfigError(f"world.{k}", f"must be positive, got {data[k]!r}")
    spec = WorldSpec(dim, attrs, groups, float(data.get("std", 1.0)), float(data.get("separation", 6.0)),
                     float(data.get("spread", 6.0)))
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("world.seed", f"must be an integer, got {seed!r}")
    return spec, seed


def from_dict(data):
    """Validate a raw mapping into a :class:`RunConfig`; errors name the key."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    allowed = {f.name for f in fields(RunConfig)} - {"world_seed"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if "world" not in data:
        raise ConfigError("world", "missing")
    world, world_seed = _world(data["world"])
    cfg = RunConfig(world=world, world_seed=world_seed)
    for key in ("label", "out"):
        if key in data:
            setattr(cfg, key, _check_type(data[key], "", key))
    if "seed" in data:
        cfg.seed = _check_type(data["seed"], 0, "seed")
    cfg.schedule = _build(ScheduleConfig, data.get("schedule", {}), "schedule")
    cfg.model = _build(ModelConfig, data.get("model", {}), "model")
    cfg.pretrain = _build(PretrainConfig, data.get("pretrain", {}), "pretrain")
    cfg.adapters = _build(AdapterConfig, data.get("adapters", {}), "adapters")
    cfg.generation = _build(GenerationConfig, data.get("generation", {}), "generation")
    cfg.eval = _build(EvalConfig, data.get("eval", {}), "eval")
    validate(cfg)
    return cfg


def validate(cfg):
    """Check cross-module preconditions before any compute happens."""
    from .diffusion import make_schedule
    from .inference import DistributionSpec
    from .errors import IndicatorError

    s = cfg.schedule
    try:
        make_schedule(s.T_steps, s.beta_min, s.beta_max)
    except ConfigError as exc:
        raise ConfigError(f"schedule.{exc.key}", str(exc).split(": ", 1)[-1]) from None
    attrs = {a.name: a for a in cfg.world.attributes}
    groups = cfg.world.groups
    for g, marg in groups.items():
        if not isinstance(marg, dict):
            raise ConfigError(f"world.groups.{g}", "expected attribute -> pmf mapping")
    for key, group in (("adapters.group", cfg.adapters.group), ("generation.group", cfg.generation.group)):
        if group not in groups:
            raise ConfigError(key, f"unknown group {group!r}")
    if cfg.adapters.placement not in PLACEMENTS:
        raise ConfigError("adapters.placement", f"must be one of {PLACEMENTS}")
    bad = set(cfg.adapters.projections) - {"w_q", "w_k", "w_v", "w_out"}
    if bad or not cfg.adapters.projections:
        raise ConfigError("adapters.projections", f"invalid projections {sorted(bad) or '[]'}")
    for name in cfg.adapters.order:
        if name not in attrs:
            raise ConfigError("adapters.order", f"unknown attribute {name!r}")
    for name in cfg.adapters.per_attribute:
        if name not in attrs:
            raise ConfigError(f"adapters.per_attribute.{name}", "unknown attribute")
    for name in cfg.attribute_order:
        cfg.adapters.train_config(name)
    for set_name, targets in cfg.generation.targets.items():
        if set_name == "base":
            raise ConfigError("generation.targets.base", "'base' is reserved for the unadapted model")
        if not isinstance(targets, dict):
            raise ConfigError(f"generation.targets.{set_name}", "expected attribute -> pmf mapping")
        for attr, pmf in targets.items():
            key = f"generation.targets.{set_name}.{attr}"
            if attr not in attrs:
                raise ConfigError(key, "unknown attribute")
            if attr not in cfg.attribute_order:
                raise ConfigError(key, "attribute has no trained bank")
            try:
                spec = DistributionSpec(attr, tuple(pmf))
            except (IndicatorError, TypeError) as exc:
                raise ConfigError(key, str(exc)) from None
            if spec.K != attrs[attr].K:
                raise ConfigError(key, f"expected {attrs[attr].K} probabilities")
    if cfg.generation.n < 0:
        raise ConfigError("generation.n", "must be >= 0")
    p = cfg.pretrain
    if not 0 <= p.cond_dropout < 1:
        raise ConfigError("pretrain.cond_dropout", "must be in [0, 1)")
    if p.epochs < 1 or p.batch < 1 or p.n_samples < 1:
        raise ConfigError("pretrain", "epochs, batch and n_samples must be positive")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"not valid JSON: {exc}") from None
    return from_dict(data)


def default_config(preset="gender"):
    """Built-in benchmark worlds: ``gender`` (one attribute) or ``intersectional``."""
    if preset == "gender":
        world = {
            "dim": 2,
            "attributes": [{"name": "gender", "categories": ["male", "female"]}],
            "groups": {"worker": {"gender": [0.8, 0.2]}},
        }
        targets = {"uniform": {"gender": [0.5, 0.5]}, "skewed": {"gender": [0.2, 0.8]}}
    elif preset == "intersectional":
        world = {
            "dim": 4,
            "attributes": [
                {"name": "gender", "categories": ["male", "female"]},
                {"name": "race", "categories": ["white", "asian", "black", "indian"]},
            ],
            "groups": {"worker": {"gender": [0.8, 0.2], "race": [0.7, 0.1, 0.1, 0.1]}},
        }
        targets = {"uniform": {"gender": [0.5, 0.5], "race": [0.25, 0.25, 0.25, 0.25]}}
    else:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    return from_dict({"label": "debiased", "world": world, "generation": {"targets": targets}})
