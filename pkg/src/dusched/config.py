"""Experiment configuration: YAML loading with strict keys, presets, instance hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .channel import ChannelModel, birth_death_matrix, table2_channel
from .scheduler import MODES, SchedulingModel, StepSchedule
from .priority import RULES
from .traffic import DuClass, GopStructure, require_valid

SCHEMA_VERSION = 1
POLICIES = ("proposed", "myopic", "rd_const", "edf", "oracle")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- presets

def tiny1_gop() -> GopStructure:
    """Two classes, period 2, window 2; class 2 depends on class 1."""
    return GopStructure(
        (
            DuClass(1, 2.0, 0, 2, (0.5, 0.5)),
            DuClass(2, 1.0, 1, 2, (0.5, 0.5), parents=frozenset({1})),
        ),
        period_T=2,
        stw_W=2,
    )


def tiny1_channel() -> ChannelModel:
    return ChannelModel((1.0, 0.05), [[0.8, 0.2], [0.3, 0.7]])


def _triangle_pmf(m: int) -> tuple:
    w = np.minimum(np.arange(1, m + 1), np.arange(m, 0, -1)).astype(float)
    return tuple(w / w.sum())


def ipb_gop(n_classes: int, period: int, window: int, i_size=6, p_size=4, b_size=2) -> GopStructure:
    """Synthetic I/P/B-like GOP: one DU due per slot, P DUs chained, each B hangs off the previous P.

    Sizes and impacts are synthetic; impacts decay along the P chain.
    """
    classes = []
    k = 0
    for j in range(1, n_classes + 1):
        if j == 1:
            classes.append(DuClass(1, 4.0, 0, i_size, _triangle_pmf(i_size)))
        elif j % 2 == 0:
            parent = 1 if j == 2 else j - 2
            q = round(3.0 * 0.93 ** k, 6)
            k += 1
            classes.append(DuClass(j, q, j - 1, p_size, _triangle_pmf(p_size), frozenset({parent})))
        else:
            q = round(1.0 * 0.97 ** k, 6)
            classes.append(DuClass(j, q, j - 1, b_size, _triangle_pmf(b_size), frozenset({j - 1})))
    return require_valid(GopStructure(tuple(classes), period, window))


GOP_PRESETS = {
    "tiny1": tiny1_gop,
    "default": lambda: ipb_gop(16, 16, 8),
    "eight": lambda: ipb_gop(8, 8, 4, i_size=4, p_size=3, b_size=2),
}
CHANNEL_PRESETS = {
    "table2": table2_channel,
    "tiny1": tiny1_channel,
}


def random_small_gop(rng, max_T=3, max_N=3, max_size=3, dependencies=False) -> GopStructure:
    """Random small GOP; impacts decrease with the deadline offset."""
    while True:
        T = int(rng.integers(1, max_T + 1))
        N = int(rng.integers(1, max_N + 1))
        W = int(rng.integers(1, T + 1))
        offs = sorted(int(v) for v in rng.integers(0, T + W, size=N))
        q = sorted((round(float(v), 2) for v in rng.uniform(0.5, 3.0, size=N)), reverse=True)
        cls = []
        for j in range(N):
            m = int(rng.integers(1, max_size + 1))
            p = np.round(rng.dirichlet(np.ones(m)), 3)
            p[-1] = round(1.0 - p[:-1].sum(), 3)
            if p[-1] < 0:
                continue
            parents = frozenset()
            if dependencies and j > 0:
                cand = [i + 1 for i in range(j) if offs[j] - offs[i] < W]
                if cand and rng.random() < 0.7:
                    parents = frozenset({int(rng.choice(cand))})
            cls.append(DuClass(j + 1, q[j], offs[j], m, tuple(float(v) for v in p), parents, decay=0.5))
        if len(cls) != N:
            continue
        gop = GopStructure(tuple(cls), T, W)
        try:
            return require_valid(gop)
        except ValueError:
            continue


def random_small_channel(rng, max_H=2) -> ChannelModel:
    H = int(rng.integers(1, max_H + 1))
    gains = tuple(round(float(g), 3) for g in rng.uniform(0.05, 1.0, size=H))
    if H == 1:
        return ChannelModel(gains, [[1.0]])
    P = np.round(rng.dirichlet(np.ones(H), size=H), 3)
    P[:, -1] = 1.0 - P[:, :-1].sum(axis=1)
    return ChannelModel(gains, P)


def random_scenario_gop(rng, n_classes=5, period=5, window=3) -> GopStructure:
    """Synthetic scenario GOP: distinct deadlines, impacts falling with the deadline."""
    offs = sorted(int(v) for v in rng.choice(period + window - 1, size=n_classes, replace=False))
    q = sorted((round(float(v), 3) for v in rng.uniform(0.5, 4.0, size=n_classes)), reverse=True)
    cls = []
    for j in range(n_classes):
        m = int(rng.integers(2, 5))
        cls.append(DuClass(j + 1, q[j], offs[j], m, _triangle_pmf(m)))
    return require_valid(GopStructure(tuple(cls), period, window))


def random_scenario_channel(rng) -> ChannelModel:
    """The eight `table2` states with a random birth-death mobility level."""
    return table2_channel(birth_death_matrix(8, float(rng.uniform(0.1, 0.3))))


# ---------------------------------------------------------------- config

@dataclass
class LearningConfig:
    enabled: bool = True
    schedule: str = "harmonic"
    beta: float = 0.99
    train_slots: int = 100_000
    load_rule: str = "arrivals"


@dataclass
class EvalConfig:
    episodes: int = 1
    seed: int | None = None  # defaults to seed + 1


@dataclass
class BaselineConfig:
    avg_gain: float | None = None
    rd_cost: str = "linear"
    edf_budget: int = 4


@dataclass
class OracleConfig:
    tolerance: float = 1e-10
    state_cap: int = 1_000_000


@dataclass
class OutputConfig:
    csv: str | None = None
    tables: str | None = None
    trace: bool = False


@dataclass
class ExperimentConfig:
    gop: GopStructure
    channel: ChannelModel
    lam: float = 0.1
    alpha: float = 0.95
    slots: int = 10_000
    seed: int = 1
    policy: str = "proposed"
    mode: str = "independent"
    priority_rule: str | None = None
    pin_factors: bool = False
    slot_ms: float = 10.0
    learning: LearningConfig = field(default_factory=LearningConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        require_valid(self.gop)
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.slots < 0:
            raise ConfigError("slots must be nonnegative")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.priority_rule is not None and self.priority_rule not in RULES:
            raise ConfigError(f"unknown priority rule {self.priority_rule!r}")
        StepSchedule(self.learning.schedule, self.learning.beta)
        if self.learning.train_slots < 0:
            raise ConfigError("learning.train_slots must be nonnegative")
        if self.evaluation.episodes < 1:
            raise ConfigError("evaluation.episodes must be at least 1")
        if self.baselines.rd_cost not in ("linear", "convex"):
            raise ConfigError("baselines.rd_cost must be linear or convex")

    @property
    def eval_seed(self) -> int:
        return self.seed + 1 if self.evaluation.seed is None else self.evaluation.seed

    def model(self, lam: float | None = None) -> SchedulingModel:
        return SchedulingModel(
            self.gop,
            self.channel,
            self.lam if lam is None else lam,
            self.alpha,
            mode=self.mode,
            rule=self.priority_rule,
            pin_factors=self.pin_factors,
        )

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def instance_dict(self) -> dict:
        return {
            "gop": self.gop.to_dict(),
            "channel": self.channel.to_dict(),
            "lambda": self.lam,
            "alpha": self.alpha,
            "mode": self.mode,
            "priority_rule": self.priority_rule,
            "pin_factors": self.pin_factors,
        }

    def instance_hash(self) -> str:
        return instance_hash(self.instance_dict())


def instance_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_TOP_KEYS = {
    "gop", "channel", "lambda", "alpha", "slots", "seed", "policy", "mode", "priority_rule",
    "pin_factors", "slot_ms", "learning", "evaluation", "baselines", "oracle", "output",
}
_SECTIONS = {
    "learning": LearningConfig,
    "evaluation": EvalConfig,
    "baselines": BaselineConfig,
    "oracle": OracleConfig,
    "output": OutputConfig,
}
_GOP_KEYS = {"preset", "period", "window", "classes"}
_CLASS_KEYS = {"id", "impact", "deadline", "size_max", "pmf", "parents", "decay"}
_CHANNEL_KEYS = {"preset", "gains", "transition", "birth_death", "cost_base", "bits_per_packet"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _gop_from(d) -> GopStructure:
    if isinstance(d, str):
        d = {"preset": d}
    _check_keys(d, _GOP_KEYS, "gop")
    if "preset" in d:
        name = d["preset"]
        if name not in GOP_PRESETS:
            raise ConfigError(f"unknown gop preset {name!r}")
        gop = GOP_PRESETS[name]()
        if "classes" in d:
            raise ConfigError("gop: give either a preset or explicit classes")
        period = int(d.get("period", gop.period_T))
        window = int(d.get("window", gop.stw_W))
        return GopStructure(gop.classes, period, window)
    for c in d.get("classes", []):
        _check_keys(c, _CLASS_KEYS, "gop.classes[]")
    try:
        return GopStructure.from_dict(d)
    except KeyError as e:
        raise ConfigError(f"gop: missing key {e}") from None


def _channel_from(d) -> ChannelModel:
    if isinstance(d, str):
        d = {"preset": d}
    _check_keys(d, _CHANNEL_KEYS, "channel")
    cost_base = d.get("cost_base", "pow2")
    bpp = float(d.get("bits_per_packet", 1.0))
    if "preset" in d:
        name = d["preset"]
        if name not in CHANNEL_PRESETS:
            raise ConfigError(f"unknown channel preset {name!r}")
        base = CHANNEL_PRESETS[name]()
        gains = base.gains
        P = base.transition
    else:
        if "gains" not in d:
            raise ConfigError("channel: need a preset or gains")
        gains = tuple(d["gains"])
        P = None
    if "transition" in d and "birth_death" in d:
        raise ConfigError("channel: give transition or birth_death, not both")
    if "transition" in d:
        P = d["transition"]
    elif "birth_death" in d:
        P = birth_death_matrix(len(gains), float(d["birth_death"]))
    if P is None:
        raise ConfigError("channel: missing transition")
    return ChannelModel(gains, P, cost_base, bpp)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d or {})
    _check_keys(d, _TOP_KEYS, "config")
    kw = {}
    kw["gop"] = _gop_from(d.pop("gop", "tiny1"))
    kw["channel"] = _channel_from(d.pop("channel", "tiny1"))
    if "lambda" in d:
        kw["lam"] = float(d.pop("lambda"))
    for key, conv in (("alpha", float), ("slots", int), ("seed", int), ("slot_ms", float), ("pin_factors", bool)):
        if key in d:
            kw[key] = conv(d.pop(key))
    for key in ("policy", "mode", "priority_rule"):
        if key in d:
            kw[key] = d.pop(key)
    for key, cls in _SECTIONS.items():
        if key in d:
            sec = d.pop(key) or {}
            _check_keys(sec, cls.__dataclass_fields__, key)
            kw[key] = cls(**sec)
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {
        "gop": cfg.gop.to_dict(),
        "channel": cfg.channel.to_dict(),
        "lambda": cfg.lam,
        "alpha": cfg.alpha,
        "slots": cfg.slots,
        "seed": cfg.seed,
        "policy": cfg.policy,
        "mode": cfg.mode,
        "priority_rule": cfg.priority_rule,
        "pin_factors": cfg.pin_factors,
        "slot_ms": cfg.slot_ms,
    }
    for key in _SECTIONS:
        out[key] = dict(vars(getattr(cfg, key)))
    return out


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
