"""Run configuration: sectioned INI files mapped onto typed dataclasses.

Only ``[run] experiment`` is required; every other key has a per-experiment
default. Unknown sections and keys are rejected, and range errors name the
offending key as ``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import hashlib
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import experiments as ex
from .errors import ConfigError
from .sparsity import BudgetConfig, Side

EXPERIMENTS = (
    "xor-balance",
    "dnf-safety",
    "dnf-witness",
    "scaling-sweep",
    "shock-recovery",
    "entropy-comparison",
)


@dataclass(frozen=True)
class XorSection:
    hidden: tuple[int, ...] = (64, 128)
    n_per_corner: int = 32
    noise_std: float = 0.15
    lr: float = 0.1
    modes: tuple[ex.RefreshMode, ...] = (ex.RefreshMode.CONTROLLER, ex.RefreshMode.THRESHOLD, ex.RefreshMode.NONE)


@dataclass(frozen=True)
class SafetySection:
    feature_freqs: tuple[float, ...] = (0.11, 0.72, 0.22)
    literals_per_clause: int = 3
    label_clauses: tuple[int, ...] = ()  # empty: every clause feeds the OR
    tau: float = 19.2
    n: int = 2000
    hidden: tuple[int, ...] = (64, 32)
    hidden_bias: float = -1.0
    lr: float = 0.1
    alpha: float = 0.05
    warmup: int = 1000
    corr_floor: float = 0.3


@dataclass(frozen=True)
class WitnessSection:
    W: int = 8
    modes: tuple[ex.WitnessMode, ...] = (ex.WitnessMode.SGD_ONLY, ex.WitnessMode.BB_ALTERNATING)
    c: int = ex.WitnessSettings.c
    negatives_per_positive: float = ex.WitnessSettings.negatives_per_positive
    extra_hidden: int = ex.WitnessSettings.extra_hidden
    lr: float = ex.WitnessSettings.lr
    hidden_lr: float = ex.WitnessSettings.hidden_lr
    hidden_bias: float = ex.WitnessSettings.hidden_bias
    init_scale: float = ex.WitnessSettings.init_scale
    beta: float = ex.WitnessSettings.beta
    d0_fraction: float = ex.WitnessSettings.d0_fraction
    alpha: float = ex.WitnessSettings.alpha

    def settings(self) -> ex.WitnessSettings:
        names = {f.name for f in fields(ex.WitnessSettings)}
        return ex.WitnessSettings(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass(frozen=True)
class SweepSection:
    W_grid: tuple[int, ...] = (4, 8, 16, 32)


@dataclass(frozen=True)
class ShockSection:
    shock_fraction: float = 0.5
    shock_step: int = 3000
    horizon: int = 1000
    tolerance: float = 0.10
    n_per_corner: int = 32
    noise_std: float = 0.15
    lr: float = 0.1


@dataclass(frozen=True)
class EntropySection:
    density_target: float = 0.5
    n: int = 1000
    hidden: tuple[int, ...] = (32, 32)
    lr: float = 0.1
    beta: float = 1.0
    alpha: float = 0.05
    warmup: int = 500
    delta: int = 50
    total_steps: int = 2500
    sigma2: float = 1.0
    density_tol: float = 0.02
    mi_levels: int = 24


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    seeds: tuple[int, ...]
    out: str
    eval_every: int = 50
    workers: int = 0  # 0: take the worker count from the environment
    budget: BudgetConfig = ex.XOR_BUDGET
    plan: ex.CyclePlan = ex.XOR_PLAN
    xor: XorSection = XorSection()
    safety: SafetySection = SafetySection()
    witness: WitnessSection = WitnessSection()
    sweep: SweepSection = SweepSection()
    shock: ShockSection = ShockSection()
    entropy: EntropySection = EntropySection()


SECTIONS = {
    "budget": BudgetConfig,
    "plan": ex.CyclePlan,
    "xor": XorSection,
    "safety": SafetySection,
    "witness": WitnessSection,
    "sweep": SweepSection,
    "shock": ShockSection,
    "entropy": EntropySection,
}
RUN_KEYS = ("experiment", "seeds", "out", "eval_every", "workers")

DEFAULT_SEEDS = {
    "xor-balance": tuple(range(7)),
    "dnf-safety": tuple(range(10)),
    "dnf-witness": tuple(range(40)),
    "scaling-sweep": tuple(range(20)),
    "shock-recovery": tuple(range(10)),
    "entropy-comparison": tuple(range(10)),
}
DEFAULT_PLANS = {
    "xor-balance": ex.XOR_PLAN,
    "shock-recovery": ex.XOR_PLAN,
    "dnf-safety": ex.CyclePlan(sgd_steps_per_cycle=50, refresh_mode=ex.RefreshMode.THRESHOLD, max_cycles=60),
    "dnf-witness": ex.CyclePlan(),
    "scaling-sweep": ex.CyclePlan(),
    "entropy-comparison": ex.CyclePlan(),
}


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0-6"``, ``"1,3,5"`` or a mix such as ``"0-2,10"``."""
    seeds: list[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot read seed list {text!r}", "run.seeds") from None
    if not seeds:
        raise ConfigError("empty seed list", "run.seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {text!r}", "run.seeds")
    return tuple(seeds)


def format_seeds(seeds) -> str:
    return ",".join(str(s) for s in seeds)


def _convert(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is tuple:
            inner = args[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_convert(s, inner, key) for s in items)
        if origin in (typing.Union, types.UnionType):
            inner = [a for a in args if a is not type(None)][0]
            if raw.strip().lower() in ("", "none"):
                return None
            return _convert(raw, inner, key)
        if hint is bool:
            return {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}[raw.strip().lower()]
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if isinstance(hint, type) and issubclass(hint, enum.Enum):
            return hint(raw.strip().upper())
        return raw.strip()
    except (ValueError, KeyError):
        raise ConfigError(f"cannot read {raw!r} as {getattr(hint, '__name__', hint)}", key) from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, enum.Enum):
        return value.value
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build_section(cls, default, items: dict, section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    changes = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"unknown key (known: {', '.join(sorted(names))})", f"{section}.{key}")
        changes[key] = _convert(raw, hints[key], f"{section}.{key}")
    try:
        return replace(default, **changes)
    except ConfigError as err:
        raise ConfigError(str(err).split(": ", 1)[-1], f"{section}.{err.key}") from None


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}; choose from {', '.join(EXPERIMENTS)}", "run.experiment")
    if cfg.eval_every < 1:
        raise ConfigError(f"must be >= 1, got {cfg.eval_every}", "run.eval_every")
    if cfg.workers < 0:
        raise ConfigError(f"must be >= 0, got {cfg.workers}", "run.workers")
    checks = [
        ("xor.hidden", len(cfg.xor.hidden) == 2 and min(cfg.xor.hidden) >= 1, "two positive widths"),
        ("xor.n_per_corner", cfg.xor.n_per_corner >= 1, "must be >= 1"),
        ("xor.noise_std", cfg.xor.noise_std >= 0, "must be >= 0"),
        ("xor.lr", cfg.xor.lr > 0, "must be > 0"),
        ("safety.tau", cfg.safety.tau > 0, "must be > 0"),
        ("safety.n", cfg.safety.n >= 1, "must be >= 1"),
        ("safety.hidden", len(cfg.safety.hidden) == 2 and min(cfg.safety.hidden) >= 1, "two positive widths"),
        ("safety.lr", cfg.safety.lr > 0, "must be > 0"),
        ("safety.alpha", 0 < cfg.safety.alpha <= 1, "must lie in (0, 1]"),
        ("safety.warmup", cfg.safety.warmup >= 0, "must be >= 0"),
        ("safety.corr_floor", 0 <= cfg.safety.corr_floor <= 1, "must lie in [0, 1]"),
        ("witness.W", cfg.witness.W >= 1, "must be >= 1"),
        ("witness.c", cfg.witness.c >= 1, "must be >= 1"),
        ("witness.negatives_per_positive", cfg.witness.negatives_per_positive >= 0, "must be >= 0"),
        ("witness.extra_hidden", cfg.witness.extra_hidden >= 0, "must be >= 0"),
        ("witness.lr", cfg.witness.lr > 0, "must be > 0"),
        ("witness.hidden_lr", cfg.witness.hidden_lr >= 0, "must be >= 0"),
        ("witness.beta", cfg.witness.beta > 0, "must be > 0"),
        ("witness.alpha", 0 < cfg.witness.alpha <= 1, "must lie in (0, 1]"),
        ("sweep.W_grid", len(cfg.sweep.W_grid) >= 2 and min(cfg.sweep.W_grid) >= 2, "need >= 2 values, each >= 2"),
        ("shock.shock_fraction", 0 <= cfg.shock.shock_fraction < 1, "must lie in [0, 1)"),
        ("shock.shock_step", cfg.shock.shock_step >= cfg.budget.delta, "must be >= budget.delta"),
        ("shock.horizon", cfg.shock.horizon >= 1, "must be >= 1"),
        ("shock.tolerance", cfg.shock.tolerance >= 0, "must be >= 0"),
        ("entropy.density_target", 0 < cfg.entropy.density_target <= 1, "must lie in (0, 1]"),
        ("entropy.hidden", len(cfg.entropy.hidden) == 2 and min(cfg.entropy.hidden) >= 1, "two positive widths"),
        ("entropy.total_steps", cfg.entropy.total_steps > cfg.entropy.warmup, "must exceed entropy.warmup"),
        ("entropy.sigma2", cfg.entropy.sigma2 > 0, "must be > 0"),
        ("entropy.delta", cfg.entropy.delta >= 1, "must be >= 1"),
        ("entropy.mi_levels", cfg.entropy.mi_levels >= 2, "must be >= 2"),
    ]
    for key, ok, why in checks:
        if not ok:
            raise ConfigError(why, key)
    if cfg.experiment in ("xor-balance", "shock-recovery") and cfg.budget.side is not Side.SP_OUT:
        raise ConfigError("XOR budgets act on H1 fan-out; side must be SP_OUT", "budget.side")
    return cfg


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (D, W)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    unknown = [s for s in parser.sections() if s != "run" and s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}", unknown[0])
    if not parser.has_section("run") or not parser.has_option("run", "experiment"):
        raise ConfigError("missing required key", "run.experiment")
    run = dict(parser.items("run"))
    for key in run:
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown key (known: {', '.join(RUN_KEYS)})", f"run.{key}")
    experiment = run["experiment"].strip()
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}", "run.experiment")
    base = RunConfig(
        experiment=experiment,
        seeds=DEFAULT_SEEDS[experiment],
        out=f"results/{experiment}",
        plan=DEFAULT_PLANS[experiment],
    )
    changes = {}
    if "seeds" in run:
        changes["seeds"] = parse_seeds(run["seeds"])
    if "out" in run:
        changes["out"] = run["out"].strip()
    for key in ("eval_every", "workers"):
        if key in run:
            changes[key] = _convert(run[key], int, f"run.{key}")
    for section, cls in SECTIONS.items():
        if parser.has_section(section):
            changes[section] = _build_section(cls, getattr(base, section), dict(parser.items(section)), section)
    return _validate(replace(base, **changes))


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved INI text; ``parse_config_text(dump_config(c)) == c``."""
    lines = ["[run]"]
    lines.append(f"experiment = {cfg.experiment}")
    lines.append(f"seeds = {format_seeds(cfg.seeds)}")
    lines.append(f"out = {cfg.out}")
    lines.append(f"eval_every = {cfg.eval_every}")
    lines.append(f"workers = {cfg.workers}")
    for section in SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Short digest of the resolved config, ignoring the output directory and worker count."""
    text = dump_config(replace(cfg, out="", workers=0))
    return hashlib.sha256(text.encode()).hexdigest()[:12]
