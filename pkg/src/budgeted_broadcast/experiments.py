"""Didactic experiments: XOR balance, DNF safety, DNF witness barrier and its
scaling sweep, shock recovery, and the entropy / MI comparison.

Every runner is a pure function of its arguments and seed and returns an
:class:`ExperimentResult`. Training alternates ``sgd_steps_per_cycle`` full-batch
SGD steps with at most one mask refresh; the activity EMA of the budgeted
units is updated on every SGD step from the same batch.
"""

from __future__ import annotations

import enum
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, nn, tasks
from . import sparsity as sp
from .errors import ConfigError
from .sparsity import BudgetConfig, Side


class RefreshMode(str, enum.Enum):
    CONTROLLER = "CONTROLLER"
    THRESHOLD = "THRESHOLD"
    NONE = "NONE"


class WitnessMode(str, enum.Enum):
    SGD_ONLY = "SGD_ONLY"
    BB_ALTERNATING = "BB_ALTERNATING"


def default_max_cycles(W: int) -> int:
    """``ceil(10 W ln(W + 1))``: well above the ``W H_W`` coupon-collector mean."""
    return int(math.ceil(10 * W * math.log(W + 1)))


@dataclass(frozen=True)
class CyclePlan:
    sgd_steps_per_cycle: int = 200
    refresh_mode: RefreshMode = RefreshMode.CONTROLLER
    max_cycles: int | None = None  # None: default_max_cycles(W) for witness runs
    success_accuracy: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "refresh_mode", RefreshMode(self.refresh_mode))
        if self.sgd_steps_per_cycle < 1:
            raise ConfigError(f"must be >= 1, got {self.sgd_steps_per_cycle}", "sgd_steps_per_cycle")
        if self.max_cycles is not None and self.max_cycles < 1:
            raise ConfigError(f"must be >= 1, got {self.max_cycles}", "max_cycles")
        if not 0 < self.success_accuracy <= 1:
            raise ConfigError(f"must lie in (0, 1], got {self.success_accuracy}", "success_accuracy")

    def cycles_for(self, W: int | None = None) -> int:
        if self.max_cycles is not None:
            return self.max_cycles
        if W is None:
            raise ConfigError("max_cycles must be set when there is no W to derive it from", "max_cycles")
        return default_max_cycles(W)


XOR_PLAN = CyclePlan(sgd_steps_per_cycle=50, refresh_mode=RefreshMode.CONTROLLER, max_cycles=60)
XOR_BUDGET = BudgetConfig(beta=0.1, d0=64.0, tau=40.0, m=1, D=128, delta=50, warmup=500, alpha=0.05)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (np.floating,)):
        return _jsonable(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class ExperimentResult:
    experiment: str
    seed: int
    success: bool
    cycles_used: int
    final_accuracy: float
    balance: metrics.BalanceFit | None = None
    series: list[dict] = field(default_factory=list)  # one row per sample, keyed by "step"
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        row = {
            "experiment": self.experiment,
            "seed": self.seed,
            "success": self.success,
            "cycles_used": self.cycles_used,
            "final_accuracy": self.final_accuracy,
        }
        if self.balance is not None:
            row["balance"] = self.balance.as_dict()
        row.update(self.extra)
        return _jsonable(row)

    def to_jsonl(self, path) -> Path:
        """Summary line first, then one line per time-series sample."""
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps({"kind": "result", **self.summary()}) + "\n")
            for row in self.series:
                fh.write(json.dumps({"kind": "sample", **_jsonable(row)}) + "\n")
        return path


def read_jsonl(path) -> tuple[dict, list[dict]]:
    summary, samples = None, []
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind", None)
            if kind == "result":
                summary = rec
            elif kind == "sample":
                samples.append(rec)
    if summary is None:
        raise ValueError(f"{path}: no result record")
    return summary, samples


def tracked_activations(acts: list[np.ndarray], layer_id: int, side: Side) -> np.ndarray:
    """Activations of the units budgeted on ``side`` of layer ``layer_id``."""
    return acts[layer_id] if Side(side) is Side.SP_OUT else acts[layer_id + 1]


def _sgd_steps(net, batch, lr, steps, tracker, layer_id, cfg, layer_lr=None, on_step=None):
    for _ in range(steps):
        acts = nn.forward(net, batch)
        tracker = sp.update_activity(tracker, tracked_activations(acts, layer_id, cfg.side), cfg.alpha)
        nn.train_step(net, batch, lr, layer_lr)
        if on_step is not None:
            on_step(net, tracker)
    return tracker


def _degrees(layer: nn.MaskedLayer, side: Side) -> np.ndarray:
    return layer.fan_out() if Side(side) is Side.SP_OUT else layer.fan_in()


# ---------------------------------------------------------------- XOR balance


def run_xor_balance(
    seed: int,
    cfg: BudgetConfig = XOR_BUDGET,
    plan: CyclePlan = XOR_PLAN,
    *,
    hidden: tuple[int, int] = (64, 128),
    n_per_corner: int = 32,
    noise_std: float = 0.15,
    lr: float = 0.1,
    eval_every: int = 50,
) -> ExperimentResult:
    """Train ``2 -> H1 -> H2 -> 1`` on noisy XOR with SP_OUT budgets on H1.

    The run uses the full cycle budget so the balance fit sees a settled
    controller; ``cycles_used`` is the first cycle that classified all four
    corners and stayed correct to the end.
    """
    net = nn.init_network([2, *hidden, 1], seed)
    data = tasks.gen_xor(n_per_corner, noise_std, seed)
    corners = tasks.xor_corners()
    cfg = replace(cfg, side=Side.SP_OUT, D=min(cfg.D, hidden[1]))
    tracker = sp.ActivityTracker.create(hidden[0], eps_clamp=cfg.eps_clamp)
    series: list[dict] = []
    n_cycles = plan.cycles_for()
    prunes = 0

    def sample(net, tracker):
        if net.step % eval_every:
            return
        k = net.layers[1].fan_out()
        series.append({
            "step": net.step,
            "loss": nn.loss(net, data),
            "accuracy": nn.evaluate_accuracy(net, corners),
            "density": net.layers[1].mask.mean(),
            "k_min": int(k.min()),
            "k_max": int(k.max()),
            "traffic_sum": float(tracker.a_ema @ k),
        })

    first_ok = None
    for cycle in range(1, n_cycles + 1):
        tracker = _sgd_steps(net, data, lr, plan.sgd_steps_per_cycle, tracker, 1, cfg, on_step=sample)
        before = net.layers[1].mask
        if plan.refresh_mode is RefreshMode.CONTROLLER:
            net.layers[1] = sp.refresh_masks(net.layers[1], tracker, cfg, net.step)
        elif plan.refresh_mode is RefreshMode.THRESHOLD and sp.is_refresh_step(net.step, cfg):
            net.layers[1] = sp.threshold_prune(net.layers[1], tracker, cfg.tau, cfg.m, cfg.side)
        prunes += int(not np.array_equal(before, net.layers[1].mask))
        ok = nn.evaluate_accuracy(net, corners) >= plan.success_accuracy
        if ok and first_ok is None:
            first_ok = cycle
        elif not ok:
            first_ok = None

    records = sp.traffic_snapshot(net.layers[1], tracker, cfg)
    fit = metrics.fit_balance(records, cfg.m, cfg.D)
    accuracy = nn.evaluate_accuracy(net, corners)
    return ExperimentResult(
        experiment=f"xor-balance/{plan.refresh_mode.value}",
        seed=seed,
        success=accuracy >= plan.success_accuracy,
        cycles_used=first_ok if first_ok is not None else n_cycles,
        final_accuracy=accuracy,
        balance=fit,
        series=series,
        extra={
            "mode": plan.refresh_mode.value,
            "dense_width": hidden[1],
            "mask_changes": prunes,
            "units": [{"unit": r.unit, "a": r.a, "k": r.k, "saturated": r.saturated} for r in records],
        },
    )


# ---------------------------------------------------------------- DNF safety

SAFETY_SPEC = tasks.DnfSpec(num_clauses=3, literals_per_clause=3, feature_freqs=(0.11, 0.72, 0.22))


def assign_detectors(hidden_acts: np.ndarray, feature_on: np.ndarray, classes: dict, floor: float = 0.3) -> dict:
    """Map each feature class to the hidden unit whose firing (activation > 0)
    correlates most positively with the feature indicator.

    Units that fire when the feature is absent are not detectors of it, so
    the sign matters. Classes whose best unit falls below ``floor`` map to ``None``.
    """
    hidden_acts = (np.asarray(hidden_acts) > 0).astype(np.float64)
    out = {}
    for name, j in classes.items():
        r = np.array([metrics.pearson(hidden_acts[:, u], feature_on[:, j]) for u in range(hidden_acts.shape[1])])
        r = np.nan_to_num(r, nan=-1.0)
        best = int(np.argmax(r))
        out[name] = {"unit": best if r[best] >= floor else None, "r": float(r[best])}
    return out


def run_dnf_safety(
    seed: int,
    spec: tasks.DnfSpec = SAFETY_SPEC,
    tau: float = 19.2,
    plan: CyclePlan = CyclePlan(sgd_steps_per_cycle=50, refresh_mode=RefreshMode.THRESHOLD, max_cycles=60),
    *,
    n: int = 2000,
    hidden: tuple[int, int] = (64, 32),
    hidden_bias: float = -1.0,
    lr: float = 0.1,
    alpha: float = 0.05,
    warmup: int = 1000,
    corr_floor: float = 0.3,
    eval_every: int = 50,
) -> ExperimentResult:
    """Threshold-pruned SP_OUT budgets on H1 of ``in -> H1 -> H2 -> 1``.

    Detectors are assigned once, at the end of warmup, and their traffic is
    followed from then on; that is the window in which pruning can act.
    """
    data, meta = tasks.gen_dnf_safety(spec, n, seed)
    net = nn.init_network([spec.input_dim, *hidden, 1], seed)
    net.layers[0].bias[:] = hidden_bias  # negative offset favours conjunction detectors
    cfg = BudgetConfig(tau=tau, m=1, D=hidden[1], delta=plan.sgd_steps_per_cycle, warmup=warmup, alpha=alpha)
    tracker = sp.ActivityTracker.create(hidden[0], eps_clamp=cfg.eps_clamp)
    detectors: dict | None = None
    series: list[dict] = []
    pruned_units: set[int] = set()

    def sample(net, tracker):
        if detectors is None or net.step % eval_every:
            return
        k = net.layers[1].fan_out()
        row = {"step": net.step, "loss": nn.loss(net, data), "tau": tau}
        for name, d in detectors.items():
            u = d["unit"]
            row[f"traffic_{name}"] = float(tracker.a_ema[u] * k[u]) if u is not None else float("nan")
        series.append(row)

    n_cycles = plan.cycles_for()
    for _ in range(n_cycles):
        tracker = _sgd_steps(net, data, lr, plan.sgd_steps_per_cycle, tracker, 1, cfg, on_step=sample)
        if detectors is None and net.step >= warmup:
            acts = nn.forward(net, data)[1]
            detectors = assign_detectors(acts, meta.feature_on, meta.classes, corr_floor)
            sample(net, tracker)
        if plan.refresh_mode is RefreshMode.THRESHOLD and sp.is_refresh_step(net.step, cfg):
            before = net.layers[1].fan_out()
            net.layers[1] = sp.threshold_prune(net.layers[1], tracker, tau, cfg.m, Side.SP_OUT)
            pruned_units.update(np.flatnonzero(net.layers[1].fan_out() < before).tolist())

    accuracy = nn.evaluate_accuracy(net, data)
    detectors = detectors or {name: {"unit": None, "r": 0.0} for name in meta.classes}
    inconclusive = detectors["rare"]["unit"] is None or detectors["common"]["unit"] is None
    checks = {}
    if not inconclusive and series:
        rare = np.array([row["traffic_rare"] for row in series])
        common = np.array([row["traffic_common"] for row in series])
        checks = {
            "rare_max_traffic": float(rare.max()),
            "rare_below_tau": bool(np.all(rare <= tau)),
            "common_start_traffic": float(common[0]),
            "common_exceeded_tau": bool(np.any(common > tau)),
            "common_pruned": detectors["common"]["unit"] in pruned_units,
            "common_final_traffic": float(common[-1]),
            "common_ends_below_tau": bool(common[-1] <= tau),
        }
    passed = bool(checks) and checks["rare_below_tau"] and checks["common_exceeded_tau"] \
        and checks["common_pruned"] and checks["common_ends_below_tau"]
    return ExperimentResult(
        experiment="dnf-safety",
        seed=seed,
        success=passed,
        cycles_used=n_cycles,
        final_accuracy=accuracy,
        series=series,
        extra={
            "tau": tau,
            "label_rule": meta.label_rule,
            "classes": meta.classes,
            "detectors": detectors,
            "shared_detector": detectors["rare"]["unit"] is not None
            and detectors["rare"]["unit"] == detectors["common"]["unit"],
            "inconclusive": inconclusive,
            "pruned_units": sorted(pruned_units),
            **checks,
        },
    )


# ---------------------------------------------------------------- DNF witness


@dataclass(frozen=True)
class WitnessSettings:
    c: int = 3
    negatives_per_positive: float = 1.0
    extra_hidden: int = 0  # hidden width is W + 1 + extra_hidden
    lr: float = 1.0
    hidden_lr: float = 1.0  # factor on the first layer's step; < 1 makes training lazier
    hidden_bias: float = -0.5
    init_scale: float = 1.0
    beta: float = 0.5
    d0_fraction: float = 0.5  # d0 = d0_fraction * input width
    alpha: float = 0.2


def witness_budget(settings: WitnessSettings, input_dim: int, delta: int) -> BudgetConfig:
    """SP_IN budget on the hidden layer, refreshed at the end of every cycle."""
    return BudgetConfig(
        beta=settings.beta,
        d0=settings.d0_fraction * input_dim,
        m=1,
        D=input_dim,
        delta=delta,
        warmup=0,
        alpha=settings.alpha,
        side=Side.SP_IN,
    )


def run_dnf_witness(
    seed: int,
    W: int,
    mode: WitnessMode,
    plan: CyclePlan = CyclePlan(),
    settings: WitnessSettings = WitnessSettings(),
) -> ExperimentResult:
    """Fit the witness set with ``in -> (W + 1 + extra) -> 1``.

    Accuracy is checked after every SGD phase; success means every witness and
    negative is classified correctly. BB_ALTERNATING follows each unsuccessful
    phase with exactly one SP_IN refresh of the hidden layer.
    """
    mode = WitnessMode(mode)
    ws = tasks.gen_dnf_witness(W, settings.c, settings.negatives_per_positive, seed)
    batch = ws.batch()
    width = W + 1 + settings.extra_hidden
    net = nn.init_network([ws.spec.input_dim, width, 1], seed, settings.init_scale)
    net.layers[0].bias[:] = settings.hidden_bias
    cfg = witness_budget(settings, ws.spec.input_dim, plan.sgd_steps_per_cycle)
    tracker = sp.ActivityTracker.create(width, eps_clamp=cfg.eps_clamp)
    layer_lr = [settings.hidden_lr, 1.0]
    n_cycles = plan.cycles_for(W)
    series: list[dict] = []
    success, cycles_used = False, n_cycles
    for cycle in range(1, n_cycles + 1):
        tracker = _sgd_steps(net, batch, settings.lr, plan.sgd_steps_per_cycle, tracker, 0, cfg, layer_lr)
        accuracy = nn.evaluate_accuracy(net, batch)
        k = net.layers[0].fan_in()
        series.append({
            "step": net.step,
            "cycle": cycle,
            "loss": nn.loss(net, batch),
            "accuracy": accuracy,
            "density": net.layers[0].mask.mean(),
            "traffic_sum": float(tracker.a_ema @ k),
        })
        if accuracy >= plan.success_accuracy:
            success, cycles_used = True, cycle
            break
        if mode is WitnessMode.BB_ALTERNATING:
            net.layers[0] = sp.refresh_masks(net.layers[0], tracker, cfg, net.step)
    return ExperimentResult(
        experiment=f"dnf-witness/{mode.value}",
        seed=seed,
        success=success,
        cycles_used=cycles_used,
        final_accuracy=series[-1]["accuracy"],
        series=series,
        extra={
            "mode": mode.value,
            "W": W,
            "hidden_width": width,
            "max_cycles": n_cycles,
            # hidden units silent on every example; refresh cannot revive these
            "dead_units": int(np.sum(~(nn.forward(net, batch)[1] > 0).any(axis=0))),
        },
    )


@dataclass(frozen=True)
class ScalingRow:
    W: int
    runs: int
    successes: int
    median_cycles: float
    oracle: float
    excluded: bool  # fewer than half the seeds succeeded


@dataclass(frozen=True)
class ScalingReport:
    rows: tuple[ScalingRow, ...]
    slope: float
    intercept: float
    r_squared: float
    oracle_correlation: float


def summarise_scaling(results_by_W: dict, oracle_trials: int = 20000, seed: int = 0) -> ScalingReport:
    """Median cycles of successful runs per W, regressed on ``W ln W``."""
    rows = []
    for W in sorted(results_by_W):
        runs = results_by_W[W]
        won = [r.cycles_used for r in runs if r.success]
        rows.append(ScalingRow(
            W=W,
            runs=len(runs),
            successes=len(won),
            median_cycles=float(np.median(won)) if won else float("nan"),
            oracle=tasks.coupon_collector_oracle(W, oracle_trials, seed + W),
            excluded=2 * len(won) < len(runs),
        ))
    kept = [r for r in rows if not r.excluded]
    nan = float("nan")
    if len(kept) < 2:
        return ScalingReport(tuple(rows), nan, nan, nan, nan)
    x = np.array([r.W * math.log(r.W) for r in kept])
    y = np.array([r.median_cycles for r in kept])
    slope, intercept = np.polyfit(x, y, 1)
    r = metrics.pearson(x, y)
    return ScalingReport(
        tuple(rows), float(slope), float(intercept), r * r,
        metrics.pearson(y, [row.oracle for row in kept]),
    )


def run_scaling_sweep(
    W_grid=(4, 8, 16, 32),
    seeds_per_W: int = 20,
    plan: CyclePlan = CyclePlan(),
    settings: WitnessSettings = WitnessSettings(),
    workers: int = 1,
    first_seed: int = 0,
) -> tuple[ScalingReport, dict]:
    jobs = [
        dict(seed=first_seed + s, W=W, mode=WitnessMode.BB_ALTERNATING, plan=plan, settings=settings)
        for W in W_grid for s in range(seeds_per_W)
    ]
    results = run_parallel(run_dnf_witness, jobs, workers)
    by_W: dict[int, list] = {W: [] for W in W_grid}
    for res in results:
        by_W[res.extra["W"]].append(res)
    return summarise_scaling(by_W), by_W


# ---------------------------------------------------------------- shock


def apply_shock(layer: nn.MaskedLayer, fraction: float, rng: np.random.Generator) -> nn.MaskedLayer:
    """Zero a random ``fraction`` of the active mask entries, rescaling like any prune."""
    if not 0 <= fraction < 1:
        raise ConfigError(f"must lie in [0, 1), got {fraction}", "shock_fraction")
    active = np.flatnonzero(layer.mask.ravel())
    hit = rng.choice(active, size=int(round(fraction * len(active))), replace=False)
    if len(hit) == 0:
        return layer.copy()
    new_mask = layer.mask.copy().ravel()
    new_mask[hit] = 0.0
    return sp.variance_rescale(layer.copy(), layer.mask, new_mask.reshape(layer.shape))


def _recovery_run(net, tracker, data, cfg, lr, horizon, target, refresh):
    losses = []
    recovered = None
    for t in range(1, horizon + 1):
        acts = nn.forward(net, data)
        tracker = sp.update_activity(tracker, acts[1], cfg.alpha)
        losses.append(nn.train_step(net, data, lr))
        if refresh:
            net.layers[1] = sp.refresh_masks(net.layers[1], tracker, cfg, net.step)
        if recovered is None and nn.loss(net, data) <= target:
            recovered = t
    return recovered, losses


def run_shock_recovery(
    seed: int,
    shock_fraction: float = 0.5,
    shock_step: int = 3000,
    cfg: BudgetConfig = XOR_BUDGET,
    *,
    horizon: int = 1000,
    tolerance: float = 0.10,
    n_per_corner: int = 32,
    noise_std: float = 0.15,
    lr: float = 0.1,
) -> ExperimentResult:
    """Shock a BB-trained XOR net and time its recovery with and without refresh.

    Recovery is the number of SGD steps after the shock until the training
    loss is back within ``tolerance`` of its pre-shock value. Both arms start
    from the same shocked network; ``None`` means no recovery within
    ``horizon`` steps.
    """
    cfg = replace(cfg, side=Side.SP_OUT)
    plan = CyclePlan(sgd_steps_per_cycle=cfg.delta, refresh_mode=RefreshMode.CONTROLLER,
                     max_cycles=max(1, shock_step // cfg.delta))
    net = nn.init_network([2, 64, 128, 1], seed)
    data = tasks.gen_xor(n_per_corner, noise_std, seed)
    tracker = sp.ActivityTracker.create(64, eps_clamp=cfg.eps_clamp)
    for _ in range(plan.max_cycles):
        tracker = _sgd_steps(net, data, lr, plan.sgd_steps_per_cycle, tracker, 1, cfg)
        net.layers[1] = sp.refresh_masks(net.layers[1], tracker, cfg, net.step)
    pre_loss = nn.loss(net, data)
    pre_acc = nn.evaluate_accuracy(net, tasks.xor_corners())
    rng = np.random.default_rng([seed, 0x5EED])
    shocked = net.copy()
    shocked.layers[1] = apply_shock(net.layers[1], shock_fraction, rng)
    post_loss = nn.loss(shocked, data)
    target = (1.0 + tolerance) * pre_loss
    arms = {}
    for name, refresh in (("refresh", True), ("frozen", False)):
        steps, losses = _recovery_run(shocked.copy(), tracker, data, cfg, lr, horizon, target, refresh)
        arms[name] = (steps, losses)
    series = [
        {"step": shock_step + t + 1, "loss_refresh": lr_, "loss_frozen": lf}
        for t, (lr_, lf) in enumerate(zip(arms["refresh"][1], arms["frozen"][1]))
    ]
    rec = arms["refresh"][0]
    return ExperimentResult(
        experiment="shock-recovery",
        seed=seed,
        success=rec is not None,
        cycles_used=plan.max_cycles,
        final_accuracy=pre_acc,
        series=series,
        extra={
            "shock_fraction": shock_fraction,
            "shock_step": net.step,
            "pre_shock_loss": pre_loss,
            "post_shock_loss": post_loss,
            "recovery_tolerance": tolerance,
            "recovery_steps_refresh": rec,
            "recovery_steps_frozen": arms["frozen"][0],
        },
    )


def recovery_key(steps) -> float:
    """Unrecovered runs rank after every recovered one."""
    return math.inf if steps is None else float(steps)


# ---------------------------------------------------------------- entropy / MI


def calibrate_d0(a: np.ndarray, cfg: BudgetConfig, density: float) -> float:
    """Smallest ``d0`` whose mean target degree reaches ``density * D``.

    Mean degree is non-decreasing in ``d0``, so bisection suffices.
    """
    goal = density * cfg.D
    logodds = np.log((1.0 - a) / a) / cfg.beta
    lo = cfg.m - logodds.max() - 1.0
    hi = cfg.D - logodds.min() + 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        k, _ = sp.target_degrees(a, replace(cfg, d0=mid))
        if k.mean() >= goal:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class ArmMetrics:
    density: float
    entropy_sum: float
    code_entropy: float
    mean_abs_corr: float
    traffic_sum: float
    accuracy: float


PROBE_UNITS = 12  # pattern histograms are taken over at most this many audience units


def _arm_metrics(net: nn.Network, data: nn.Batch, cfg: BudgetConfig) -> ArmMetrics:
    acts = nn.forward(net, data)
    z, y = acts[1], acts[2]
    a_z = np.clip((z > 0).mean(axis=0), cfg.eps_clamp, 1 - cfg.eps_clamp)
    return ArmMetrics(
        density=net.layers[1].mask.mean(),
        entropy_sum=metrics.binary_entropy_sum((y > 0).mean(axis=0)),
        code_entropy=metrics.empirical_code_entropy(y[:, :PROBE_UNITS]),
        mean_abs_corr=metrics.mean_abs_correlation(y).value,
        traffic_sum=float(a_z @ net.layers[1].fan_out()),
        accuracy=nn.evaluate_accuracy(net, data),
    )


def probe_mi(net: nn.Network, data: nn.Batch, sigma2: float = 1.0, rescaled: bool = False) -> float:
    """Gaussian-channel MI between the probe layer Z and its audience layer.

    By default the channel is the raw masked matrix ``W * M``: the traffic
    bound assumes a fixed weight bound ``C``, which the variance rescale would
    break by inflating surviving edges as others are pruned.
    """
    z = nn.forward(net, data)[1]
    layer = net.layers[1]
    w = layer.effective() if rescaled else layer.weights * layer.mask
    return metrics.gaussian_channel_mi(w, np.cov(z, rowvar=False), sigma2)


def budget_sweep(net: nn.Network, data: nn.Batch, tracker: sp.ActivityTracker, cfg: BudgetConfig,
                 levels: int = 24, sigma2: float = 1.0) -> list[dict]:
    """Re-run the refresh at ``levels`` budgets from dense down to one edge per unit.

    Weights and activity stay fixed, so traffic changes only through the budget.
    """
    rows = []
    for goal in np.linspace(1.0, 1.0 / cfg.D, levels):
        level_cfg = replace(cfg, d0=calibrate_d0(tracker.a_ema, cfg, float(goal)), warmup=0, delta=1)
        probe = net.copy()
        probe.layers[1] = sp.refresh_masks(net.layers[1], tracker, level_cfg, 0)
        rows.append({
            "density": probe.layers[1].mask.mean(),
            "traffic_sum": sp.traffic_sum(sp.traffic_snapshot(probe.layers[1], tracker, level_cfg)),
            "mi": probe_mi(probe, data, sigma2),
            "mi_rescaled": probe_mi(probe, data, sigma2, rescaled=True),
        })
    return rows


def run_entropy_comparison(
    seed: int,
    density_target: float = 0.5,
    *,
    spec: tasks.DnfSpec = SAFETY_SPEC,
    n: int = 1000,
    hidden: tuple[int, int] = (32, 32),
    lr: float = 0.1,
    beta: float = 1.0,
    alpha: float = 0.05,
    warmup: int = 500,
    delta: int = 50,
    total_steps: int = 2500,
    sigma2: float = 1.0,
    density_tol: float = 0.02,
    mi_levels: int = 24,
) -> ExperimentResult:
    """BB (SP_OUT on the probe layer Z) against global magnitude pruning.

    Both arms start from the same network and data and are trained in lockstep.
    From warmup on, the BB budget ``d0`` is recalibrated at each refresh so that
    the target density ramps linearly from 1 to ``density_target``; the
    magnitude arm is pruned at the same steps to the density BB realised.
    Entropy and correlation are measured on the audience layer Y, the pattern
    entropy on its first ``PROBE_UNITS`` units. The traffic / MI checkpoints
    are a budget sweep over the final BB network.
    """
    if not 0 < density_target <= 1:
        raise ConfigError(f"must lie in (0, 1], got {density_target}", "density_target")
    data, _ = tasks.gen_dnf_safety(spec, n, seed)
    bb = nn.init_network([spec.input_dim, *hidden, 1], seed)
    mag = bb.copy()
    cfg = BudgetConfig(beta=beta, d0=float(hidden[1]), m=1, D=hidden[1], delta=delta, warmup=warmup, alpha=alpha)
    tracker = sp.ActivityTracker.create(hidden[0], eps_clamp=cfg.eps_clamp)
    refresh_steps = [s for s in range(warmup, total_steps + 1, delta) if s > 0]
    ramp_end = refresh_steps[max(0, int(0.75 * len(refresh_steps)) - 1)] if refresh_steps else warmup
    series: list[dict] = []
    while bb.step < total_steps:
        tracker = _sgd_steps(bb, data, lr, delta, tracker, 1, cfg)
        for _ in range(delta):
            nn.train_step(mag, data, lr)
        if not sp.is_refresh_step(bb.step, cfg):
            continue
        frac = min(1.0, (bb.step - warmup) / max(1, ramp_end - warmup))
        goal = 1.0 - frac * (1.0 - density_target)
        cfg = replace(cfg, d0=calibrate_d0(tracker.a_ema, cfg, goal))
        bb.layers[1] = sp.refresh_masks(bb.layers[1], tracker, cfg, bb.step)
        realised = bb.layers[1].mask.mean()
        if realised < 1.0:
            mag = sp.magnitude_prune_global(mag, realised, layer_ids=[1])
        series.append({
            "step": bb.step,
            "density_goal": goal,
            "density": realised,
            "d0": cfg.d0,
            "traffic_sum": sp.traffic_sum(sp.traffic_snapshot(bb.layers[1], tracker, cfg)),
        })
    m_bb = _arm_metrics(bb, data, cfg)
    m_mag = _arm_metrics(mag, data, cfg)
    if abs(m_bb.density - m_mag.density) > density_tol:
        mag = sp.magnitude_prune_global(mag, m_bb.density, layer_ids=[1])
        m_mag = _arm_metrics(mag, data, cfg)
    sweep = budget_sweep(bb, data, tracker, cfg, mi_levels, sigma2)
    traffic = [row["traffic_sum"] for row in sweep]
    return ExperimentResult(
        experiment="entropy-comparison",
        seed=seed,
        success=m_bb.entropy_sum > m_mag.entropy_sum and m_bb.mean_abs_corr < m_mag.mean_abs_corr,
        cycles_used=len(series),
        final_accuracy=m_bb.accuracy,
        series=series,
        extra={
            "density_target": density_target,
            "bb": asdict(m_bb),
            "magnitude": asdict(m_mag),
            "density_gap": abs(m_bb.density - m_mag.density),
            "mi_sweep": sweep,
            "traffic_mi_pearson": metrics.pearson(traffic, [row["mi"] for row in sweep]),
            "traffic_mi_pearson_rescaled": metrics.pearson(traffic, [row["mi_rescaled"] for row in sweep]),
            "checkpoints": len(sweep),
        },
    )


# ---------------------------------------------------------------- parallel seeds


def _call(job):
    fn, kwargs = job
    return fn(**kwargs)


def default_workers() -> int:
    """``BB_WORKERS`` from the environment, else 1."""
    raw = os.environ.get("BB_WORKERS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"not an integer: {raw!r}", "BB_WORKERS") from None
    if value < 1:
        raise ConfigError(f"must be >= 1, got {value}", "BB_WORKERS")
    return value


def iter_parallel(fn, jobs: list[dict], workers: int = 1):
    """Yield ``fn(**job)`` for every job, in job order, from a bounded process pool."""
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            yield fn(**job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_call, [(fn, job) for job in jobs])


def run_parallel(fn, jobs: list[dict], workers: int = 1) -> list:
    return list(iter_parallel(fn, jobs, workers))
