"""Budgeted Broadcast controller and baseline pruners.

Units are budgeted on one side of a layer: ``SP_OUT`` masks a source unit's
row (its fan-out), ``SP_IN`` masks a target unit's column (its fan-in).
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import MaskedLayer, Network

log = logging.getLogger(__name__)


class Side(str, enum.Enum):
    SP_IN = "SP_IN"
    SP_OUT = "SP_OUT"


@dataclass(frozen=True)
class BudgetConfig:
    beta: float = 0.1
    d0: float = 64.0
    tau: float = 32.0
    m: int = 1
    D: int = 128
    delta: int = 50
    warmup: int = 500
    alpha: float = 0.05
    side: Side = Side.SP_OUT
    eps_clamp: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))
        checks = [
            ("beta", self.beta > 0, "must be > 0"),
            ("tau", self.tau > 0, "must be > 0"),
            ("m", self.m >= 1, "must be >= 1"),
            ("D", self.D >= self.m, "must be >= m"),
            ("delta", self.delta >= 1, "must be >= 1"),
            ("warmup", self.warmup >= 0, "must be >= 0"),
            ("alpha", 0 < self.alpha <= 1, "must lie in (0, 1]"),
            ("eps_clamp", 0 < self.eps_clamp < 0.5, "must lie in (0, 0.5)"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"{why}, got {getattr(self, key)!r}", key)


@dataclass
class ActivityTracker:
    a_ema: np.ndarray
    samples_seen: int = 0
    eps_clamp: float = 1e-4

    @classmethod
    def create(cls, n_units: int, init: float = 0.5, eps_clamp: float = 1e-4) -> "ActivityTracker":
        return cls(np.full(n_units, float(init)), 0, eps_clamp)

    def __len__(self) -> int:
        return len(self.a_ema)


@dataclass(frozen=True)
class TrafficRecord:
    unit: int
    a: float
    k: int
    t: float
    saturated: bool


def update_activity(tracker: ActivityTracker, activations, alpha: float) -> ActivityTracker:
    """Blend the batch on-rate (fraction of strictly positive activations) into the EMA."""
    acts = np.asarray(activations)
    if acts.ndim != 2 or acts.shape[0] < 1:
        raise ShapeError(f"need an (n >= 1, units) activation matrix, got {acts.shape}")
    if acts.shape[1] != len(tracker):
        raise ShapeError(f"{acts.shape[1]} activation columns for {len(tracker)} tracked units")
    on_rate = (acts > 0).mean(axis=0)
    eps = tracker.eps_clamp
    a = np.clip((1.0 - alpha) * tracker.a_ema + alpha * on_rate, eps, 1.0 - eps)
    return ActivityTracker(a, tracker.samples_seen + acts.shape[0], eps)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def raw_target_degree(a, cfg: BudgetConfig) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.any((a <= 0) | (a >= 1)):
        raise ValueError("activity must lie strictly inside (0, 1); clamp it first")
    return _round_half_up(cfg.d0 + np.log((1.0 - a) / a) / cfg.beta)


def target_degrees(a, cfg: BudgetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised degree law. Returns ``(k, saturated)``."""
    raw = raw_target_degree(a, cfg)
    k = np.clip(raw, cfg.m, cfg.D)
    return k, (raw < cfg.m) | (raw > cfg.D)


def target_degree(a: float, cfg: BudgetConfig) -> int:
    """``clip(round(d0 + ln((1 - a) / a) / beta), m, D)`` with half-up rounding."""
    k, _ = target_degrees(np.array([a]), cfg)
    return int(k[0])


def _unit_view(arr: np.ndarray, side: Side) -> np.ndarray:
    """Matrix with one row per budgeted unit."""
    return arr if Side(side) is Side.SP_OUT else arr.T


def topk_rows(scores: np.ndarray, k) -> np.ndarray:
    """0/1 mask keeping the ``k[u]`` largest entries of each row.

    Ties go to the lower column index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = np.broadcast_to(np.asarray(k, dtype=np.int64), scores.shape[:1])
    order = np.argsort(-scores, axis=1, kind="stable")
    rank = np.argsort(order, axis=1)
    return (rank < k[:, None]).astype(np.float64)


def variance_rescale(layer: MaskedLayer, old_mask: np.ndarray, new_mask: np.ndarray) -> MaskedLayer:
    """Multiply each output channel's rescale by ``sqrt(prev_active / cur_active)``."""
    prev = np.asarray(old_mask).sum(axis=0)
    cur = np.asarray(new_mask).sum(axis=0)
    dead = cur == 0
    if dead.any():
        log.warning("output channels left without inputs: %s", np.flatnonzero(dead).tolist())
    factor = np.ones_like(layer.rescale)
    live = ~dead
    factor[live] = np.sqrt(prev[live] / cur[live])
    return replace(layer, mask=np.asarray(new_mask, dtype=np.float64), rescale=layer.rescale * factor)


def _check_tracker(layer: MaskedLayer, tracker: ActivityTracker, side: Side):
    n_units = _unit_view(layer.mask, side).shape[0]
    if len(tracker) != n_units:
        raise ShapeError(f"tracker has {len(tracker)} units, layer side {Side(side).value} has {n_units}")


def is_refresh_step(step: int, cfg: BudgetConfig) -> bool:
    return step >= cfg.warmup and step % cfg.delta == 0


def refresh_masks(layer: MaskedLayer, tracker: ActivityTracker, cfg: BudgetConfig, step: int) -> MaskedLayer:
    """Reselect every unit's top-k edges by |W| from its full row/column.

    Off-schedule steps return the layer untouched. The new mask depends only on
    |W|, the activity EMA and ``cfg``; previously pruned edges can regrow.
    """
    _check_tracker(layer, tracker, cfg.side)
    if not is_refresh_step(step, cfg):
        return layer
    k, _ = target_degrees(tracker.a_ema, cfg)
    scores = np.abs(_unit_view(layer.weights, cfg.side))
    k = np.minimum(k, scores.shape[1])
    new_mask = _unit_view(topk_rows(scores, k), cfg.side)
    return variance_rescale(layer, layer.mask, new_mask)


def threshold_prune(
    layer: MaskedLayer, tracker: ActivityTracker, tau: float, m: int, side: Side = Side.SP_OUT
) -> MaskedLayer:
    """Drop the weakest active edges of every unit whose traffic ``a * k`` exceeds ``tau``.

    Removal stops as soon as the unit is within budget or down to ``m`` edges.
    """
    if not tau > 0:
        raise ConfigError(f"must be > 0, got {tau}", "tau")
    _check_tracker(layer, tracker, side)
    mask = _unit_view(layer.mask, side)
    weights = _unit_view(layer.weights, side)
    k = mask.sum(axis=1).astype(np.int64)
    a = tracker.a_ema
    over = a * k > tau
    if not over.any():
        return layer
    new_k = k.copy()
    for u in np.flatnonzero(over):
        allowed = max(int(m), math.floor(tau / a[u]))
        while allowed > m and a[u] * allowed > tau:
            allowed -= 1
        new_k[u] = min(k[u], allowed)
    # inactive edges score -1 so top-k only ever keeps already-active ones
    scores = np.where(mask > 0, np.abs(weights), -1.0)
    kept = topk_rows(scores, new_k) * mask
    new_mask = mask.copy()
    new_mask[over] = kept[over]
    return variance_rescale(layer, layer.mask, _unit_view(new_mask, side))


def traffic_snapshot(layer: MaskedLayer, tracker: ActivityTracker, cfg: BudgetConfig) -> list[TrafficRecord]:
    """Per-unit ``(a, k, t = a * k)`` on the configured side, sorted by unit.

    A unit is saturated when its unclipped target degree falls outside
    ``[m, D]`` or its current degree does.
    """
    _check_tracker(layer, tracker, cfg.side)
    k = _unit_view(layer.mask, cfg.side).sum(axis=1).astype(np.int64)
    _, clipped = target_degrees(tracker.a_ema, cfg)
    saturated = clipped | (k < cfg.m) | (k > cfg.D)
    return [
        TrafficRecord(unit=u, a=float(a), k=int(ku), t=float(a) * int(ku), saturated=bool(s))
        for u, (a, ku, s) in enumerate(zip(tracker.a_ema, k, saturated))
    ]


def traffic_sum(records) -> float:
    return float(sum(r.t for r in records))


def magnitude_prune_global(net: Network, density: float, layer_ids=None) -> Network:
    """Keep the ``round(density * total)`` largest |W| across the chosen layers.

    Selection reads every entry, masked or not. Returns a new network.
    """
    if not 0 < density <= 1:
        raise ConfigError(f"must lie in (0, 1], got {density}", "density")
    ids = list(range(len(net.layers))) if layer_ids is None else list(layer_ids)
    out = net.copy()
    if density == 1.0:
        return out
    flat = np.concatenate([np.abs(net.layers[i].weights).ravel() for i in ids])
    keep = int(round(density * flat.size))
    order = np.argsort(-flat, kind="stable")
    chosen = np.zeros(flat.size)
    chosen[order[:keep]] = 1.0
    offset = 0
    for i in ids:
        layer = out.layers[i]
        size = layer.weights.size
        new_mask = chosen[offset:offset + size].reshape(layer.shape)
        out.layers[i] = variance_rescale(layer, layer.mask, new_mask)
        offset += size
    return out


def activation_topk_prune(layer: MaskedLayer, tracker: ActivityTracker, k_fixed: int, side: Side = Side.SP_OUT) -> MaskedLayer:
    """Every unit keeps its ``k_fixed`` strongest edges, whatever its activity."""
    _check_tracker(layer, tracker, side)
    width = _unit_view(layer.mask, side).shape[1]
    if not 1 <= k_fixed <= width:
        raise ConfigError(f"must lie in [1, {width}], got {k_fixed}", "k_fixed")
    new_mask = topk_rows(np.abs(_unit_view(layer.weights, side)), k_fixed)
    return variance_rescale(layer, layer.mask, _unit_view(new_mask, side))
