"""Diagnostics: balance-law fit, coding entropy, decorrelation and MI bounds.

All entropies and information quantities are in nats.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import entr, ndtr

MAX_CODE_UNITS = 20


@dataclass(frozen=True)
class BalanceFit:
    slope: float
    intercept: float
    r_squared: float
    n_units_used: int
    excluded_saturated: int
    defined: bool = True
    constant_k: bool = False

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r_squared,
            "n_units": self.n_units_used,
            "excluded_saturated": self.excluded_saturated,
            "defined": self.defined,
            "constant_k": self.constant_k,
        }


@dataclass(frozen=True)
class CorrelationSummary:
    value: float
    n_pairs: int
    n_excluded: int

    @property
    def defined(self) -> bool:
        return self.n_pairs > 0


@dataclass(frozen=True)
class MiBoundReport:
    sigma2: float
    C: float
    trace_bound: float
    traffic_bound: float
    traffic_sum: float


def log_odds_inactive(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.log((1.0 - a) / a)


def fit_balance(records, m: int, D: int) -> BalanceFit:
    """OLS of ``ln((1 - a) / a)`` on ``k`` over units with ``m < k < D``.

    Returns an undefined fit when fewer than two usable units remain or all
    usable units share one degree; ``constant_k`` is set when every record has
    the same degree.
    """
    records = list(records)
    all_k = {r.k for r in records}
    constant_k = len(all_k) <= 1
    used = [r for r in records if not r.saturated and m < r.k < D]
    excluded = len(records) - len(used)
    nan = float("nan")
    if len(used) < 2 or len({r.k for r in used}) < 2:
        return BalanceFit(nan, nan, nan, len(used), excluded, defined=False, constant_k=constant_k)
    x = np.array([r.k for r in used], dtype=np.float64)
    y = log_odds_inactive([r.a for r in used])
    res = stats.linregress(x, y)
    return BalanceFit(
        float(res.slope), float(res.intercept), float(res.rvalue**2), len(used), excluded,
        constant_k=constant_k,
    )


def binary_entropy_sum(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(entr(a) + entr(1.0 - a)))


def _plugin_entropy(codes: np.ndarray) -> float:
    if len(codes) == 0:
        return 0.0
    _, counts = np.unique(codes, axis=0, return_counts=True)
    return float(entr(counts / counts.sum()).sum())


def empirical_code_entropy(codes) -> float:
    """Plug-in Shannon entropy of the binarised (``> 0``) activation patterns."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError(f"expected an (n, units) matrix, got shape {codes.shape}")
    if codes.shape[1] > MAX_CODE_UNITS:
        raise ValueError(
            f"{codes.shape[1]} units is too many for a pattern histogram "
            f"(limit {MAX_CODE_UNITS}); use binary_entropy_sum on the on-rates instead"
        )
    return _plugin_entropy((codes > 0).astype(np.uint8))


def empirical_mutual_information(z_codes, y_codes) -> float:
    """Plug-in ``H(Z) + H(Y) - H(Z, Y)`` over binarised (``> 0``) patterns."""
    z = np.asarray(z_codes)
    y = np.asarray(y_codes)
    if z.ndim != 2 or y.ndim != 2 or len(z) != len(y):
        raise ValueError(f"need two (n, units) matrices with equal n, got {z.shape} and {y.shape}")
    joint = np.hstack([z, y])
    return max(
        empirical_code_entropy(z) + empirical_code_entropy(y) - empirical_code_entropy(joint), 0.0
    )


def mean_abs_correlation(activations) -> CorrelationSummary:
    """Mean |Pearson r| over unit pairs; constant units are skipped and counted."""
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        return CorrelationSummary(float("nan"), 0, 0 if x.ndim != 2 else x.shape[1])
    live = x.std(axis=0) > 0
    n_excluded = int((~live).sum())
    if live.sum() < 2:
        return CorrelationSummary(float("nan"), 0, n_excluded)
    r = np.corrcoef(x[:, live], rowvar=False)
    iu = np.triu_indices(r.shape[0], k=1)
    return CorrelationSummary(float(np.abs(r[iu]).mean()), len(iu[0]), n_excluded)


def mi_trace_bound(w_effective, cov_z, sigma2: float) -> float:
    """``tr(W^T Cov(Z) W) / (2 sigma^2)`` for a Gaussian-noise channel ``Y = W^T Z + noise``."""
    w = np.asarray(w_effective, dtype=np.float64)
    cov = np.asarray(cov_z, dtype=np.float64)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] != w.shape[0]:
        raise ValueError(f"covariance {cov.shape} does not match weights {w.shape}")
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
        raise ValueError("covariance is not symmetric")
    return float(np.einsum("ij,ik,kj->", w, cov, w) / (2.0 * sigma2))


def mi_traffic_bound(records, C: float = 1.0, sigma2: float = 1.0) -> float:
    if not (C > 0 and sigma2 > 0):
        raise ValueError("C and sigma2 must be positive")
    return float(C / (2.0 * sigma2) * sum(r.t for r in records))


def mi_bound_report(w_effective, cov_z, records, C: float = 1.0, sigma2: float = 1.0) -> MiBoundReport:
    records = list(records)
    return MiBoundReport(
        sigma2=sigma2,
        C=C,
        trace_bound=mi_trace_bound(w_effective, cov_z, sigma2),
        traffic_bound=mi_traffic_bound(records, C, sigma2),
        traffic_sum=float(sum(r.t for r in records)),
    )


def gaussian_channel_mi(w_effective, cov_z, sigma2: float = 1.0) -> float:
    """``0.5 * logdet(I + W^T Cov(Z) W / sigma^2)``.

    Mutual information of ``Y = W^T Z + N(0, sigma^2 I)`` for Gaussian Z with the
    given covariance. Since ``log det(I + A) <= tr(A)`` it never exceeds
    :func:`mi_trace_bound`.
    """
    w = np.asarray(w_effective, dtype=np.float64)
    cov = np.asarray(cov_z, dtype=np.float64)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] != w.shape[0]:
        raise ValueError(f"covariance {cov.shape} does not match weights {w.shape}")
    a = w.T @ cov @ w / sigma2
    sign, logdet = np.linalg.slogdet(np.eye(a.shape[0]) + 0.5 * (a + a.T))
    if sign <= 0:
        raise ValueError("covariance is not positive semidefinite")
    return 0.5 * float(logdet)


def binary_channel_mi(codes, w_effective, bias, sigma2: float = 1.0) -> float:
    """I(Z; B) where B = 1[Z W + b + N(0, sigma2) > 0] and Z follows the empirical codes.

    ``codes`` are binarised with ``> 0``. Given Z the outputs are independent
    Bernoullis, so H(B | Z) is exact and H(B) is enumerated over all output
    patterns; the only estimate involved is the empirical distribution of Z.
    """
    z = (np.asarray(codes) > 0).astype(np.float64)
    w = np.asarray(w_effective, dtype=np.float64)
    n_out = w.shape[1]
    if n_out > 12:
        raise ValueError("at most 12 output units can be enumerated")
    patterns, counts = np.unique(z, axis=0, return_counts=True)
    pz = counts / counts.sum()
    p_on = ndtr((patterns @ w + np.asarray(bias, dtype=np.float64)) / np.sqrt(sigma2))
    h_cond = float(pz @ (entr(p_on) + entr(1.0 - p_on)).sum(axis=1))
    outs = np.array(list(itertools.product((0.0, 1.0), repeat=n_out)))
    # P(b | z) for every (z pattern, b pattern)
    like = np.prod(np.where(outs[None, :, :] > 0, p_on[:, None, :], 1.0 - p_on[:, None, :]), axis=2)
    pb = pz @ like
    return max(float(entr(pb).sum()) - h_cond, 0.0)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])
