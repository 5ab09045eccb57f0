"""Deterministic generators for the didactic tasks.

DNF inputs are laid out as disjoint blocks of ``c`` bits, one block per
clause; a clause is satisfied when its whole block is on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nn import Batch


@dataclass(frozen=True)
class DnfSpec:
    num_clauses: int
    literals_per_clause: int = 3
    feature_freqs: tuple[float, ...] = ()
    label_clauses: tuple[int, ...] | None = None  # None: every clause feeds the OR

    def __post_init__(self):
        if self.num_clauses < 1:
            raise ConfigError("need at least one clause", "num_clauses")
        if self.literals_per_clause < 1:
            raise ConfigError("need at least one literal per clause", "literals_per_clause")
        object.__setattr__(self, "feature_freqs", tuple(float(p) for p in self.feature_freqs))
        if self.feature_freqs and len(self.feature_freqs) != self.num_clauses:
            raise ConfigError("one frequency per clause required", "feature_freqs")
        for p in self.feature_freqs:
            if not 0 < p < 1:
                raise ConfigError(f"each frequency must lie in (0, 1), got {p}", "feature_freqs")

    @property
    def input_dim(self) -> int:
        return self.num_clauses * self.literals_per_clause

    @property
    def c(self) -> int:
        return self.literals_per_clause

    def block(self, clause: int) -> slice:
        return slice(clause * self.c, (clause + 1) * self.c)

    @property
    def labelled(self) -> tuple[int, ...]:
        return tuple(range(self.num_clauses)) if self.label_clauses is None else tuple(self.label_clauses)

    def clause_hits(self, inputs) -> np.ndarray:
        """Boolean ``(n, num_clauses)`` matrix of satisfied clauses."""
        x = np.asarray(inputs) > 0.5
        return x.reshape(len(x), self.num_clauses, self.c).all(axis=2)

    def label_rule(self) -> str:
        return "label = OR(" + ", ".join(f"AND(block {j})" for j in self.labelled) + ")"


@dataclass
class WitnessSet:
    inputs: np.ndarray
    labels: np.ndarray
    clause_index: np.ndarray  # clause witnessed by each positive, -1 for negatives
    spec: DnfSpec

    def batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


@dataclass
class SafetyMeta:
    spec: DnfSpec
    feature_on: np.ndarray  # (n, num_clauses) clause indicators
    label_rule: str
    classes: dict = field(default_factory=dict)  # feature class name -> clause index


def gen_xor(n_per_corner: int, noise_std: float, seed: int) -> Batch:
    if n_per_corner < 1:
        raise ConfigError("must be >= 1", "n_per_corner")
    if noise_std < 0:
        raise ConfigError("must be >= 0", "noise_std")
    rng = np.random.default_rng(seed)
    corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float64)
    x = np.repeat(corners, n_per_corner, axis=0)
    y = np.logical_xor(x[:, 0], x[:, 1]).astype(np.float64)
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, size=x.shape)
    return Batch(x, y)


def xor_corners() -> Batch:
    return gen_xor(1, 0.0, 0)


def classify_frequencies(freqs) -> dict:
    """Name the rarest feature 'rare', the most frequent 'common', the rest 'moderate'."""
    order = np.argsort(freqs, kind="stable")
    classes = {"rare": int(order[0]), "common": int(order[-1])}
    for i, j in enumerate(order[1:-1]):
        classes["moderate" if i == 0 else f"moderate_{i}"] = int(j)
    return classes


def gen_dnf_safety(spec: DnfSpec, n: int, seed: int) -> tuple[Batch, SafetyMeta]:
    """Clause indicators with exact marginals ``round(p * n)``; off clauses get
    literals drawn at rate ``p ** (1 / c)`` conditioned on the block not being full."""
    if not spec.feature_freqs:
        raise ConfigError("safety task needs feature_freqs", "feature_freqs")
    rng = np.random.default_rng(seed)
    c = spec.c
    x = np.zeros((n, spec.input_dim))
    on = np.zeros((n, spec.num_clauses), dtype=bool)
    for j, p in enumerate(spec.feature_freqs):
        on[rng.permutation(n)[: int(round(p * n))], j] = True
        q = p ** (1.0 / c)
        bits = rng.random((n, c)) < q
        full = bits.all(axis=1) & ~on[:, j]
        while full.any():
            bits[full] = rng.random((int(full.sum()), c)) < q
            full = bits.all(axis=1) & ~on[:, j]
        bits[on[:, j]] = True
        x[:, spec.block(j)] = bits
    y = on[:, list(spec.labelled)].any(axis=1).astype(np.float64)
    meta = SafetyMeta(spec, on, spec.label_rule(), classify_frequencies(spec.feature_freqs))
    return Batch(x, y), meta


def gen_dnf_witness(W: int, c: int = 3, negatives_per_positive: float = 1.0, seed: int = 0) -> WitnessSet:
    """One positive per clause (its block full, all other blocks zero) plus negatives.

    Every negative has exactly ``c`` on bits, like a witness, scattered so that
    no block is full. Bit counts therefore carry no label information and only
    per-clause conjunction detectors separate the classes.
    """
    if W < 1:
        raise ConfigError("must be >= 1", "W")
    if c < 1:
        raise ConfigError("must be >= 1", "c")
    spec = DnfSpec(num_clauses=W + 1, literals_per_clause=c)
    rng = np.random.default_rng(seed)
    n_clauses = W + 1
    pos = np.zeros((n_clauses, spec.input_dim))
    for j in range(n_clauses):
        pos[j, spec.block(j)] = 1.0
    n_neg = int(round(negatives_per_positive * n_clauses))
    neg = np.zeros((n_neg, spec.input_dim))
    if c == 1:
        n_neg = 0  # a single on bit always completes its clause
        neg = neg[:0]
    for i in range(n_neg):
        while True:
            row = np.zeros(spec.input_dim)
            row[rng.choice(spec.input_dim, size=c, replace=False)] = 1.0
            if not spec.clause_hits(row[None])[0].any():
                break
        neg[i] = row
    inputs = np.vstack([pos, neg])
    labels = np.concatenate([np.ones(n_clauses), np.zeros(n_neg)])
    clause_index = np.concatenate([np.arange(n_clauses), -np.ones(n_neg, dtype=np.int64)])
    return WitnessSet(inputs, labels, clause_index, spec)


def expected_coupon_draws(W: int) -> float:
    """``W * H_W``."""
    return float(W * np.sum(1.0 / np.arange(1, W + 1)))


def coupon_collector_oracle(W: int, trials: int, seed: int) -> float:
    """Monte Carlo mean number of uniform draws needed to see all ``W`` coupons.

    The wait for each new coupon is geometric with success rate
    ``(W - collected) / W``; summing those waits samples the full collection time.
    """
    if W < 1 or trials < 1:
        raise ConfigError("W and trials must be >= 1")
    rng = np.random.default_rng(seed)
    p_new = (W - np.arange(W)) / W
    return float(rng.geometric(p_new, size=(trials, W)).sum(axis=1).mean())


def write_dataset_csv(batch: Batch, path, header: str | None = None) -> Path:
    """One row per example, label in the last column."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(batch.inputs.shape[1])] + ["label"])
        for x, y in zip(batch.inputs, batch.targets):
            writer.writerow([repr(float(v)) for v in x] + [int(y[0]) if y[0] in (0, 1) else float(y[0])])
    return path
