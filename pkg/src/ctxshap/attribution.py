"""Exact Shapley attributions for tree ensembles.

The coalition value v(S) is the interventional expectation of the raw margin
with the features in S fixed to the instance's values. Each tree is walked
once: conditioned splits follow the instance, unconditioned splits blend both
children by the fraction of background rows that went left. Shapley values
then come from full enumeration of the 2^|F| coalitions.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from ctxshap.errors import CoverageError, EmptyInputError, InvalidValueError, TooManyFeaturesError, WidthError
from ctxshap.model import Dataset, Instance, TreeEnsemble, _as_values

DEFAULT_MAX_FEATURES = 16
EFFICIENCY_TOL = 1e-9
# below this width weights are exact rationals, above it log-factorials
_EXACT_WEIGHT_LIMIT = 12


@dataclass(frozen=True)
class CoalitionMask:
    bits: int
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise InvalidValueError("coalition width must be positive")
        if self.bits < 0 or self.bits >> self.width:
            raise InvalidValueError(f"mask {self.bits:#b} does not fit width {self.width}")

    @classmethod
    def of(cls, members: Iterable[int], width: int) -> "CoalitionMask":
        bits = 0
        for i in members:
            if not 0 <= i < width:
                raise InvalidValueError(f"feature index {i} outside width {width}")
            bits |= 1 << i
        return cls(bits, width)

    @classmethod
    def empty(cls, width: int) -> "CoalitionMask":
        return cls(0, width)

    @classmethod
    def full(cls, width: int) -> "CoalitionMask":
        return cls((1 << width) - 1, width)

    def __contains__(self, i: int) -> bool:
        return bool(self.bits >> i & 1)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    def members(self) -> list[int]:
        return [i for i in range(self.width) if i in self]

    def issubset(self, other: "CoalitionMask") -> bool:
        return self.bits & ~other.bits == 0


@dataclass(frozen=True)
class Attribution:
    phi: tuple[float, ...]
    base_value: float
    prediction: float
    instance: Optional[Instance] = None

    def __post_init__(self):
        phi = tuple(float(p) for p in self.phi)
        object.__setattr__(self, "phi", phi)
        if not all(math.isfinite(p) for p in phi) or not math.isfinite(self.base_value) or not math.isfinite(
            self.prediction
        ):
            raise InvalidValueError("attribution values must be finite")
        if self.instance is not None and len(self.instance) != len(phi):
            raise WidthError(f"instance width {len(self.instance)} != {len(phi)} attributions")
        gap = self.efficiency_residual
        if gap > EFFICIENCY_TOL:
            raise InvalidValueError(
                f"attributions sum to {math.fsum(phi)!r} but prediction - base_value is "
                f"{self.prediction - self.base_value!r} (residual {gap:.3g})"
            )

    @classmethod
    def from_contributions(cls, base_value: float, phi: Sequence[float], instance=None) -> "Attribution":
        """Build an attribution whose prediction is ``base_value + sum(phi)``."""
        return cls(tuple(phi), base_value, base_value + math.fsum(phi), instance)

    @property
    def efficiency_residual(self) -> float:
        return abs(math.fsum(self.phi) - (self.prediction - self.base_value))

    def to_dict(self, feature_names: Sequence[str]) -> dict:
        return {
            "features": list(feature_names),
            "base_value": self.base_value,
            "prediction": self.prediction,
            "phi": list(self.phi),
        }


@dataclass(frozen=True)
class GlobalAttribution:
    mean_abs_phi: tuple[float, ...]
    n_instances: int


# -- coalition value ---------------------------------------------------------


def _as_mask(S, width: int) -> CoalitionMask:
    if isinstance(S, CoalitionMask):
        if S.width != width:
            raise WidthError(f"coalition width {S.width} != model width {width}")
        return S
    return CoalitionMask.of(S, width)


def exp_value(model: TreeEnsemble, x, S: Union[CoalitionMask, Iterable[int]]) -> float:
    """Interventional expectation of the raw margin with features in ``S`` fixed to ``x``."""
    values = _as_values(model, x)
    mask = _as_mask(S, model.n_features)
    total = 0.0
    for t, tree in enumerate(model.trees):
        c = tree._compiled
        if not tree.nodes[c.root].cover:
            raise CoverageError(f"tree {t}: root has no coverage; call fit_coverage first")

        def g(j: int) -> float:
            if c.left[j] < 0:
                return c.value[j]
            d = c.feature[j]
            if d in mask:
                return g(c.left[j] if values[d] <= c.threshold[j] else c.right[j])
            frac = c.fraction[j]
            if frac is None:
                raise CoverageError(
                    f"tree {t} node {tree.nodes[j].id}: left fraction undefined (cover "
                    f"{tree.nodes[j].cover}) but feature {d} is not conditioned"
                )
            # zero-weight branches are never visited
            if frac == 1.0:
                return g(c.left[j])
            if frac == 0.0:
                return g(c.right[j])
            return g(c.left[j]) * frac + g(c.right[j]) * (1.0 - frac)

        total += g(c.root)
    return total + model.base_score


def coalition_values(model: TreeEnsemble, x) -> np.ndarray:
    """v(S) for every coalition at once; entry ``m`` is the coalition with bit mask ``m``.

    Same arithmetic as :func:`exp_value`, element-wise over all masks, so each
    entry is bit-identical to the scalar walk.
    """
    values = _as_values(model, x)
    p = model.n_features
    masks = np.arange(1 << p, dtype=np.int64)
    in_s = [((masks >> d) & 1).astype(bool) for d in range(p)]
    total = np.zeros(1 << p)
    for t, tree in enumerate(model.trees):
        c = tree._compiled
        if not tree.nodes[c.root].cover:
            raise CoverageError(f"tree {t}: root has no coverage; call fit_coverage first")

        @lru_cache(maxsize=None)
        def g(j: int):
            if c.left[j] < 0:
                return c.value[j]
            d = c.feature[j]
            routed = g(c.left[j] if values[d] <= c.threshold[j] else c.right[j])
            frac = c.fraction[j]
            if frac is None:
                blended = math.nan
            elif frac == 1.0:
                blended = g(c.left[j])
            elif frac == 0.0:
                blended = g(c.right[j])
            else:
                blended = np.multiply(g(c.left[j]), frac) + np.multiply(g(c.right[j]), 1.0 - frac)
            return np.where(in_s[d], routed, blended)

        total = total + g(c.root)
        if np.isnan(total).any():
            bad = int(np.flatnonzero(np.isnan(total))[0])
            raise CoverageError(
                f"tree {t}: coalition {CoalitionMask(bad, p).members()} needs a left fraction "
                "at a node no background row reached"
            )
    return total + model.base_score


# -- weights -----------------------------------------------------------------


@lru_cache(maxsize=None)
def shapley_weights(n_features: int) -> tuple[float, ...]:
    """Weight |S|!(|F|-|S|-1)!/|F|! for each coalition size |S| = 0..|F|-1."""
    n = n_features
    if n <= _EXACT_WEIGHT_LIMIT:
        return tuple(
            float(Fraction(math.factorial(s) * math.factorial(n - s - 1), math.factorial(n))) for s in range(n)
        )
    lg_n = math.lgamma(n + 1)
    return tuple(math.exp(math.lgamma(s + 1) + math.lgamma(n - s) - lg_n) for s in range(n))


def shapley_weight(n_features: int, coalition_size: int) -> float:
    return shapley_weights(n_features)[coalition_size]


@lru_cache(maxsize=8)
def _popcounts(p: int) -> np.ndarray:
    masks = np.arange(1 << p, dtype=np.int64)
    counts = np.zeros(1 << p, dtype=np.int64)
    for d in range(p):
        counts += (masks >> d) & 1
    counts.setflags(write=False)
    return counts


# -- Shapley -----------------------------------------------------------------


def _check_cap(model: TreeEnsemble, cap: int):
    p = model.n_features
    if p > cap:
        raise TooManyFeaturesError(
            f"model has {p} features but exact enumeration is capped at {cap}; "
            f"it would evaluate 2^{p} = {1 << p:,} coalitions per instance"
        )


def shapley(model: TreeEnsemble, x, cap: int = DEFAULT_MAX_FEATURES) -> Attribution:
    _check_cap(model, cap)
    instance = x if isinstance(x, Instance) else Instance(tuple(x))
    v = coalition_values(model, instance)
    p = model.n_features
    weights = np.asarray(shapley_weights(p))
    sizes = _popcounts(p)
    masks = np.arange(1 << p, dtype=np.int64)
    phi = []
    for i in range(p):
        without = masks[(masks >> i) & 1 == 0]
        terms = weights[sizes[without]] * (v[without | (1 << i)] - v[without])
        phi.append(math.fsum(terms.tolist()))
    return Attribution(tuple(phi), float(v[0]), float(v[-1]), instance)


def shapley_batch(
    model: TreeEnsemble,
    xs: Union[Dataset, Sequence],
    cap: int = DEFAULT_MAX_FEATURES,
    n_jobs: int = 1,
) -> list[Attribution]:
    """Attributions for every row of ``xs`` in input order.

    Rows are independent, so ``n_jobs > 1`` fans them out over a thread pool
    without changing any result.
    """
    _check_cap(model, cap)
    rows = xs.instances() if isinstance(xs, Dataset) else list(xs)

    def one(item):
        i, row = item
        try:
            return shapley(model, row, cap)
        except Exception as exc:
            try:
                wrapped = type(exc)(f"row {i}: {exc}")
            except TypeError:
                raise exc
            wrapped.row = i
            raise wrapped from exc

    if n_jobs <= 1:
        return [one(item) for item in enumerate(rows)]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(one, enumerate(rows)))


def aggregate_global(attrs: Sequence[Attribution]) -> GlobalAttribution:
    if not attrs:
        raise EmptyInputError("no attributions to aggregate")
    width = len(attrs[0].phi)
    for k, a in enumerate(attrs):
        if len(a.phi) != width:
            raise WidthError(f"attribution {k} has width {len(a.phi)}, expected {width}")
    n = len(attrs)
    mean_abs = tuple(math.fsum(abs(a.phi[i]) for a in attrs) / n for i in range(width))
    return GlobalAttribution(mean_abs, n)


# -- export ------------------------------------------------------------------


def export_attributions(attrs: Sequence[Attribution], feature_names: Sequence[str]) -> str:
    return json.dumps([a.to_dict(feature_names) for a in attrs], indent=2)


def attribution_from_dict(doc: dict) -> Attribution:
    return Attribution(tuple(doc["phi"]), float(doc["base_value"]), float(doc["prediction"]))
