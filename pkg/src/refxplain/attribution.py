"""Feature attribution for dense ReLU regression networks.

All explainers return an :class:`Explanation` whose ``conservation_gap``
records how far the attributions are from summing to
``prediction - reference_value``.  Attributions carry the network's output
unit.
"""
from __future__ import annotations

import itertools
import json
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from typing import Any, Union

import numpy as np

from .errors import ConfigError, EnumerationLimitError, InputShapeError
from .network import RELU, DenseNetwork, forward

SHAPLEY_MAX_FEATURES = 20
EPSILON_DEFAULT = 1e-6

BatchFunction = Callable[[np.ndarray], np.ndarray]


@dataclass
class Explanation:
    attributions: np.ndarray
    prediction: float
    reference_value: float = 0.0
    unit: str = ""
    method: str = ""
    params: dict[str, Any] = field(default_factory=dict)
    baseline: np.ndarray | None = None
    conservation_gap: float = float("nan")

    def __post_init__(self):
        self.attributions = np.asarray(self.attributions, dtype=float).reshape(-1)
        self.prediction = float(self.prediction)
        self.reference_value = float(self.reference_value)
        if self.baseline is not None:
            self.baseline = np.asarray(self.baseline, dtype=float).reshape(-1)
        self.conservation_gap = self.prediction - self.reference_value - float(self.attributions.sum())

    @property
    def total(self) -> float:
        return float(self.attributions.sum())

    def with_attributions(self, attributions, **changes) -> Explanation:
        """Copy with new attributions; the gap is recomputed."""
        return replace(self, attributions=np.asarray(attributions, dtype=float), **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "params": self.params,
            "prediction": self.prediction,
            "reference_value": self.reference_value,
            "unit": self.unit,
            "baseline": None if self.baseline is None else self.baseline.tolist(),
            "attributions": self.attributions.tolist(),
            "conservation_gap": self.conservation_gap,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> Explanation:
        expl = cls(
            attributions=doc["attributions"],
            prediction=doc["prediction"],
            reference_value=doc["reference_value"],
            unit=doc.get("unit", ""),
            method=doc.get("method", ""),
            params=doc.get("params", {}),
            baseline=doc.get("baseline"),
        )
        return expl


# -- LRP ---------------------------------------------------------------------


@dataclass(frozen=True)
class Gamma:
    gamma: float = 0.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")


@dataclass(frozen=True)
class Epsilon:
    epsilon: float = EPSILON_DEFAULT

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")


@dataclass(frozen=True)
class AlphaBeta:
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if not math.isclose(self.alpha - self.beta, 1.0):
            raise ConfigError("alpha - beta must equal 1")


Rule = Union[Gamma, Epsilon, AlphaBeta]


@dataclass
class LrpConfig:
    """One rule per weighted layer, listed from the input upwards."""

    rules: Sequence[Rule]
    ignore_biases: bool = False

    @classmethod
    def uniform(cls, rule: Rule, n_layers: int, ignore_biases: bool = False) -> LrpConfig:
        return cls([rule] * n_layers, ignore_biases)

    @classmethod
    def gamma(cls, gammas: Sequence[float], ignore_biases: bool = False) -> LrpConfig:
        return cls([Gamma(g) for g in gammas], ignore_biases)

    def describe(self) -> dict[str, Any]:
        return {
            "rules": [{"rule": type(r).__name__.lower(), **r.__dict__} for r in self.rules],
            "ignore_biases": self.ignore_biases,
        }


def _safe_ratio(R: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, float]:
    """R/s with exact-zero denominators dropped; returns the dropped relevance."""
    zero = s == 0.0
    ratio = np.divide(R, s, out=np.zeros_like(R), where=~zero)
    return ratio, float(R[zero].sum())


def _lrp_layer(a: np.ndarray, W: np.ndarray, b: np.ndarray, R: np.ndarray, rule: Rule) -> tuple[np.ndarray, float]:
    """Redistribute upper-layer relevance ``R`` (out,) onto inputs ``a`` (in,)."""
    if isinstance(rule, Gamma):
        # positive contributions a_j w_jk get the extra weight; for a >= 0 this
        # is exactly a_j (w_jk + gamma w_jk+)
        Z = W * a
        Z = Z + rule.gamma * np.maximum(Z, 0.0)
        bm = b + rule.gamma * np.maximum(b, 0.0)
        s = Z.sum(axis=1) + bm
        ratio, lost = _safe_ratio(R, s)
        return Z.T @ ratio, lost
    if isinstance(rule, Epsilon):
        s = W @ a + b
        s = s + rule.epsilon * np.where(s >= 0.0, 1.0, -1.0)
        ratio, lost = _safe_ratio(R, s)
        return a * (W.T @ ratio), lost
    if isinstance(rule, AlphaBeta):
        Z = W * a  # (out, in) contributions
        Zp, Zn = np.maximum(Z, 0.0), np.minimum(Z, 0.0)
        sp = Zp.sum(axis=1) + np.maximum(b, 0.0)
        sn = Zn.sum(axis=1) + np.minimum(b, 0.0)
        rp, lost_p = _safe_ratio(R, sp)
        rn, lost_n = _safe_ratio(R, sn)
        return rule.alpha * (Zp.T @ rp) - rule.beta * (Zn.T @ rn), rule.alpha * lost_p - rule.beta * lost_n
    raise ConfigError(f"unknown LRP rule {rule!r}")


def lrp(net: DenseNetwork, x, cfg: LrpConfig, reference_value: float = 0.0) -> Explanation:
    """Layer-wise relevance propagation starting from the network output.

    ``reference_value`` only labels the explanation: pass the reference a
    shifted or restructured network was built for, so that the stored
    prediction is the unshifted ``f(x)``.
    """
    if len(cfg.rules) != len(net.layers):
        raise ConfigError(f"LrpConfig has {len(cfg.rules)} rules for {len(net.layers)} layers")
    trace = forward(net, x)
    R = np.array([trace.y])
    dropped = 0.0
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        b = np.zeros_like(layer.biases) if cfg.ignore_biases else layer.biases
        R, lost = _lrp_layer(trace.activations[k], layer.weights, b, R, cfg.rules[k])
        dropped += lost
    return Explanation(
        attributions=R,
        prediction=trace.y + reference_value,
        reference_value=reference_value,
        unit=net.output_unit,
        method="lrp",
        params={**cfg.describe(), "dropped_relevance": dropped},
    )


def gradient_x_input(net: DenseNetwork, x) -> Explanation:
    x = np.asarray(x, dtype=float)
    grad = net.gradient(x)
    return Explanation(grad * x, float(net.predict(x)), 0.0, net.output_unit, "gradient_x_input")


# -- Integrated gradients ----------------------------------------------------


def integrated_gradients(
    model: DenseNetwork | BatchFunction,
    x,
    baseline=None,
    steps: int = 128,
    gradient: BatchFunction | None = None,
) -> Explanation:
    """Midpoint-rule integrated gradients along the straight path baseline -> x.

    ``model`` is a network or a batched function; for a plain function a
    batched ``gradient`` must be given as well.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    x0 = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float).reshape(-1)
    if x0.shape != x.shape:
        raise InputShapeError("baseline and input dimensions differ")
    if isinstance(model, DenseNetwork):
        f, grad_fn, unit = model.predict, model.gradient, model.output_unit
    else:
        grad_fn = gradient or getattr(model, "gradient", None)
        if grad_fn is None:
            raise ConfigError("a gradient function is required for non-network models")
        f, unit = model, getattr(model, "output_unit", "")
    alphas = (np.arange(steps) + 0.5) / steps
    path = x0 + alphas[:, None] * (x - x0)
    grads = np.asarray(grad_fn(path)).reshape(steps, -1)
    R = (x - x0) * grads.mean(axis=0)
    fx, fx0 = np.asarray(f(np.stack([x, x0]))).reshape(-1)
    return Explanation(R, fx, fx0, unit, "integrated_gradients", {"steps": steps}, x0)


# -- Shapley -----------------------------------------------------------------


def _as_batch_function(f) -> tuple[BatchFunction, str]:
    if isinstance(f, DenseNetwork):
        return f.predict, f.output_unit
    return f, getattr(f, "output_unit", "")


def _shapley_weights(d: int) -> np.ndarray:
    """Weight of a coalition of size s not containing the player: s!(d-s-1)!/d!."""
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])


def shapley_exact(f, x, baseline=None) -> Explanation:
    """Exact Shapley values with absent features set to the baseline.

    Evaluates ``f`` once on all 2^d hybrid points.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.shape[0]
    if d > SHAPLEY_MAX_FEATURES:
        raise EnumerationLimitError(
            f"exact Shapley values need 2^{d} evaluations; d > {SHAPLEY_MAX_FEATURES} is refused, "
            "use shapley_sampled instead"
        )
    x0 = np.zeros(d) if baseline is None else np.asarray(baseline, dtype=float).reshape(-1)
    if x0.shape != x.shape:
        raise InputShapeError("baseline and input dimensions differ")
    fn, unit = _as_batch_function(f)
    masks = np.arange(2**d)
    present = ((masks[:, None] >> np.arange(d)) & 1).astype(bool)
    values = np.asarray(fn(np.where(present, x, x0)), dtype=float).reshape(-1)
    sizes = present.sum(axis=1)
    weights = _shapley_weights(d)
    R = np.empty(d)
    for i in range(d):
        without = masks[~present[:, i]]
        R[i] = np.sum(weights[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return Explanation(R, values[-1], values[0], unit, "shapley_exact", {}, x0)


def _permutation_marginals(fn: BatchFunction, x, x0, perms: np.ndarray) -> np.ndarray:
    """Marginal contribution of every feature for each permutation: (n_perm, d)."""
    n_perm, d = perms.shape
    # points[p, k] has the first k features of perm p switched to x
    present = np.zeros((n_perm, d + 1, d), dtype=bool)
    for k in range(1, d + 1):
        present[np.arange(n_perm), k:, perms[:, k - 1]] = True
    values = np.asarray(fn(np.where(present, x, x0).reshape(-1, d)), dtype=float).reshape(n_perm, d + 1)
    steps = np.diff(values, axis=1)
    marg = np.empty((n_perm, d))
    marg[np.arange(n_perm)[:, None], perms] = steps
    return marg


def shapley_sampled(
    f,
    x,
    baseline=None,
    n_permutations: int = 1000,
    seed: int = 0,
    block_size: int = 64,
) -> Explanation:
    """Permutation-sampling Shapley estimator with per-feature standard errors.

    Permutations are drawn in blocks, each from its own child seed, so the
    estimate does not depend on how blocks are scheduled.  When
    ``n_permutations == d!`` (d <= 8) every permutation is enumerated once
    and the result is exact.
    """
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.shape[0]
    x0 = np.zeros(d) if baseline is None else np.asarray(baseline, dtype=float).reshape(-1)
    fn, unit = _as_batch_function(f)
    if d <= 8 and n_permutations == math.factorial(d):
        marg = _permutation_marginals(fn, x, x0, np.array(list(itertools.permutations(range(d)))))
        exhaustive = True
    else:
        n_blocks = -(-n_permutations // block_size)
        children = np.random.SeedSequence(seed).spawn(n_blocks)
        parts = []
        for b, child in enumerate(children):
            m = min(block_size, n_permutations - b * block_size)
            rng = np.random.default_rng(child)
            perms = np.argsort(rng.random((m, d)), axis=1)
            parts.append(_permutation_marginals(fn, x, x0, perms))
        marg = np.concatenate(parts)
        exhaustive = False
    R = marg.mean(axis=0)
    stderr = marg.std(axis=0, ddof=1) / math.sqrt(len(marg)) if len(marg) > 1 else np.full(d, np.inf)
    fx, fx0 = np.asarray(fn(np.stack([x, x0])), dtype=float).reshape(-1)
    return Explanation(
        R,
        fx,
        fx0,
        unit,
        "shapley_sampled",
        {"n_permutations": n_permutations, "seed": seed, "exhaustive": exhaustive, "stderr": stderr.tolist()},
        x0,
    )


# -- clipping wrappers -------------------------------------------------------


class _Clipped:
    def __init__(self, f, reference_value: float, positive: bool):
        self._fn, self.output_unit = _as_batch_function(f)
        self._net = f if isinstance(f, DenseNetwork) else None
        self.reference_value = float(reference_value)
        self.positive = positive

    def __call__(self, X) -> np.ndarray:
        g = np.asarray(self._fn(X), dtype=float) - self.reference_value
        return np.maximum(g, 0.0) if self.positive else np.minimum(g, 0.0)

    def gradient(self, X) -> np.ndarray:
        """Gradient of the clipped network; zero where the clip is active."""
        if self._net is None:
            raise ConfigError("gradient is only available for clipped networks")
        X = np.asarray(X, dtype=float)
        g = np.asarray(self._net.predict(X)) - self.reference_value
        active = g > 0 if self.positive else g < 0
        return self._net.gradient(X) * np.asarray(active, dtype=float)[..., None]

    def __repr__(self):
        sign = "+" if self.positive else "-"
        return f"clip{sign}(f - {self.reference_value!r})"


def clip_positive(f, reference_value: float) -> _Clipped:
    """``x -> max(0, f(x) - reference_value)``."""
    return _Clipped(f, reference_value, True)


def clip_negative(f, reference_value: float) -> _Clipped:
    """``x -> min(0, f(x) - reference_value)``."""
    return _Clipped(f, reference_value, False)


def relabel(expl: Explanation, prediction: float, reference_value: float, **changes) -> Explanation:
    """Same attributions reported against a different prediction/reference pair."""
    return replace(expl, prediction=prediction, reference_value=reference_value, **changes)
