"""Explaining predictions relative to a user-chosen reference value.

Three ways of turning ``f`` into ``g(x) = f(x) - y_ref`` for explanation:

* ``shift_output``: adjust the top bias (functionally exact, explanation
  barely changes);
* ``restructure``: flood the last hidden layer and rewrite every shifted
  ReLU as three plain ReLUs (functionally exact, representation changes);
* ``retrain``: fit a surrogate to ``g`` on a band of output values.

``baseline_shift`` and ``baseline_scale`` post-process an ordinary
explanation instead.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .attribution import Explanation
from .errors import ConfigError, NoSolutionError, PreconditionError, StructureError, UndefinedMetricError
from .network import IDENTITY, RELU, DenseLayer, DenseNetwork, TrainConfig, forward, init_network, sgd_fit

# activation slope for positive-weight units in asymmetric flooding
ASYMMETRIC_POSITIVE_SLOPE = -0.25
FLOOD_MODES = ("symmetric", "asymmetric")


@dataclass(frozen=True)
class ReferenceSpec:
    value: float
    origin: str = "absolute"  # or "grid_fraction"
    q: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ConfigError("reference value must be finite")
        if self.origin not in ("absolute", "grid_fraction"):
            raise ConfigError(f"unknown reference origin {self.origin!r}")
        if self.origin == "grid_fraction" and (self.q is None or not 0.0 <= self.q <= 1.0):
            raise ConfigError("grid_fraction references need q in [0, 1]")


def shift_output(net: DenseNetwork, reference_value: float) -> DenseNetwork:
    out = net.copy()
    out.layers[-1].biases = out.layers[-1].biases - reference_value
    return out


# -- flooding ----------------------------------------------------------------


@dataclass
class FloodSolution:
    t: float
    a_tilde: np.ndarray
    residual: float
    target: float
    mode: str = "symmetric"
    multiple_roots: bool = False


def flood_slopes(w: np.ndarray, mode: str) -> np.ndarray:
    """Per-unit rate at which activations are lowered as ``t`` grows."""
    if mode == "symmetric":
        return np.ones_like(w)
    if mode == "asymmetric":
        return np.where(w > 0, ASYMMETRIC_POSITIVE_SLOPE, 1.0)
    raise ConfigError(f"flood mode must be one of {FLOOD_MODES}")


def flooded(a: np.ndarray, w: np.ndarray, t: float, mode: str = "symmetric") -> np.ndarray:
    return np.maximum(a - flood_slopes(w, mode) * t, 0.0)


def _segment_roots(a, w, s, target):
    """All roots of h(t) = sum_j w_j (a_j - s_j t)+ - target.

    h is piecewise linear with kinks where a_j - s_j t = 0.  Each linear
    piece is solved exactly; a piece on which h vanishes identically
    contributes the point of that piece closest to t = 0.
    """
    kinks = np.unique(a[s != 0] / s[s != 0])
    edges = np.concatenate([[-np.inf], kinks, [np.inf]])
    roots = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if math.isinf(lo) and math.isinf(hi):
            probe = 0.0
        elif math.isinf(lo):
            probe = hi - 1.0
        elif math.isinf(hi):
            probe = lo + 1.0
        else:
            probe = 0.5 * (lo + hi)
        active = (a - s * probe) > 0
        slope = -float(np.sum(w[active] * s[active]))
        intercept = float(np.sum(w[active] * a[active])) - target
        if slope == 0.0:
            if intercept == 0.0:
                roots.append(min(max(0.0, lo), hi))
            continue
        t = -intercept / slope
        span = max(1.0, abs(t)) * 1e-12
        if lo - span <= t <= hi + span:
            roots.append(float(min(max(t, lo), hi)))
    return roots


def _attainable_range(a, w, s) -> tuple[float, float]:
    kinks = np.unique(a[s != 0] / s[s != 0])
    pts = np.concatenate([kinks, [0.0]])
    vals = [float(np.sum(w * np.maximum(a - s * t, 0.0))) for t in pts]
    lo, hi = min(vals), max(vals)
    t_lo, t_hi = pts.min() - 1.0, pts.max() + 1.0
    for t_edge, ref in ((t_lo, pts.min()), (t_hi, pts.max())):
        v_edge = float(np.sum(w * np.maximum(a - s * t_edge, 0.0)))
        v_ref = float(np.sum(w * np.maximum(a - s * ref, 0.0)))
        if v_edge > v_ref + 1e-12 * max(1.0, abs(v_ref)):
            hi = math.inf
        elif v_edge < v_ref - 1e-12 * max(1.0, abs(v_ref)):
            lo = -math.inf
    return lo, hi


def flood_reference(
    a,
    w,
    b: float,
    reference_value: float,
    mode: str = "symmetric",
    keep_bias: bool = False,
) -> FloodSolution:
    """Find the flooded reference activation for the top linear layer.

    Solves ``sum_j w_j (a_j - s_j t)+ = target`` for ``t`` with ``s_j = 1``
    (symmetric) or ``s_j = 1`` for ``w_j <= 0`` and ``-1/4`` for ``w_j > 0``
    (asymmetric).  By default the top bias is absorbed into the reference
    activation, ``target = reference_value - b``, so the restructured network
    needs no output bias.  With ``keep_bias=True`` the bias is left on the
    output unit and ``target = reference_value``.

    Among several roots the one with the smallest ``|t|`` is returned and
    ``multiple_roots`` is set.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if a.shape != w.shape:
        raise PreconditionError("activation and weight vectors differ in length")
    if np.any(a < 0):
        raise PreconditionError("hidden activations must be nonnegative (post-ReLU)")
    target = float(reference_value) if keep_bias else float(reference_value) - float(b)
    s = flood_slopes(w, mode)
    roots = _segment_roots(a, w, s, target)
    if not roots:
        lo, hi = _attainable_range(a, w, s)
        raise NoSolutionError(
            f"flooding line never reaches level {target!r}; attainable range is [{lo!r}, {hi!r}]",
            (lo, hi),
        )
    distinct = sorted(set(roots), key=abs)
    t = distinct[0]
    multiple = any(abs(r - t) > 1e-9 * max(1.0, abs(t)) for r in distinct[1:])
    a_tilde = np.maximum(a - s * t, 0.0)
    residual = abs(float(a_tilde @ w) - target)
    return FloodSolution(t, a_tilde, residual, target, mode, multiple)


# -- ReLU triplication -------------------------------------------------------


def triplicate_relu(
    hidden_layer: DenseLayer, outgoing_weights, a_tilde
) -> tuple[DenseLayer, np.ndarray]:
    """Rewrite shifted ReLUs ``relu(z) - a`` as three unshifted ReLUs.

    ``relu(z) - a = relu(z - a) + relu(-z) - relu(-z + a)`` for ``a >= 0``.
    The returned layer stacks the three copies block-wise (all first copies,
    then all second, then all third); the returned outgoing weights have
    shape ``(out, 3 * width)``.
    """
    a_tilde = np.asarray(a_tilde, dtype=float).reshape(-1)
    if np.any(a_tilde < 0):
        raise PreconditionError("reference activations must be nonnegative for triplication")
    W, b = hidden_layer.weights, hidden_layer.biases
    if a_tilde.shape[0] != W.shape[0]:
        raise PreconditionError("one reference activation per hidden unit is required")
    V = np.atleast_2d(np.asarray(outgoing_weights, dtype=float))
    new_layer = DenseLayer(
        np.vstack([W, -W, -W]),
        np.concatenate([b - a_tilde, -b, -b + a_tilde]),
        RELU,
    )
    return new_layer, np.hstack([V, V, -V])


def _input_hash(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype=float).tobytes()).hexdigest()[:16]


def restructure(
    net: DenseNetwork,
    x,
    reference_value: float,
    mode: str = "symmetric",
    keep_bias: bool = False,
) -> DenseNetwork:
    """Network computing ``f(.) - reference_value`` everywhere, flooded at ``x``."""
    if len(net.layers) < 2 or net.layers[-2].activation != RELU or net.layers[-1].activation != IDENTITY:
        raise StructureError(
            "restructuring needs a ReLU layer followed by a linear output layer; use retraining instead"
        )
    x = np.asarray(x, dtype=float)
    trace = forward(net, x)
    top = net.layers[-1]
    w, b = top.weights[0], float(top.biases[0])
    sol = flood_reference(trace.hidden, w, b, reference_value, mode, keep_bias)
    new_hidden, new_out = triplicate_relu(net.layers[-2], top.weights, sol.a_tilde)
    # whatever part of the shift the flooded activations do not carry stays on the output bias
    new_bias = b + float(sol.a_tilde @ w) - float(reference_value)
    layers = [layer for layer in net.copy().layers[:-2]]
    layers += [new_hidden, DenseLayer(new_out, np.array([new_bias]), IDENTITY)]
    meta = dict(net.metadata)
    meta["restructure"] = {
        "reference_value": float(reference_value),
        "anchor_input_hash": _input_hash(x),
        "flood_t": sol.t,
        "mode": mode,
        "keep_bias": keep_bias,
        "multiple_roots": sol.multiple_roots,
        "flood_residual": sol.residual,
    }
    return DenseNetwork(layers, output_unit=net.output_unit, metadata=meta)


# -- retraining --------------------------------------------------------------


@dataclass
class RetrainConfig:
    tau_minus: float = -0.3
    tau_plus: float = math.inf
    freeze: str = "top_biases"
    init_from_original: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-2, epochs=100))
    # stop early once the band loss falls to this level (None: run all epochs)
    stop_mse: float | None = None

    def validate(self) -> None:
        if math.isnan(self.tau_minus) or math.isnan(self.tau_plus) or self.tau_minus > self.tau_plus:
            raise ConfigError("band needs tau_minus <= tau_plus")


def band_mask(values: np.ndarray, tau_minus: float, tau_plus: float) -> np.ndarray:
    return (values >= tau_minus) & (values <= tau_plus)


def retrain(net: DenseNetwork, data, reference_value: float, cfg: RetrainConfig | None = None) -> DenseNetwork:
    """Fit a surrogate to ``f(x) - reference_value`` on the band of ``g`` values.

    The teacher is the network itself, not the dataset targets.  The
    surrogate's metadata carries the band size and band MSE.
    """
    cfg = cfg or RetrainConfig()
    cfg.validate()
    X = np.asarray(data.features if hasattr(data, "features") else data, dtype=float)
    g = net.predict(X) - reference_value
    mask = band_mask(g, cfg.tau_minus, cfg.tau_plus)
    if not mask.any():
        raise ConfigError(
            f"band [{cfg.tau_minus}, {cfg.tau_plus}] selects no training rows for reference {reference_value!r}"
        )
    if cfg.init_from_original:
        start = net
    else:
        start = init_network(net.input_dim, net.hidden_dims, cfg.train.seed, net.output_unit)
    tcfg = replace(cfg.train, freeze=cfg.freeze, batch_size=min(cfg.train.batch_size, int(mask.sum())))
    surrogate, history = sgd_fit(start, X, g, tcfg, sample_weight=mask.astype(float), stop_mse=cfg.stop_mse)
    band_mse = float(np.mean((surrogate.predict(X[mask]) - g[mask]) ** 2))
    _warn_on_bias_only_drift(start, surrogate)
    surrogate.output_unit = net.output_unit
    surrogate.metadata = dict(net.metadata)
    surrogate.metadata["retrain"] = {
        "reference_value": float(reference_value),
        "tau_minus": cfg.tau_minus,
        "tau_plus": cfg.tau_plus,
        "freeze": cfg.freeze,
        "band_size": int(mask.sum()),
        "band_mse": band_mse,
        "epochs_run": len(history),
    }
    return surrogate


def _warn_on_bias_only_drift(before: DenseNetwork, after: DenseNetwork) -> None:
    changes = []
    for lb, la in zip(before.layers, after.layers):
        changes.append(float(np.sum((la.weights - lb.weights) ** 2)))
        changes.append(float(np.sum((la.biases - lb.biases) ** 2)))
    total = sum(changes)
    if total > 0 and changes[-1] / total > 0.99:
        warnings.warn(
            "retraining only moved the top-layer bias; freeze it (freeze='top_biases') "
            "so the explanation can change",
            RuntimeWarning,
            stacklevel=3,
        )


# -- post-hoc baselines ------------------------------------------------------


def baseline_shift(expl: Explanation, reference_value: float, d: int | None = None) -> Explanation:
    """Subtract ``reference_value / d`` from every attribution."""
    d = len(expl.attributions) if d is None else d
    if d != len(expl.attributions):
        raise PreconditionError("d must equal the number of attributions")
    return replace(
        expl,
        attributions=expl.attributions - reference_value / d,
        reference_value=expl.reference_value + reference_value,
        method=f"{expl.method}+shift",
    )


def baseline_scale(expl: Explanation, prediction: float, reference_value: float) -> Explanation:
    """Multiply every attribution by ``(y - y_ref) / y``."""
    if abs(prediction) < 1e-12:
        raise UndefinedMetricError("scaling baseline is undefined for a zero prediction")
    factor = (prediction - reference_value) / prediction
    return replace(
        expl,
        attributions=expl.attributions * factor,
        reference_value=expl.reference_value + reference_value,
        method=f"{expl.method}+scale",
    )
