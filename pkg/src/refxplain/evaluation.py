"""Benchmark: reference-value explanations scored against a Shapley oracle.

Per repeat and dataset a 256-unit ReLU network is trained; for each grid
fraction q the reference value is interpolated between f(0) and the largest
prediction on the held-out split.  Instances with 0 <= y_ref <= f(x) are
explained by exact Shapley values of max(0, f - y_ref) (the oracle) and by
four candidate methods, and the candidates are scored by normalized MSE.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import zlib
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .attribution import Explanation, LrpConfig, clip_negative, clip_positive, lrp, shapley_exact
from .datasets import get_dataset, prepare_split
from .errors import ConfigError, UndefinedMetricError
from .network import DenseNetwork, TrainConfig, init_network, r_squared, train
from .refvalue import RetrainConfig, baseline_scale, baseline_shift, restructure, retrain

log = logging.getLogger(__name__)

METHODS = ("shift", "scaling", "retraining", "restructuring")
DEFAULT_DATASETS = ("max", "linear", "friedman", "diabetes", "boston")
RANDOM_SCHEMES = ("simplex", "gaussian")


@dataclass
class ReferenceGrid:
    q_values: list[float]
    f_max: float
    f_zero: float

    def reference(self, q: float) -> float:
        return q * self.f_max + (1.0 - q) * self.f_zero

    @property
    def values(self) -> list[float]:
        return [self.reference(q) for q in self.q_values]


def reference_grid(net: DenseNetwork, X, qs=(0.25, 0.5, 0.75)) -> ReferenceGrid:
    """Grid between f(0) and the largest prediction on ``X``."""
    X = np.asarray(getattr(X, "features", X), dtype=float)
    if X.shape[0] == 0:
        raise ConfigError("reference grid needs a nonempty evaluation set")
    f_max = float(net.predict(X).max())
    f_zero = float(net.predict(np.zeros(net.input_dim)))
    return ReferenceGrid(list(qs), f_max, f_zero)


def filter_instances(net: DenseNetwork, X, reference_value: float, mode: str = "positive") -> np.ndarray:
    """Indices (0-based) where the clipping window holds.

    positive: 0 <= y_ref <= f(x); negative: f(x) <= y_ref <= 0.
    """
    X = np.asarray(getattr(X, "features", X), dtype=float)
    pred = net.predict(X)
    if mode == "positive":
        keep = (0.0 <= reference_value) & (reference_value <= pred)
    elif mode == "negative":
        keep = (pred <= reference_value) & (reference_value <= 0.0)
    else:
        raise ConfigError("mode must be 'positive' or 'negative'")
    return np.flatnonzero(keep)


def reference_explanation(net: DenseNetwork, x, reference_value: float, baseline=None, mode: str = "positive") -> Explanation:
    """Exact Shapley values of the clipped shifted function (baseline 0)."""
    clip = clip_positive if mode == "positive" else clip_negative
    expl = shapley_exact(clip(net, reference_value), x, baseline)
    expl.method = "shapley_clipped"
    expl.params = {"reference_value": float(reference_value), "clip": mode}
    return expl


# -- normalized MSE ----------------------------------------------------------


def random_attributions(
    d: int, total: float, k: int, rng: np.random.Generator, scheme: str = "simplex"
) -> np.ndarray:
    """``k`` random attribution vectors of length ``d`` summing to ``total``.

    simplex: shares drawn uniformly from the probability simplex, scaled by
    ``total``.  gaussian: i.i.d. standard normals shifted to the right sum.
    """
    if scheme == "simplex":
        shares = rng.exponential(size=(k, d))
        return total * shares / shares.sum(axis=1, keepdims=True)
    if scheme == "gaussian":
        r = rng.standard_normal((k, d))
        return r + ((total - r.sum(axis=1)) / d)[:, None]
    raise ConfigError(f"random scheme must be one of {RANDOM_SCHEMES}")


def _attr(e) -> np.ndarray:
    return np.asarray(getattr(e, "attributions", e), dtype=float)


def mse_terms(R, R_ref, y: float, reference_value: float, k_random: int = 100, seed=0, scheme: str = "simplex"):
    """(MSE of R against R_ref, mean MSE of k random attributions against R_ref)."""
    R, R_ref = _attr(R), _attr(R_ref)
    if R.shape != R_ref.shape:
        raise ConfigError("attribution vectors differ in length")
    if k_random < 1:
        raise ConfigError("k_random must be >= 1")
    rng = np.random.default_rng(seed)
    rand = random_attributions(R.size, y - reference_value, k_random, rng, scheme)
    num = float(np.mean((R - R_ref) ** 2))
    den = float(np.mean((rand - R_ref) ** 2))
    return num, den


def normalized_mse(R, R_ref, y: float, reference_value: float, k_random: int = 100, seed=0, scheme: str = "simplex") -> float:
    """MSE(R, R_ref) divided by the mean MSE of completeness-respecting random attributions."""
    num, den = mse_terms(R, R_ref, y, reference_value, k_random, seed, scheme)
    if den == 0.0:
        raise UndefinedMetricError("random attributions match the reference exactly; normalized MSE undefined")
    return num / den


# -- benchmark ---------------------------------------------------------------


@dataclass
class DatasetSettings:
    n: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain_epochs: int = 300


DEFAULT_SETTINGS = {
    "max": DatasetSettings(n=40000, train=TrainConfig(learning_rate=0.1, epochs=300), retrain_epochs=10),
    "linear": DatasetSettings(n=1000, train=TrainConfig(learning_rate=0.01, epochs=500)),
    "friedman": DatasetSettings(n=1000, train=TrainConfig(learning_rate=0.01, epochs=500)),
    "diabetes": DatasetSettings(train=TrainConfig(learning_rate=0.01, epochs=500)),
    "boston": DatasetSettings(train=TrainConfig(learning_rate=0.01, epochs=500)),
}


@dataclass
class BenchmarkConfig:
    datasets: list[str] = field(default_factory=lambda: list(DEFAULT_DATASETS))
    qs: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    repeats: int = 10
    master_seed: int = 0
    hidden: int = 256
    max_instances: int = 100
    k_random: int = 100
    random_scheme: str = "simplex"
    aggregate: str = "ratio_of_means"  # or "mean_of_ratios"
    gammas: list[float] = field(default_factory=lambda: [2.5, 0.0])
    ignore_biases: bool = False
    tau_minus: float = -0.3
    tau_plus: float = math.inf
    retrain_freeze: str = "top_biases"
    retrain_lr: float | None = None
    flood_mode: str = "symmetric"
    flood_keep_bias: bool = False
    settings: dict[str, DatasetSettings] = field(default_factory=lambda: dict(DEFAULT_SETTINGS))
    threads: int = 1
    dump_explanations: bool = False
    # test hook: replaces every candidate explanation by the value it returns
    explanation_override: Callable[..., Explanation] | None = None

    def validate(self) -> None:
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not all(0.0 <= q <= 1.0 for q in self.qs):
            raise ConfigError("every q must lie in [0, 1]")
        if self.random_scheme not in RANDOM_SCHEMES:
            raise ConfigError(f"random_scheme must be one of {RANDOM_SCHEMES}")
        if self.aggregate not in ("ratio_of_means", "mean_of_ratios"):
            raise ConfigError("aggregate must be 'ratio_of_means' or 'mean_of_ratios'")

    def settings_for(self, dataset: str) -> DatasetSettings:
        return self.settings.get(dataset, DatasetSettings())

    def provenance(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            if f.name in ("explanation_override", "settings"):
                continue
            v = getattr(self, f.name)
            out[f.name] = "inf" if isinstance(v, float) and math.isinf(v) else v
        out["settings"] = {
            k: {"n": s.n, "retrain_epochs": s.retrain_epochs, "train": asdict(s.train)}
            for k, s in self.settings.items()
            if k in self.datasets
        }
        out["baseline"] = "zero vector in standardized input space"
        out["evaluation_set"] = f"held-out 20% split, first {self.max_instances} admissible instances"
        return out


def task_seed(*parts) -> np.random.SeedSequence:
    """Seed sequence from (master seed, dataset name, q, repeat, instance, ...)."""
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode()))
        elif isinstance(p, float):
            entropy.append(int(round(p * 1_000_000)))
        else:
            entropy.append(int(p))
    return np.random.SeedSequence(entropy)


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class BenchmarkReport:
    records: list[dict[str, Any]]
    models: list[dict[str, Any]]
    provenance: dict[str, Any]
    explanations: list[dict[str, Any]] = field(default_factory=list)

    def aggregates(self) -> list[dict[str, Any]]:
        groups: dict[tuple, list[dict]] = {}
        for rec in self.records:
            groups.setdefault((rec["dataset"], rec["q"], rec["method"]), []).append(rec)
        rows = []
        ds_order = {d: i for i, d in enumerate(self.provenance.get("datasets", []))}
        m_order = {m: i for i, m in enumerate(METHODS)}
        for (ds, q, method), recs in sorted(
            groups.items(), key=lambda kv: (ds_order.get(kv[0][0], 99), kv[0][1], m_order[kv[0][2]])
        ):
            ok = [r["normalized_mse"] for r in recs if r["error"] is None]
            rows.append(
                {
                    "dataset": ds,
                    "q": q,
                    "method": method,
                    "mean_nmse": float(np.mean(ok)) if ok else float("nan"),
                    "std_nmse": float(np.std(ok)) if ok else float("nan"),
                    "n_repeats": len(ok),
                    "n_failures": len(recs) - len(ok),
                }
            )
        return rows

    def mean_by(self, key: str) -> list[dict[str, Any]]:
        """Average of the per-cell means grouped by ``key`` (q or dataset) and method."""
        cells: dict[tuple, list[float]] = {}
        for row in self.aggregates():
            if row["n_repeats"]:
                cells.setdefault((row[key], row["method"]), []).append(row["mean_nmse"])
        return [
            {key: k, "method": m, "mean_nmse": float(np.mean(v)), "n_cells": len(v)}
            for (k, m), v in cells.items()
        ]

    @property
    def success_fraction(self) -> float:
        if not self.records:
            return 0.0
        return sum(r["error"] is None for r in self.records) / len(self.records)

    def table_csv(self) -> str:
        buf = io.StringIO()
        cols = ["dataset", "q", "method", "mean_nmse", "std_nmse", "n_repeats", "n_failures"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.aggregates():
            w.writerow([_fmt(row[c]) for c in cols])
        return buf.getvalue()

    def figure_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "key", "method", "mean_nmse", "n_cells"])
        for key in ("q", "dataset"):
            for row in self.mean_by(key):
                w.writerow([key, _fmt(row[key]), row["method"], _fmt(row["mean_nmse"]), row["n_cells"]])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "provenance": self.provenance,
            "models": self.models,
            "aggregates": self.aggregates(),
            "records": self.records,
        }
        if self.explanations:
            doc["explanations"] = self.explanations
        return json.dumps(_jsonable(doc), indent=1, allow_nan=True) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "table": out / "table.csv",
            "figure": out / "figure_means.csv",
            "json": out / "report.json",
        }
        paths["table"].write_text(self.table_csv(), encoding="utf-8")
        paths["figure"].write_text(self.figure_csv(), encoding="utf-8")
        paths["json"].write_text(self.to_json(), encoding="utf-8")
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _explain_candidates(cfg, method, net, x, y, ref, lrp_cfg, plain, surrogate, cache):
    if method == "shift":
        return baseline_shift(plain, ref)
    if method == "scaling":
        return baseline_scale(plain, y, ref)
    if method == "restructuring":
        key = (x.tobytes(), ref)
        if key not in cache:
            cache[key] = restructure(net, x, ref, cfg.flood_mode, cfg.flood_keep_bias)
        return lrp(cache[key], x, lrp_cfg, reference_value=ref)
    if method == "retraining":
        return lrp(surrogate, x, lrp_cfg, reference_value=ref)
    raise ConfigError(method)


def run_repeat(cfg: BenchmarkConfig, dataset: str, repeat: int):
    """One (dataset, repeat) task: train, then score every (q, method)."""
    settings = cfg.settings_for(dataset)
    base = task_seed(cfg.master_seed, dataset, repeat)
    data_seed, split_seed, init_seed, sgd_seed = (_int_seed(s) for s in base.spawn(4))
    raw = get_dataset(dataset, seed=data_seed, n=settings.n)
    train_set, test_set = prepare_split(raw, split_seed)
    net = init_network(train_set.d, (cfg.hidden,), init_seed)
    tcfg = TrainConfig(**{**asdict(settings.train), "seed": sgd_seed})
    net, metrics = train(net, train_set, tcfg)
    model_info = {
        "dataset": dataset,
        "repeat": repeat,
        "n_train": train_set.n,
        "n_test": test_set.n,
        "train_r2": metrics["r2"],
        "test_r2": r_squared(net, test_set),
        "train_mse": metrics["train_mse"],
    }
    lrp_cfg = LrpConfig.gamma(cfg.gammas, ignore_biases=cfg.ignore_biases)
    grid = reference_grid(net, test_set, cfg.qs)
    records, dumps = [], []
    for q in cfg.qs:
        ref = grid.reference(q)
        idx = filter_instances(net, test_set, ref)[: cfg.max_instances]
        sums = {m: [0.0, 0.0] for m in cfg.methods}
        ratios = {m: [] for m in cfg.methods}
        errors: dict[str, str | None] = {m: None for m in cfg.methods}
        surrogate = None
        if "retraining" in cfg.methods:
            try:
                rcfg = RetrainConfig(
                    tau_minus=cfg.tau_minus,
                    tau_plus=cfg.tau_plus,
                    freeze=cfg.retrain_freeze,
                    init_from_original=True,
                    train=TrainConfig(
                        learning_rate=cfg.retrain_lr or settings.train.learning_rate,
                        epochs=settings.retrain_epochs,
                        batch_size=settings.train.batch_size,
                        seed=_int_seed(task_seed(cfg.master_seed, dataset, q, repeat, "retrain")),
                    ),
                )
                surrogate = retrain(net, train_set, ref, rcfg)
            except Exception as exc:  # recorded, not fatal
                errors["retraining"] = f"{type(exc).__name__}: {exc}"
        if len(idx) == 0:
            for m in cfg.methods:
                errors[m] = errors[m] or "no admissible instances"
        cache: dict = {}
        for i in idx:
            x = test_set.features[i]
            y = float(net.predict(x))
            R_ref = reference_explanation(net, x, ref)
            plain = lrp(net, x, lrp_cfg)
            rand_seed = task_seed(cfg.master_seed, dataset, q, repeat, int(i))
            dump = {"dataset": dataset, "q": q, "repeat": repeat, "instance": int(i), "prediction": y,
                    "reference_value": ref, "shapley": R_ref.attributions.tolist()} if cfg.dump_explanations else None
            for m in cfg.methods:
                if errors[m] is not None:
                    continue
                try:
                    if cfg.explanation_override is not None:
                        R = cfg.explanation_override(method=m, reference=R_ref, x=x, y=y, reference_value=ref)
                    else:
                        R = _explain_candidates(cfg, m, net, x, y, ref, lrp_cfg, plain, surrogate, cache)
                    num, den = mse_terms(R, R_ref, y, ref, cfg.k_random, rand_seed, cfg.random_scheme)
                except Exception as exc:
                    errors[m] = f"{type(exc).__name__}: {exc}"
                    continue
                sums[m][0] += num
                sums[m][1] += den
                if den > 0:
                    ratios[m].append(num / den)
                if dump is not None:
                    dump[m] = _attr(R).tolist()
            if dump is not None:
                dumps.append(dump)
        for m in cfg.methods:
            score = float("nan")
            if errors[m] is None:
                if cfg.aggregate == "ratio_of_means":
                    if sums[m][1] > 0:
                        score = sums[m][0] / sums[m][1]
                    else:
                        errors[m] = "zero random-attribution error"
                else:
                    score = float(np.mean(ratios[m])) if ratios[m] else float("nan")
                    if not ratios[m]:
                        errors[m] = "zero random-attribution error"
            records.append(
                {
                    "dataset": dataset,
                    "q": q,
                    "method": m,
                    "repeat_index": repeat,
                    "reference_value": ref,
                    "n_instances": int(len(idx)),
                    "normalized_mse": score,
                    "error": errors[m],
                }
            )
    model_info["grid"] = {"f_max": grid.f_max, "f_zero": grid.f_zero}
    return records, model_info, dumps


def _failed_repeat(cfg: BenchmarkConfig, dataset: str, repeat: int, exc: Exception):
    err = f"{type(exc).__name__}: {exc}"
    recs = [
        {"dataset": dataset, "q": q, "method": m, "repeat_index": repeat, "reference_value": float("nan"),
         "n_instances": 0, "normalized_mse": float("nan"), "error": err}
        for q in cfg.qs
        for m in cfg.methods
    ]
    return recs, {"dataset": dataset, "repeat": repeat, "error": err}, []


def _run_task(args):
    cfg, dataset, repeat = args
    try:
        return run_repeat(cfg, dataset, repeat)
    except Exception as exc:
        log.warning("repeat %d on %s failed: %s", repeat, dataset, exc)
        return _failed_repeat(cfg, dataset, repeat, exc)


def thread_budget(cfg: BenchmarkConfig) -> int:
    env = os.environ.get("REFXPLAIN_THREADS")
    n = int(env) if env else cfg.threads
    return max(1, n)


def run_benchmark(cfg: BenchmarkConfig) -> BenchmarkReport:
    cfg.validate()
    tasks = [(cfg, ds, r) for ds in cfg.datasets for r in range(cfg.repeats)]
    workers = thread_budget(cfg)
    if workers > 1 and cfg.explanation_override is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = []
        for t in tasks:
            log.info("benchmark: %s repeat %d", t[1], t[2])
            results.append(_run_task(t))
    records, models, dumps = [], [], []
    for recs, info, dump in results:
        records.extend(recs)
        models.append(info)
        dumps.extend(dump)
    return BenchmarkReport(records, models, cfg.provenance(), dumps)
