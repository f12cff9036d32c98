"""Command-line interface: ``refxplain train | explain | benchmark | selfcheck``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import numpy as np

from .attribution import (
    Epsilon,
    Explanation,
    LrpConfig,
    clip_negative,
    clip_positive,
    gradient_x_input,
    integrated_gradients,
    lrp,
    relabel,
    shapley_exact,
    shapley_sampled,
)
from .datasets import get_dataset, prepare_split
from .errors import ConfigError, RefxplainError
from .evaluation import (
    DEFAULT_SETTINGS,
    BenchmarkConfig,
    DatasetSettings,
    reference_grid,
    run_benchmark,
)
from .network import (
    DenseNetwork,
    TrainConfig,
    build_max_network,
    init_network,
    load_network,
    r_squared,
    random_network,
    rescale_to_original_units,
    save_network,
    strip_biases,
    train,
)
from .refvalue import (
    FLOOD_MODES,
    RetrainConfig,
    baseline_scale,
    baseline_shift,
    restructure,
    retrain,
    shift_output,
    triplicate_relu,
)

log = logging.getLogger("refxplain")

EXPLAIN_METHODS = (
    "lrp",
    "gxi",
    "ig",
    "shapley",
    "shapley-sampled",
    "restructure-lrp",
    "retrain-lrp",
    "baseline-shift",
    "baseline-scale",
)
BUILTINS = {"max2": build_max_network}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _dump(obj: Any) -> str:
    # json writes floats with repr, the shortest exact round-trip form
    return json.dumps(obj, indent=2, allow_nan=True)


# -- train ---------------------------------------------------------------------


def _dataset_args(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--dataset", required=required, help="max | linear | friedman | diabetes | boston | csv")
    p.add_argument("--path", help="CSV file for --dataset csv")
    p.add_argument("--target", default="target", help="target column for --dataset csv")
    p.add_argument("--n", type=int, help="sample count for synthetic datasets")
    p.add_argument("--seed", type=int, default=0)


def _load_split(name: str, seed: int, n: int | None, path: str | None, target: str):
    settings = DEFAULT_SETTINGS.get(name, DatasetSettings())
    raw = get_dataset(name, seed=seed, n=n or settings.n, path=path, target=target)
    train_set, test_set = prepare_split(raw, seed)
    return raw, train_set, test_set


def cmd_train(args) -> int:
    settings = DEFAULT_SETTINGS.get(args.dataset, DatasetSettings())
    raw, train_set, test_set = _load_split(args.dataset, args.seed, args.n, args.path, args.target)
    print(f"dataset {raw.name}: n={raw.n} d={raw.d}")
    tcfg = TrainConfig(
        learning_rate=args.lr or settings.train.learning_rate,
        epochs=args.epochs or settings.train.epochs,
        batch_size=args.batch_size or settings.train.batch_size,
        seed=args.seed,
    )
    net = init_network(train_set.d, (args.hidden,), args.seed, raw.unit)
    net, metrics = train(net, train_set, tcfg)
    test_r2 = r_squared(net, test_set)
    net.metadata = {
        "dataset": {"name": args.dataset, "seed": args.seed, "n": raw.n, "path": args.path, "target": args.target},
        "feature_names": raw.feature_names,
        "inputs": "standardized features (training-split mean and std)",
        "scaling": {
            "means": train_set.standardization.means.tolist(),
            "stds": train_set.standardization.stds.tolist(),
            "t_min": train_set.target_scaling.t_min,
            "t_max": train_set.target_scaling.t_max,
        },
        "original_units": bool(args.original_units),
    }
    if args.original_units:
        net = rescale_to_original_units(net, train_set.target_scaling, raw.unit)
    out = Path(args.out)
    save_network(net, out)
    report = {
        "n": raw.n,
        "train_mse": metrics["train_mse"],
        "train_r2": metrics["r2"],
        "test_r2": test_r2,
        "train_config": asdict(tcfg),
    }
    metrics_path = out.with_name(out.name + ".metrics.json")
    metrics_path.write_text(_dump(report) + "\n", encoding="utf-8")
    print(f"R2 train={metrics['r2']:.4f} test={test_r2:.4f}")
    print(f"wrote {out} and {metrics_path}")
    return 0


# -- explain -------------------------------------------------------------------


def _net_dataset(net: DenseNetwork):
    meta = net.metadata.get("dataset")
    if not meta:
        raise ConfigError("this network carries no dataset metadata; --index, --q and retrain-lrp need one")
    _, train_set, test_set = _load_split(meta["name"], meta["seed"], meta["n"], meta.get("path"), meta["target"])
    if net.metadata.get("original_units"):
        ts = train_set.target_scaling
        train_set.targets = ts.invert(train_set.targets)
        test_set.targets = ts.invert(test_set.targets)
    return train_set, test_set


def _clipped(net: DenseNetwork, x: np.ndarray, ref: float):
    return clip_positive(net, ref) if float(net.predict(x)) >= ref else clip_negative(net, ref)


def explain_instance(net: DenseNetwork, x, ref: float | None, method: str, args) -> Explanation:
    x = np.asarray(x, dtype=float)
    y = float(net.predict(x))
    r = 0.0 if ref is None else ref
    cfg = LrpConfig.gamma(args.gamma, ignore_biases=args.ignore_biases) if len(args.gamma) == len(net.layers) else None
    if method in ("lrp", "restructure-lrp", "retrain-lrp", "baseline-shift", "baseline-scale") and cfg is None:
        raise ConfigError(f"--gamma needs one value per layer ({len(net.layers)})")
    if method == "lrp":
        return lrp(shift_output(net, r), x, cfg, reference_value=r)
    if method == "gxi":
        return relabel(gradient_x_input(net, x), y, r)
    if method in ("ig", "shapley", "shapley-sampled"):
        baseline = None if args.baseline is None else np.asarray(args.baseline)
        f = net if ref is None else _clipped(net, x, r)
        if method == "ig":
            e = integrated_gradients(f, x, baseline, steps=args.steps)
        elif method == "shapley":
            e = shapley_exact(f, x, baseline)
        else:
            e = shapley_sampled(f, x, baseline, n_permutations=args.n_permutations, seed=args.seed)
        if ref is not None:
            e = replace_clipped(e, y, r)
        return e
    if method == "restructure-lrp":
        return lrp(restructure(net, x, r, mode=args.flood_mode), x, cfg, reference_value=r)
    if method == "retrain-lrp":
        train_set, _ = _net_dataset(net)
        settings = DEFAULT_SETTINGS.get(net.metadata["dataset"]["name"], DatasetSettings())
        rcfg = RetrainConfig(
            tau_minus=args.tau_minus,
            train=TrainConfig(
                learning_rate=settings.train.learning_rate, epochs=settings.retrain_epochs, seed=args.seed
            ),
        )
        surrogate = retrain(net, train_set, r, rcfg)
        e = lrp(surrogate, x, cfg)
        # report against f(x); the gap then includes the surrogate's misfit
        return relabel(e, y, r, params={**e.params, "surrogate": surrogate.metadata["retrain"]})
    plain = lrp(net, x, cfg)
    if method == "baseline-shift":
        return baseline_shift(plain, r)
    return baseline_scale(plain, y, r)


def replace_clipped(e: Explanation, y: float, ref: float) -> Explanation:
    """Report a clipped-function explanation against f(x) and the reference."""
    params = {**e.params, "explained": "clipped f - reference", "clipped_prediction": e.prediction,
              "clipped_baseline_value": e.reference_value}
    return relabel(e, y, ref + e.reference_value, params=params)


def cmd_explain(args) -> int:
    if args.builtin:
        net = BUILTINS[args.builtin]()
    elif args.net:
        net = load_network(args.net)
    else:
        raise ConfigError("give a network file or --builtin")
    if args.input is not None:
        x = np.asarray(args.input)
    elif args.index is not None:
        _, test_set = _net_dataset(net)
        if not 0 <= args.index < test_set.n:
            raise ConfigError(f"--index must lie in [0, {test_set.n - 1}]")
        x = test_set.features[args.index]
    else:
        raise ConfigError("give --input or --index")
    if x.shape != (net.input_dim,):
        raise ConfigError(f"input has {x.size} values, the network expects {net.input_dim}")
    ref = args.reference
    if args.q is not None:
        _, test_set = _net_dataset(net)
        ref = reference_grid(net, test_set, [args.q]).reference(args.q)
    needs_ref = args.method in ("restructure-lrp", "retrain-lrp", "baseline-shift", "baseline-scale")
    if ref is None and needs_ref:
        raise ConfigError(f"--method {args.method} needs --reference or --q")
    expl = explain_instance(net, x, ref, args.method, args)
    expl.method = args.method
    unit = expl.unit or net.output_unit
    label = f" [{unit}]" if unit else ""
    names = net.metadata.get("feature_names") or [f"x{i + 1}" for i in range(net.input_dim)]
    print(f"method          {args.method}")
    print(f"prediction      {expl.prediction!r}{label}")
    print(f"reference       {expl.reference_value!r}{label}")
    print(f"sum R           {expl.total!r}{label}")
    print(f"conservation_gap {expl.conservation_gap!r}{label}")
    for name, v in zip(names, expl.attributions):
        print(f"  {name:>12} {float(v)!r}{label}")
    if args.out:
        Path(args.out).write_text(_dump(expl.to_dict()) + "\n", encoding="utf-8")
    return 0


# -- benchmark -----------------------------------------------------------------

_CONFIG_SKIP = {"explanation_override", "settings"}


def load_benchmark_config(path) -> BenchmarkConfig:
    """JSON config whose keys are BenchmarkConfig fields; unknown keys are an error."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in fields(BenchmarkConfig)} - _CONFIG_SKIP | {"settings"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; allowed: {sorted(allowed)}")
    settings = dict(DEFAULT_SETTINGS)
    for name, entry in doc.pop("settings", {}).items():
        extra = set(entry) - {"n", "retrain_epochs", "train"}
        if extra:
            raise ConfigError(f"unknown settings keys {sorted(extra)} for {name}")
        base = settings.get(name, DatasetSettings())
        tr = entry.get("train", {})
        bad = set(tr) - {f.name for f in fields(TrainConfig)}
        if bad:
            raise ConfigError(f"unknown train keys {sorted(bad)} for {name}")
        settings[name] = DatasetSettings(
            n=entry.get("n", base.n),
            train=TrainConfig(**{**asdict(base.train), **tr}),
            retrain_epochs=entry.get("retrain_epochs", base.retrain_epochs),
        )
    if doc.get("tau_plus") in ("inf", "Infinity"):
        doc["tau_plus"] = math.inf
    return BenchmarkConfig(**doc, settings=settings)


def cmd_benchmark(args) -> int:
    cfg = load_benchmark_config(args.config) if args.config else BenchmarkConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.datasets:
        cfg.datasets = args.datasets.split(",")
    if args.qs:
        cfg.qs = args.qs
    if args.methods:
        cfg.methods = args.methods.split(",")
    if args.repeats:
        cfg.repeats = args.repeats
    if args.dump_explanations:
        cfg.dump_explanations = True
    report = run_benchmark(cfg)
    paths = report.write(args.out)
    for row in report.aggregates():
        print(f"{row['dataset']:>9} q={row['q']:<5} {row['method']:>13} "
              f"{row['mean_nmse']:.4f} +- {row['std_nmse']:.4f} (failures {row['n_failures']})")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    frac = report.success_fraction
    if frac < 0.9:
        print(f"only {frac:.0%} of repeats succeeded", file=sys.stderr)
        return 1
    return 0


# -- selfcheck -----------------------------------------------------------------


def run_selfcheck(n_nets: int = 20, seed: int = 0, inject_bias: bool = False) -> list[tuple[str, bool, str]]:
    """Sanity checks on random networks; returns (name, passed, detail) rows.

    ``inject_bias`` lets the output shift enter the LRP propagation in the
    conservation check, which must then fail (negative control).
    """
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(n_nets):
        d = int(rng.integers(4, 14))
        net = strip_biases(random_network(d, (int(rng.integers(4, 32)),), rng))
        x = rng.normal(size=d)
        ref = float(rng.normal())
        # the only bias left is the -ref output shift; propagating it breaks conservation
        cfg = LrpConfig.gamma([float(rng.uniform(0, 3)), 0.0], ignore_biases=not inject_bias)
        e = lrp(shift_output(net, ref), x, cfg, ref)
        worst = max(worst, abs(e.total - (float(net.predict(x)) - ref)))
    results.append(("conservation sum R = f(x) - ref", worst <= 1e-9, f"max error {worst:.3g}"))

    worst = 0.0
    for _ in range(n_nets):
        d = int(rng.integers(2, 10))
        net = random_network(d, (int(rng.integers(4, 32)),), rng)
        x = rng.normal(size=d)
        b = gradient_x_input(net, x).attributions
        for cfg in (LrpConfig.gamma([0.0, 0.0]), LrpConfig([Epsilon(0.0), Epsilon(0.0)])):
            worst = max(worst, float(np.max(np.abs(lrp(net, x, cfg).attributions - b))))
    results.append(("LRP gamma=0, eps=0 equals gradient x input", worst <= 1e-9, f"max error {worst:.3g}"))

    z = np.linspace(-3.0, 3.0, 61)
    worst = 0.0
    for a_t in np.linspace(0.0, 2.0, 9):
        layer = random_network(1, (1,), rng).layers[0]
        layer.weights[:] = 1.0
        layer.biases[:] = 0.0
        hidden, out = triplicate_relu(layer, np.ones((1, 1)), np.array([a_t]))
        h = np.maximum(hidden.weights @ z[None, :] + hidden.biases[:, None], 0.0)
        worst = max(worst, float(np.max(np.abs(out @ h - (np.maximum(z, 0.0) - a_t)))))
    results.append(("triplication identity", worst <= 1e-12, f"max error {worst:.3g}"))

    worst = 0.0
    for _ in range(n_nets):
        d = int(rng.integers(2, 8))
        net = random_network(d, (int(rng.integers(4, 16)),), rng)
        x = rng.normal(size=d)
        ref = float(net.predict(x)) - abs(float(rng.normal()))
        try:
            r = restructure(net, x, ref)
        except RefxplainError:
            continue
        pts = rng.normal(size=(200, d)) * 2
        worst = max(worst, float(np.max(np.abs(r.predict(pts) - (net.predict(pts) - ref)))))
    results.append(("restructured net equals f - ref", worst <= 1e-9, f"max error {worst:.3g}"))
    return results


def cmd_selfcheck(args) -> int:
    rows = run_selfcheck(inject_bias=args.inject_bias)
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = [name for name, ok, _ in rows if not ok]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return 1
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refxplain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a 256-unit ReLU regressor")
    _dataset_args(t, required=True)
    t.add_argument("--hidden", type=int, default=256)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--original-units", action="store_true", help="fold the target scaling into the output layer")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="explain one prediction relative to a reference value")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("net", nargs="?", help="network file")
    src.add_argument("--builtin", choices=sorted(BUILTINS))
    where = e.add_mutually_exclusive_group(required=True)
    where.add_argument("--input", type=_floats)
    where.add_argument("--index", type=int, help="row of the held-out split of the training dataset")
    ref = e.add_mutually_exclusive_group()
    ref.add_argument("--reference", type=float)
    ref.add_argument("--q", type=float, help="grid fraction between f(0) and the maximum prediction")
    e.add_argument("--method", choices=EXPLAIN_METHODS, default="lrp")
    e.add_argument("--gamma", type=_floats, default=[2.5, 0.0], help="LRP-gamma per layer, input first")
    e.add_argument("--ignore-biases", action="store_true")
    e.add_argument("--flood-mode", choices=FLOOD_MODES, default="symmetric")
    e.add_argument("--baseline", type=_floats, help="baseline for ig and shapley (default zeros)")
    e.add_argument("--steps", type=int, default=128)
    e.add_argument("--n-permutations", type=int, default=1000)
    e.add_argument("--tau-minus", type=float, default=-0.3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_explain)

    b = sub.add_parser("benchmark", help="normalized-MSE benchmark against Shapley references")
    b.add_argument("--config", help="JSON config file")
    b.add_argument("--seed", type=int, help="master seed")
    b.add_argument("--datasets")
    b.add_argument("--qs", type=_floats)
    b.add_argument("--methods")
    b.add_argument("--repeats", type=int)
    b.add_argument("--dump-explanations", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("selfcheck", help="run conservation and reduction sanity checks")
    s.add_argument("--inject-bias", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (RefxplainError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
