"""``geodrop`` command line: experiments, Fisher estimates and geometry calculators.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines (keys spelled like the long flags), then explicit flags.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import families, geometry
from .data import Dataset, load_mnist, synth_blobs
from .dropout_ensemble import EnsembleSpec, run_ensemble
from .errors import DomainError, FormatError, GeodropError, NumericalError
from .experiment import (
    DEFAULT_RATES,
    SWEEP_TRAIN,
    SweepConfig,
    run_sweep,
    run_trial,
    summarize,
    sweep_shape,
    worker_count,
    write_sweep,
)
from .fim import exact_fim, fim_norm, hessian_split, kfac_fim, mc_fim
from .mixtures import alpha_integrate, argmin_weighted_divergence
from .models import MlpModel, TrainConfig, fit, load_checkpoint, save_checkpoint
from .numerics import make_rng

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(GeodropError, ValueError):
    pass


# ---------------------------------------------------------------------------
# option handling
# ---------------------------------------------------------------------------

def _floats(text):
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text):
    return str(text).lower() in ("1", "true", "yes", "on")


# name -> (parser, default)
OPTIONS = {
    "seed": (int, 0),
    "out": (str, "geodrop-out"),
    "mnist_images": (str, None),
    "mnist_labels": (str, None),
    "mnist_test_images": (str, None),
    "mnist_test_labels": (str, None),
    "limit": (int, 5000),
    "test_limit": (int, 1000),
    "synthetic": (_floats, None),
    "hidden": (_ints, SWEEP_TRAIN.hidden),
    "activation": (str, SWEEP_TRAIN.activation),
    "epochs": (int, SWEEP_TRAIN.epochs),
    "lr": (float, SWEEP_TRAIN.lr),
    "batch_size": (int, SWEEP_TRAIN.batch_size),
    "dropout_mode": (str, SWEEP_TRAIN.dropout_mode),
    "rate": (float, 0.0),
    "trial": (int, 0),
    "rates": (_floats, DEFAULT_RATES),
    "trials": (int, 10),
    "norm": (str, "frobenius"),
    "fim_on": (str, "train"),
    "masks": (int, 4),
    "scheme": (str, "unit"),
    "weighting": (str, "uniform"),
    "alpha": (float, 1.0),
    "model": (str, None),
    "kind": (str, "kfac"),
    "samples": (int, 100),
    "split": (_bool, False),
    "family": (str, "gaussian"),
    "metric_file": (str, None),
    "point": (_floats, None),
    "quantity": (str, "scalar"),
    "radius": (float, 0.2),
    "dists": (str, None),
    "weights": (_floats, None),
    "fixture": (str, "parabola"),
}

# defaults that differ by subcommand
COMMAND_DEFAULTS = {"ensemble": {"rate": 0.5}}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge defaults, config file and explicit flags (in increasing priority)."""
    file_values = read_config_file(args.config) if args.config else {}
    overrides = COMMAND_DEFAULTS.get(args.command, {})
    merged = {}
    for name, (parse, default) in OPTIONS.items():
        default = overrides.get(name, default)
        given = getattr(args, name, None)
        try:
            if given is not None:
                merged[name] = parse(given) if isinstance(given, str) and parse is not str else given
            elif name in file_values:
                merged[name] = parse(file_values[name])
            else:
                merged[name] = default
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {exc}") from exc
    merged["command"] = args.command
    return argparse.Namespace(**merged)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geodrop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="FILE")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")

    def data_opts(p):
        p.add_argument("--mnist-images", metavar="PATH")
        p.add_argument("--mnist-labels", metavar="PATH")
        p.add_argument("--mnist-test-images", metavar="PATH")
        p.add_argument("--mnist-test-labels", metavar="PATH")
        p.add_argument("--limit", type=int, help="training examples (default 5000)")
        p.add_argument("--test-limit", type=int, help="test examples (default 1000)")
        p.add_argument("--synthetic", metavar="K,PER_CLASS,DIM,SEP", help="Gaussian blobs instead of MNIST")
        p.add_argument("--hidden", metavar="CSV", help="hidden layer widths, e.g. 100 or 32,16")
        p.add_argument("--activation", choices=("relu", "sigmoid"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--dropout-mode", choices=("batch", "example"))

    def norm_opt(p):
        p.add_argument("--norm", choices=("frobenius", "trace", "spectral"))

    p = sub.add_parser("train", help="train one MLP and report its Fisher norm")
    common(p)
    data_opts(p)
    norm_opt(p)
    p.add_argument("--rate", type=float, help="stochastic dropout rate")
    p.add_argument("--trial", type=int, help="trial index; matches the sweep's seeding")
    p.add_argument("--fim-on", choices=("train", "test"))

    p = sub.add_parser("sweep", help="Fisher norm against dropout rate")
    common(p)
    data_opts(p)
    norm_opt(p)
    p.add_argument("--rates", metavar="CSV")
    p.add_argument("--trials", type=int)
    p.add_argument("--fim-on", choices=("train", "test"))

    p = sub.add_parser("ensemble", help="dropout ensemble of masked projections")
    common(p)
    data_opts(p)
    p.add_argument("--masks", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--scheme", choices=("unit", "coordinate"))
    p.add_argument("--weighting", choices=("uniform", "likelihood"))
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("fim", help="Fisher information of a checkpoint or a freshly trained model")
    common(p)
    data_opts(p)
    norm_opt(p)
    p.add_argument("--model", metavar="CHECKPOINT")
    p.add_argument("--kind", choices=("kfac", "exact", "mc"))
    p.add_argument("--samples", type=int, help="Monte-Carlo samples per input")
    p.add_argument("--split", action="store_const", const=True, help="compare Fisher, embedding metric and loss Hessian")
    p.add_argument("--fim-on", choices=("train", "test"))

    p = sub.add_parser("geometry", help="curvature of a metric family")
    common(p)
    p.add_argument("--family", choices=("gaussian", "sphere", "euclidean", "custom"))
    p.add_argument("--metric-file", metavar="PATH")
    p.add_argument("--point", metavar="CSV")
    p.add_argument("--quantity", choices=("christoffel", "torsion", "riemann", "scalar", "volume-ratio"))
    p.add_argument("--radius", type=float)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("alpha-mix", help="alpha-integration of categorical distributions")
    common(p)
    p.add_argument("--dists", metavar="P1;P2;...", help="semicolon-separated probability vectors")
    p.add_argument("--weights", metavar="CSV")
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("sff", help="second fundamental form of an embedding")
    common(p)
    p.add_argument("--fixture", choices=("linear", "parabola", "circle", "fisher"))
    p.add_argument("--point", metavar="CSV")
    return parser


# ---------------------------------------------------------------------------
# data and training settings
# ---------------------------------------------------------------------------

def _existing(path, what):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file {p} does not exist")
    return p


def load_data(opts) -> tuple:
    """Train and test splits plus a description of where they came from."""
    if opts.synthetic is not None:
        if len(opts.synthetic) != 4:
            raise ConfigError("--synthetic expects K,PER_CLASS,DIM,SEPARATION")
        k, per, dim, sep = opts.synthetic
        data = synth_blobs(int(k), int(per), int(dim), sep, opts.seed)
        n_train = int(round(0.8 * len(data)))
        train, test = data.split(n_train)
        return train, test, {"source": "synthetic", "classes": int(k), "per_class": int(per), "dim": int(dim), "separation": sep}
    if opts.mnist_images is None or opts.mnist_labels is None:
        raise ConfigError("give --mnist-images and --mnist-labels, or --synthetic")
    images = _existing(opts.mnist_images, "MNIST images")
    labels = _existing(opts.mnist_labels, "MNIST labels")
    source = {"source": "mnist", "images": str(images), "labels": str(labels), "limit": opts.limit}
    if opts.mnist_test_images and opts.mnist_test_labels:
        train = load_mnist(images, labels, opts.limit)
        test = load_mnist(
            _existing(opts.mnist_test_images, "MNIST test images"),
            _existing(opts.mnist_test_labels, "MNIST test labels"),
            opts.test_limit,
        )
        source.update(test_images=str(opts.mnist_test_images), test_labels=str(opts.mnist_test_labels), test_limit=opts.test_limit)
    else:
        both = load_mnist(images, labels, opts.limit + opts.test_limit)
        if len(both) <= opts.limit:
            raise ConfigError(f"{images} holds {len(both)} examples, too few for a held-out test split")
        train, test = both.split(opts.limit)
        source.update(test="held out after the first `limit` training examples", test_limit=opts.test_limit)
    return train, test, source


def train_config(opts) -> TrainConfig:
    return replace(
        SWEEP_TRAIN,
        hidden=tuple(opts.hidden),
        activation=opts.activation,
        epochs=opts.epochs,
        lr=opts.lr,
        batch_size=opts.batch_size,
        dropout_mode=opts.dropout_mode,
        seed=opts.seed,
    )


def sweep_config(opts, rates=None, trials=None) -> SweepConfig:
    return SweepConfig(
        rates=tuple(rates if rates is not None else opts.rates),
        trials=trials if trials is not None else opts.trials,
        seed=opts.seed,
        norm=opts.norm,
        fim_on=opts.fim_on,
        train=train_config(opts),
    )


def _out_dir(opts) -> Path:
    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(opts) -> int:
    train, test, source = load_data(opts)
    cfg = sweep_config(opts, rates=(opts.rate,), trials=opts.trial + 1)
    outcome = run_trial(train, test, cfg, opts.rate, opts.trial)
    if outcome.row.status != "ok":
        raise NumericalError(f"training diverged at rate {opts.rate}")
    out = _out_dir(opts)
    model = MlpModel.from_params(cfg.train.layer_sizes(train), outcome.params, cfg.train.activation)
    save_checkpoint(model, out / "model.gdrp")
    report = {
        "rate": opts.rate,
        "trial": opts.trial,
        "seed": opts.seed,
        "norm": opts.norm,
        "fim_norm": outcome.row.fim_norm,
        "test_accuracy": outcome.row.test_accuracy,
        "train_loss": outcome.row.train_loss,
        "layer_sizes": list(model.layer_sizes),
        "data": source,
    }
    (out / "train.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    _emit(report)
    return EXIT_OK


def cmd_sweep(opts) -> int:
    train, test, source = load_data(opts)
    cfg = sweep_config(opts)
    workers = worker_count()
    rows = run_sweep(train, test, cfg, workers)
    paths = write_sweep(_out_dir(opts), rows, cfg, train, test, source, workers)
    summary = summarize(rows)
    for e in summary:
        print(f"rate {e['rate']:.2f}  fim {e['fim_norm_mean']:.4g} +/- {e['fim_norm_std']:.2g}  "
              f"acc {e['test_accuracy_mean']:.4f}  ok {e['n_ok']}/{cfg.trials}")
    shape = sweep_shape(summary)
    print(f"minimum mean Fisher norm at rate {shape['argmin_rate']}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _reference_curvatures() -> dict:
    return {
        "sphere_at_(pi/4,0)": geometry.scalar_curvature(families.sphere_metric, [math.pi / 4, 0.0]),
        "gaussian_at_(0,1)": geometry.scalar_curvature(families.gaussian_fisher_metric, [0.0, 1.0]),
    }


def cmd_ensemble(opts) -> int:
    train, test, source = load_data(opts)
    spec = EnsembleSpec(
        n_masks=opts.masks,
        rate=opts.rate,
        scheme=opts.scheme,
        alpha=opts.alpha,
        weighting=opts.weighting,
        train=train_config(opts),
    )
    result = run_ensemble(train, test, spec, make_rng(opts.seed, 2), workers=worker_count())
    out = _out_dir(opts)
    report = result.to_dict()
    report["reference_scalar_curvature"] = _reference_curvatures()
    report["data"] = source
    (out / "ensemble.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    for k, m in enumerate(result.member_metrics):
        print(f"member {k}: loss {m.loss:.4f} acc {m.accuracy:.4f} kept {int(result.kept[k].sum())}/{result.kept.shape[1]}")
    print(f"averaged parameters: loss {result.averaged.loss:.4f} acc {result.averaged.accuracy:.4f}")
    print(f"alpha={spec.alpha:g} integration: loss {result.integrated.loss:.4f} acc {result.integrated.accuracy:.4f}")
    if result.erm is not None:
        print(f"plain ERM: loss {result.erm.loss:.4f} acc {result.erm.accuracy:.4f}")
    for name, value in report["reference_scalar_curvature"].items():
        print(f"scalar curvature {name}: {value:.6f}")
    print(f"report: {out / 'ensemble.json'}")
    return EXIT_OK


def cmd_fim(opts) -> int:
    train, test, source = load_data(opts)
    if opts.model:
        model = load_checkpoint(_existing(opts.model, "checkpoint"), opts.activation)
    else:
        cfg = replace(train_config(opts), dropout_rate=opts.rate)
        model = fit(train, cfg).model
    probe = train if opts.fim_on == "train" else test
    if opts.kind == "kfac":
        est = kfac_fim(model, probe.features)
    elif opts.kind == "exact":
        est = exact_fim(model, probe.features)
    else:
        est = mc_fim(model, probe.features, opts.samples, make_rng(opts.seed, 3))
    report = {
        "kind": est.kind,
        "n_params": model.n_params,
        "inputs": opts.fim_on,
        "norms": {n: fim_norm(est, n) for n in ("frobenius", "trace", "spectral")},
        "selected_norm": opts.norm,
        "value": fim_norm(est, opts.norm),
    }
    if opts.split:
        report["hessian_split"] = hessian_split(model, probe).summary()
    _emit(report)
    return EXIT_OK


def load_metric_file(path):
    """Metric field from a text file with ``coords:`` and ``g:`` lines.

    Example::

        coords: r t
        g: [[1, 0], [0, r**2]]

    Entries are sympy expressions in the named coordinates.
    """
    import sympy

    text = Path(path).read_text()
    entries = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition(":")
            entries[key.strip()] = value.strip()
    if "coords" not in entries or "g" not in entries:
        raise FormatError(f"{path}: needs 'coords:' and 'g:' lines")
    symbols = sympy.symbols(entries["coords"].split())
    if not isinstance(symbols, (list, tuple)):
        symbols = (symbols,)
    try:
        matrix = sympy.Matrix(sympy.sympify(entries["g"], locals={str(s): s for s in symbols}))
    except (sympy.SympifyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: cannot parse metric: {exc}") from exc
    n = len(symbols)
    if matrix.shape != (n, n):
        raise FormatError(f"{path}: metric is {matrix.shape}, expected {n}x{n}")
    fn = sympy.lambdify([symbols], matrix, "numpy")
    return lambda theta: np.array(fn(np.asarray(theta, dtype=np.float64)), dtype=np.float64)


_CLOSED_FORM = {
    "sphere": (families.sphere_volume_density, families.sphere_distance),
    "gaussian": (families.gaussian_volume_density, families.gaussian_distance),
}


def _family_metric(opts):
    if opts.family == "custom":
        if not opts.metric_file:
            raise ConfigError("--family custom needs --metric-file")
        return load_metric_file(_existing(opts.metric_file, "metric"))
    if opts.family == "euclidean":
        return families.euclidean_metric(len(opts.point))
    return families.FAMILIES[opts.family]


def _check_point(opts):
    if opts.point is None:
        raise ConfigError("--point is required")
    theta = np.asarray(opts.point, dtype=np.float64)
    if opts.family in ("gaussian", "sphere") and theta.size != 2:
        raise DomainError(f"{opts.family} points have two coordinates")
    if opts.family == "gaussian" and theta[1] <= 0:
        raise DomainError("gaussian points need sigma > 0")
    if opts.family == "sphere" and not 0.0 < theta[0] < math.pi:
        raise DomainError("sphere points need a polar angle in (0, pi)")
    return theta


def _components(name, array):
    lines = []
    for idx in np.ndindex(array.shape):
        up, *down = idx
        lines.append(f"{name}^{up}_{''.join(map(str, down))},{float(array[idx])!r}")
    return lines


def cmd_geometry(opts) -> int:
    theta = _check_point(opts)
    metric = _family_metric(opts)
    conn = geometry.levi_civita_field(metric)
    q = opts.quantity
    print("component,value")
    if q == "christoffel":
        print("\n".join(_components("Gamma", conn(theta))))
    elif q == "torsion":
        print("\n".join(_components("T", geometry.torsion(conn, theta))))
    elif q == "riemann":
        print("\n".join(_components("R", geometry.riemann(conn, theta))))
    elif q == "scalar":
        print(f"scalar_curvature,{geometry.scalar_curvature(metric, theta)!r}")
    else:
        scalar = geometry.scalar_curvature(metric, theta)
        n = theta.size
        print(f"scalar_curvature,{scalar!r}")
        print(f"volume_ratio_series,{geometry.volume_ratio(scalar, n, opts.radius)!r}")
        if opts.family in _CLOSED_FORM:
            density, distance = _CLOSED_FORM[opts.family]
            ratio, err = geometry.mc_ball_volume_ratio(
                density,
                distance,
                theta,
                opts.radius,
                families.ball_half_widths(opts.family, theta, opts.radius),
                max(opts.samples, 10_000),
                make_rng(opts.seed, 4),
            )
            print(f"volume_ratio_monte_carlo,{float(ratio)!r}")
            print(f"volume_ratio_monte_carlo_stderr,{float(err)!r}")
        elif opts.family == "euclidean":
            print("volume_ratio_exact,1.0")
    return EXIT_OK


def _parse_dists(text):
    if not text:
        raise ConfigError("--dists is required, e.g. '0.5,0.5;0.25,0.75'")
    return [np.array(_floats(part)) for part in text.split(";") if part.strip()]


def cmd_alpha_mix(opts) -> int:
    dists = _parse_dists(opts.dists)
    w = None if opts.weights is None else np.array(opts.weights)
    mixed = alpha_integrate(dists, w, opts.alpha)
    oracle = argmin_weighted_divergence(dists, w, opts.alpha)
    print(f"alpha: {opts.alpha:g}")
    print("alpha_integrate: " + ", ".join(f"{v:.10f}" for v in mixed))
    print("divergence argmin: " + ", ".join(f"{v:.10f}" for v in oracle))
    print(f"max abs gap: {np.abs(mixed - oracle).max():.3e}")
    return EXIT_OK


SFF_FIXTURES = {
    "linear": (lambda th: np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]]) @ th, (0.3, -0.2)),
    "parabola": (lambda th: np.array([th[0], th[0] ** 2]), (0.0,)),
    "circle": (lambda th: np.array([math.cos(th[0]), math.sin(th[0])]), (0.7,)),
}


def cmd_sff(opts) -> int:
    if opts.fixture == "fisher":
        data = synth_blobs(3, 20, 2, 2.0, opts.seed)
        model = fit(data, TrainConfig(hidden=(), epochs=20, seed=opts.seed)).model
        _emit(hessian_split(model, data).summary())
        return EXIT_OK
    embed, default = SFF_FIXTURES[opts.fixture]
    theta = np.asarray(opts.point if opts.point is not None else default, dtype=np.float64)
    sff = geometry.second_fundamental_form(embed, theta)
    print(f"fixture: {opts.fixture}")
    print(f"point: {', '.join(f'{v:g}' for v in theta)}")
    print(f"norm: {sff.norm!r}")
    print("eigenvalues: " + ", ".join(f"{float(v)!r}" for v in sff.eigenvalues))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "ensemble": cmd_ensemble,
    "fim": cmd_fim,
    "geometry": cmd_geometry,
    "alpha-mix": cmd_alpha_mix,
    "sff": cmd_sff,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opts = resolve(args)
        return COMMANDS[opts.command](opts)
    except FormatError as exc:
        print(f"geodrop: data format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"geodrop: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (GeodropError, ValueError, OSError) as exc:
        print(f"geodrop: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
