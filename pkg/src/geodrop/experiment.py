"""Dropout-rate sweep: train at each rate, measure the Fisher norm, write CSV and SVG."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import FormatError, NumericalError
from .fim import fim_norm, kfac_fim
from .models import TrainConfig, accuracy, fit, mean_loss
from .numerics import make_rng

DEFAULT_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)

# Settings for the MNIST rate sweep. Shorter training (the 3-epoch default
# below) stops while the norm is still falling steeply with the rate.
SWEEP_TRAIN = TrainConfig(
    lr=0.3, batch_size=64, epochs=50, hidden=(100,), activation="relu", dropout_mode="batch"
)


def worker_count(default: int = 1) -> int:
    """Worker pool size, overridable through ``GEODROP_THREADS``."""
    raw = os.environ.get("GEODROP_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"GEODROP_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def trial_seed(seed: int, trial: int) -> int:
    """Seed of one trial, derived independently of every other trial."""
    return int(make_rng(seed, trial).integers(2**31 - 1))


@dataclass(frozen=True)
class SweepConfig:
    rates: tuple = DEFAULT_RATES
    trials: int = 10
    seed: int = 0
    norm: str = "frobenius"
    fim_on: str = "train"  # which split's inputs the Fisher is averaged over
    train: TrainConfig = field(default_factory=lambda: SWEEP_TRAIN)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.rates or not all(0.0 <= r < 1.0 for r in self.rates):
            raise ValueError(f"rates must lie in [0, 1), got {self.rates}")
        if self.norm not in ("frobenius", "trace", "spectral"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.fim_on not in ("train", "test"):
            raise ValueError("fim_on must be 'train' or 'test'")


@dataclass
class SweepRow:
    rate: float
    trial: int
    fim_norm: float
    test_accuracy: float
    train_loss: float
    wall_seconds: float
    status: str = "ok"


CSV_FIELDS = tuple(f.name for f in fields(SweepRow))
SUMMARY_FIELDS = (
    "rate", "n_ok", "fim_norm_mean", "fim_norm_std", "test_accuracy_mean",
    "test_accuracy_std", "train_loss_mean", "train_loss_std",
)


@dataclass
class TrialOutcome:
    row: SweepRow
    params: Optional[np.ndarray] = None


def run_trial(train: Dataset, test: Dataset, cfg: SweepConfig, rate: float, trial: int) -> TrialOutcome:
    """Train once at ``rate`` and measure the K-FAC Fisher norm with every unit active."""
    tcfg = replace(cfg.train, seed=trial_seed(cfg.seed, trial), dropout_rate=rate)
    start = time.perf_counter()
    try:
        model = fit(train, tcfg).model
    except NumericalError:
        nan = float("nan")
        return TrialOutcome(SweepRow(rate, trial, nan, nan, nan, time.perf_counter() - start, "diverged"))
    probe = train if cfg.fim_on == "train" else test
    norm = fim_norm(kfac_fim(model, probe.features), cfg.norm)
    row = SweepRow(
        rate=rate,
        trial=trial,
        fim_norm=norm,
        test_accuracy=accuracy(model, test),
        train_loss=mean_loss(model, train),
        wall_seconds=time.perf_counter() - start,
    )
    return TrialOutcome(row, model.params)


def _trial_task(args):
    return run_trial(*args).row


def run_sweep(train: Dataset, test: Dataset, cfg: SweepConfig, workers: int = 1) -> list:
    """All (rate, trial) runs, returned in that order whatever the completion order."""
    tasks = [(train, test, cfg, r, t) for r in cfg.rates for t in range(cfg.trials)]
    if workers <= 1:
        return [_trial_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_task, tasks))


def summarize(rows: Sequence[SweepRow]) -> list:
    """Per-rate mean and population std over the trials that finished."""
    out = []
    for rate in sorted({r.rate for r in rows}):
        ok = [r for r in rows if r.rate == rate and r.status == "ok"]
        entry = {"rate": rate, "n_ok": len(ok)}
        for name in ("fim_norm", "test_accuracy", "train_loss"):
            vals = np.array([getattr(r, name) for r in ok])
            entry[f"{name}_mean"] = float(vals.mean()) if ok else float("nan")
            entry[f"{name}_std"] = float(vals.std()) if ok else float("nan")
        out.append(entry)
    return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_rows_csv(rows: Sequence[SweepRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])
    return path


def write_summary_csv(summary: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for e in summary:
            w.writerow([_fmt(e[f]) for f in SUMMARY_FIELDS])
    return path


def read_rows_csv(path) -> list:
    """Parse and validate a sweep CSV against the :class:`SweepRow` schema."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_FIELDS:
            raise FormatError(f"{path}: header {header} does not match {list(CSV_FIELDS)}")
        rows = []
        for i, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_FIELDS):
                raise FormatError(f"{path}:{i}: expected {len(CSV_FIELDS)} fields, got {len(rec)}")
            try:
                row = SweepRow(float(rec[0]), int(rec[1]), *map(float, rec[2:6]), rec[6])
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: {exc}") from exc
            numbers = (row.fim_norm, row.test_accuracy, row.train_loss, row.wall_seconds)
            if row.status == "ok" and not all(math.isfinite(v) for v in numbers):
                raise FormatError(f"{path}:{i}: non-finite value in a row marked ok")
            if row.status not in ("ok", "diverged"):
                raise FormatError(f"{path}:{i}: unknown status {row.status!r}")
            rows.append(row)
    return rows


def svg_plot(summary: Sequence[dict], title: str = "Fisher norm vs dropout rate", ylabel: str = "FIM norm") -> str:
    """Line plot of mean +/- std Fisher norm against the rate, as SVG text."""
    pts = [(e["rate"], e["fim_norm_mean"], e["fim_norm_std"]) for e in summary if e["n_ok"]]
    width, height, pad = 480, 320, 56
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"></svg>\n'
    xs = [p[0] for p in pts]
    lo = min(m - s for _, m, s in pts)
    hi = max(m + s for _, m, s in pts)
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 0.05, x1 + 0.05
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    margin = 0.05 * (hi - lo)
    lo, hi = lo - margin, hi + margin

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for x in xs:
        parts.append(f'<line x1="{sx(x):.1f}" y1="{height - pad}" x2="{sx(x):.1f}" y2="{height - pad + 4}" stroke="black"/>')
        parts.append(f'<text x="{sx(x):.1f}" y="{height - pad + 16}" text-anchor="middle">{x:g}</text>')
    for y in np.linspace(lo, hi, 5):
        parts.append(f'<line x1="{pad - 4}" y1="{sy(y):.1f}" x2="{pad}" y2="{sy(y):.1f}" stroke="black"/>')
        parts.append(f'<text x="{pad - 6}" y="{sy(y) + 4:.1f}" text-anchor="end">{y:.3g}</text>')
    parts.append(f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">dropout rate</text>')
    parts.append(
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {height / 2:.1f})">{ylabel}</text>'
    )
    for x, m, s in pts:
        parts.append(f'<line x1="{sx(x):.1f}" y1="{sy(m - s):.1f}" x2="{sx(x):.1f}" y2="{sy(m + s):.1f}" stroke="#888"/>')
    line = " ".join(f"{sx(x):.1f},{sy(m):.1f}" for x, m, _ in pts)
    parts.append(f'<polyline points="{line}" fill="none" stroke="#1f5fa8" stroke-width="2"/>')
    for x, m, _ in pts:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(m):.1f}" r="3" fill="#1f5fa8"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def sweep_metadata(cfg: SweepConfig, train: Dataset, test: Dataset, source: dict, workers: int) -> dict:
    return {
        "rates": list(cfg.rates),
        "trials": cfg.trials,
        "seed": cfg.seed,
        "trial_seeds": [trial_seed(cfg.seed, t) for t in range(cfg.trials)],
        "norm": cfg.norm,
        "fim": {
            "estimator": "kfac",
            "labels": "exact class expectation",
            "inputs": cfg.fim_on,
            "masks": "off (all units active at measurement)",
            "chunking": "single pass over all inputs",
        },
        "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg.train).items() if k != "phi"},
        "data": {
            **source,
            "n_train": len(train),
            "n_test": len(test),
            "dim": train.dim,
            "preprocessing": "pixels scaled to [0, 1], flattened; no centring",
        },
        "workers": workers,
        "std": "population (ddof=0)",
    }


def write_sweep(out_dir, rows, cfg: SweepConfig, train: Dataset, test: Dataset, source: dict, workers: int = 1) -> dict:
    """Write ``sweep.csv``, ``sweep_summary.csv``, ``sweep.svg`` and ``sweep_meta.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    paths = {
        "csv": write_rows_csv(rows, out / "sweep.csv"),
        "summary": write_summary_csv(summary, out / "sweep_summary.csv"),
        "svg": out / "sweep.svg",
        "meta": out / "sweep_meta.json",
    }
    paths["svg"].write_text(svg_plot(summary, ylabel=f"FIM {cfg.norm} norm"))
    meta = sweep_metadata(cfg, train, test, source, workers)
    paths["meta"].write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return paths


def sweep_shape(summary: Sequence[dict]) -> dict:
    """Where the mean Fisher norm bottoms out, and how it compares to no dropout."""
    means = {e["rate"]: e["fim_norm_mean"] for e in summary if e["n_ok"]}
    best = min(means, key=means.get)
    base = means.get(0.0)
    return {
        "argmin_rate": best,
        "means": means,
        "below_no_dropout": {r: (base is not None and m < base) for r, m in means.items() if r != 0.0},
    }
