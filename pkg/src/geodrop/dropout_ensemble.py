"""Dropout as an ensemble of projections onto masked submanifolds.

Each member is the cross-entropy projection of the training data onto the
submanifold where one dropout mask pins its parameters to zero. Members are
combined two ways: by averaging their parameter vectors, and by
alpha-integrating their predictive distributions. The two agree when the
model family is flat in the matching coordinates.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .errors import FormatError, GeodropError, NumericalError
from .mixtures import alpha_integrate, as_weights, uniform_weights
from .models import (
    DropoutMask,
    MlpModel,
    TrainConfig,
    bernoulli_log_likelihood,
    forward,
    log_softmax,
    logits,
    sample_masks,
    softmax,
    train_projection,
)
from .numerics import Rng

Trainer = Callable[[Dataset, Optional[DropoutMask], TrainConfig, Optional[MlpModel]], np.ndarray]

RECONSTRUCTION_TOL = 1e-12
REPORT_VERSION = 1


@dataclass(frozen=True)
class EnsembleSpec:
    """How to build a dropout ensemble.

    ``rate`` is either one dropout rate for every member or a per-member
    schedule of rates, which controls how large each submanifold is.
    ``weighting`` is ``uniform`` (or explicit ``weights``) or ``likelihood``,
    which weights each mask by its probability under Bernoulli unit dropout.
    """

    n_masks: int = 4
    rate: Union[float, Sequence[float]] = 0.5
    scheme: str = "unit"
    alpha: float = 1.0
    weights: Optional[Sequence[float]] = None
    weighting: str = "uniform"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.n_masks < 1:
            raise ValueError("an ensemble needs at least one member")
        if self.weighting not in ("uniform", "likelihood"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.weights is not None:
            if self.weighting != "uniform":
                raise ValueError("explicit weights and likelihood weighting are exclusive")
            as_weights(self.weights, self.n_masks)
        rates = self.rates
        if len(rates) != self.n_masks or not all(0.0 <= r < 1.0 for r in rates):
            raise ValueError(f"need {self.n_masks} rates in [0, 1), got {rates}")

    @property
    def rates(self) -> tuple:
        if np.isscalar(self.rate):
            return (float(self.rate),) * self.n_masks
        return tuple(float(r) for r in self.rate)


@dataclass
class Metrics:
    loss: float
    accuracy: float


@dataclass
class EnsembleResult:
    layer_sizes: tuple
    activation: str
    alpha: float
    weights: np.ndarray
    members: np.ndarray  # (K, P)
    kept: np.ndarray  # (K, P) bool
    theta_d: np.ndarray
    member_metrics: list
    averaged: Metrics
    integrated: Metrics
    erm: Optional[Metrics] = None
    integration: str = ""

    def template(self) -> MlpModel:
        return MlpModel.zeros(self.layer_sizes, self.activation)

    def reconstruction_error(self) -> float:
        return float(np.abs(self.weights @ self.members - self.theta_d).max())

    def to_dict(self) -> dict:
        d = {
            "version": REPORT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "alpha": self.alpha,
            "integration": self.integration,
            "weights": self.weights.tolist(),
            "members": self.members.tolist(),
            "kept": self.kept.astype(int).tolist(),
            "theta_d": self.theta_d.tolist(),
            "member_metrics": [asdict(m) for m in self.member_metrics],
            "averaged": asdict(self.averaged),
            "integrated": asdict(self.integrated),
            "erm": None if self.erm is None else asdict(self.erm),
        }
        if self.erm is not None:
            d["loss_delta_vs_erm"] = {
                "averaged": self.averaged.loss - self.erm.loss,
                "integrated": self.integrated.loss - self.erm.loss,
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EnsembleResult":
        try:
            d = json.loads(text)
            result = cls(
                layer_sizes=tuple(d["layer_sizes"]),
                activation=d["activation"],
                alpha=float(d["alpha"]),
                weights=np.asarray(d["weights"], dtype=np.float64),
                members=np.asarray(d["members"], dtype=np.float64),
                kept=np.asarray(d["kept"], dtype=bool),
                theta_d=np.asarray(d["theta_d"], dtype=np.float64),
                member_metrics=[Metrics(**m) for m in d["member_metrics"]],
                averaged=Metrics(**d["averaged"]),
                integrated=Metrics(**d["integrated"]),
                erm=None if d["erm"] is None else Metrics(**d["erm"]),
                integration=d.get("integration", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed ensemble report: {exc}") from exc
        if result.reconstruction_error() > RECONSTRUCTION_TOL:
            raise FormatError("ensemble report: theta_d is not the weighted average of its members")
        return result


def _mask_weights(spec: EnsembleSpec, template: MlpModel, masks) -> np.ndarray:
    if spec.weighting == "likelihood":
        logw = np.array([bernoulli_log_likelihood(template, m, r) for m, r in zip(masks, spec.rates)])
        w = np.exp(logw - logw.max())
        return w / w.sum()
    if spec.weights is not None:
        return np.asarray(spec.weights, dtype=np.float64)
    return uniform_weights(spec.n_masks)


def _draw_masks(spec: EnsembleSpec, template: MlpModel, rng: Rng) -> list:
    masks = []
    for r in spec.rates:
        if r == 0.0:
            masks.append(DropoutMask.full(template))
        else:
            masks.append(sample_masks(template, r, 1, rng, spec.scheme)[0])
    return masks


def _annotated(err: GeodropError, k: int) -> GeodropError:
    msg = f"ensemble member {k}: {err}"
    new = type(err)(msg, state=err.state) if isinstance(err, NumericalError) else type(err)(msg)
    new.member = k
    return new


def predict_integrated(template: MlpModel, members, x, w=None, alpha: float = 1.0) -> np.ndarray:
    """Alpha-integrated predictive distribution of the members at inputs ``x``.

    Returns one categorical per row of ``x``. At ``alpha = 1`` the normalised
    geometric mean is formed from log-probabilities, which avoids underflow
    for confident members.
    """
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0:
        raise ValueError("predict_integrated needs at least one member")
    w = uniform_weights(len(members)) if w is None else as_weights(w, len(members))
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if np.count_nonzero(w) == 1:
        out = forward(template.with_params(members[np.flatnonzero(w)[0]]), x)
    elif alpha == 1.0:
        logp = sum(wk * log_softmax(logits(template.with_params(th), x)) for wk, th in zip(w, members))
        out = softmax(logp)
    else:
        probs = np.stack([forward(template.with_params(th), x) for th in members], axis=1)
        out = np.array([alpha_integrate(row / row.sum(axis=1, keepdims=True), w, alpha) for row in probs])
    return out[0] if single else out


def _metrics(probs, labels) -> Metrics:
    picked = np.maximum(probs[np.arange(len(labels)), labels], np.finfo(float).tiny)
    return Metrics(float(-np.mean(np.log(picked))), float(np.mean(np.argmax(probs, 1) == labels)))


def total_variation(p, q) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def flatness_gap(template: MlpModel, members, w, data: Dataset, alpha: float = 1.0) -> float:
    """Mean total variation between the parameter-averaged model and the integrated prediction."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    w = uniform_weights(len(members)) if w is None else as_weights(w, len(members))
    averaged = forward(template.with_params(w @ members), data.features)
    integrated = predict_integrated(template, members, data.features, w, alpha)
    return float(np.mean(total_variation(averaged, integrated)))


def run_ensemble(
    train: Dataset,
    test: Dataset,
    spec: EnsembleSpec,
    rng: Rng,
    trainer: Trainer = None,
    erm_baseline: bool = True,
    workers: int = 1,
) -> EnsembleResult:
    """Train one projection per sampled mask and evaluate both combinations on ``test``.

    Every member starts from the same initialisation (seeded by
    ``spec.train.seed``); only the masks, drawn from ``rng``, differ.
    ``trainer(data, mask, cfg, model) -> theta`` replaces the SGD projection,
    which lets tests stub training out.
    """
    trainer = trainer or train_projection
    cfg = replace(spec.train, dropout_rate=0.0)
    template = MlpModel.zeros(cfg.layer_sizes(train), cfg.activation)
    masks = _draw_masks(spec, template, rng)
    w = _mask_weights(spec, template, masks)

    def member(k):
        try:
            return np.asarray(trainer(train, masks[k], cfg, None), dtype=np.float64)
        except GeodropError as err:
            raise _annotated(err, k) from err

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        members = np.array(list(pool.map(member, range(spec.n_masks))))

    theta_d = w @ members
    labels = test.labels
    member_metrics = [_metrics(forward(template.with_params(th), test.features), labels) for th in members]
    averaged = _metrics(forward(template.with_params(theta_d), test.features), labels)
    integrated = _metrics(predict_integrated(template, members, test.features, w, spec.alpha), labels)
    erm = None
    if erm_baseline:
        theta_erm = np.asarray(trainer(train, None, cfg, None), dtype=np.float64)
        erm = _metrics(forward(template.with_params(theta_erm), test.features), labels)
    return EnsembleResult(
        layer_sizes=template.layer_sizes,
        activation=cfg.activation,
        alpha=spec.alpha,
        weights=w,
        members=members,
        kept=np.array([m.kept for m in masks]),
        theta_d=theta_d,
        member_metrics=member_metrics,
        averaged=averaged,
        integrated=integrated,
        erm=erm,
        integration="log-domain geometric mean" if spec.alpha == 1.0 else "alpha_integrate",
    )
