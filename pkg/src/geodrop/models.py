"""Multilayer perceptron with softmax output, manual backprop and dropout masks.

Parameters are addressed through one flat vector ``theta``: for each layer the
weight matrix (shape ``(n_in, n_out)``, row-major) followed by its bias. A
dropout submanifold is the set of ``theta`` with some coordinates pinned to
zero, represented by a :class:`DropoutMask`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import DegenerateMaskError, FormatError, NumericalError, ShapeError
from .numerics import Rng, make_rng

ACTIVATIONS = ("relu", "sigmoid")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else sigmoid(z)


def _act_deriv(name, z, h):
    # h is act(z), already computed
    return (z > 0.0).astype(z.dtype) if name == "relu" else h * (1.0 - h)


# ---------------------------------------------------------------------------
# model and masks
# ---------------------------------------------------------------------------

@dataclass
class MlpModel:
    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for l, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            if self.weights[l].shape != (n_in, n_out) or self.biases[l].shape != (n_out,):
                raise ShapeError(f"layer {l} parameters do not match sizes {n_in}->{n_out}")

    @classmethod
    def zeros(cls, layer_sizes, activation="relu"):
        sizes = tuple(layer_sizes)
        return cls(
            sizes,
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
            activation,
        )

    @classmethod
    def init(cls, layer_sizes, rng: Rng, activation="relu"):
        """Glorot-uniform weights, zero biases."""
        model = cls.zeros(layer_sizes, activation)
        for w in model.weights:
            bound = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        return model

    @classmethod
    def from_params(cls, layer_sizes, theta, activation="relu"):
        return cls.zeros(layer_sizes, activation).with_params(theta)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layer_slices(self):
        """(weight slice, bias slice) into the flat parameter vector, per layer."""
        out, start = [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(start, start + n_in * n_out)
            b = slice(w.stop, w.stop + n_out)
            out.append((w, b))
            start = b.stop
        return out

    @property
    def params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def with_params(self, theta) -> "MlpModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        ws, bs = [], []
        for (sw, sb), w in zip(self.layer_slices(), self.weights):
            ws.append(theta[sw].reshape(w.shape).copy())
            bs.append(theta[sb].copy())
        return MlpModel(self.layer_sizes, ws, bs, self.activation)


@dataclass(frozen=True)
class DropoutMask:
    """Boolean inclusion pattern over the flat parameter vector (False = pinned to 0)."""

    kept: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kept", np.asarray(self.kept, dtype=bool).ravel())

    @classmethod
    def full(cls, model: MlpModel) -> "DropoutMask":
        return cls(np.ones(model.n_params, dtype=bool))

    @classmethod
    def from_dropped(cls, model: MlpModel, dropped) -> "DropoutMask":
        kept = np.ones(model.n_params, dtype=bool)
        kept[np.asarray(dropped, dtype=int)] = False
        return cls(kept)

    def __len__(self):
        return self.kept.size

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())

    def apply(self, theta) -> np.ndarray:
        return np.where(self.kept, theta, 0.0)


def _check_mask(model, mask):
    if mask is None:
        return None
    if len(mask) != model.n_params:
        raise ShapeError(f"mask has length {len(mask)}, model has {model.n_params} parameters")
    return mask


def output_bias_slice(model: MlpModel) -> slice:
    return model.layer_slices()[-1][1]


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _masked(model, mask):
    return model if mask is None else model.with_params(mask.apply(model.params))


def _forward_pass(model, x, unit_scales=None):
    """Return (pre-activations, layer inputs) for a batch ``x``.

    ``unit_scales`` optionally multiplies each hidden layer's activations
    (used for stochastic dropout); one array per hidden layer, broadcastable
    to ``(N, width)``.
    """
    inputs, pre, acts = [x], [], []
    a = x
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        pre.append(z)
        if l < model.n_layers - 1:
            h = _act(model.activation, z)
            acts.append(h)
            a = h if unit_scales is None else h * unit_scales[l]
            inputs.append(a)
    return pre, inputs, acts


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.layer_sizes[0]:
        raise ShapeError(f"input has {x.shape[1]} features, model expects {model.layer_sizes[0]}")
    return x, single


def logits(model: MlpModel, x, mask: Optional[DropoutMask] = None) -> np.ndarray:
    x, single = _as_batch(model, x)
    z = _forward_pass(_masked(model, _check_mask(model, mask)), x)[0][-1]
    return z[0] if single else z


def forward(model: MlpModel, x, mask: Optional[DropoutMask] = None) -> np.ndarray:
    """Class probabilities ``p(y|x; theta)`` with masked coordinates treated as 0."""
    return softmax(logits(model, x, mask))


def backprop(model, x, out_err, unit_scales=None, cache=None):
    """Per-example parameter gradients given output-layer error signals.

    ``out_err`` has shape ``(N, K)`` and is the derivative of the per-example
    objective with respect to the output logits. Returns ``(N, n_params)``.
    """
    pre, inputs, acts = cache if cache is not None else _forward_pass(model, x, unit_scales)
    n = x.shape[0]
    grads = np.empty((n, model.n_params))
    delta = out_err
    for l in range(model.n_layers - 1, -1, -1):
        sw, sb = model.layer_slices()[l]
        a = inputs[l]
        grads[:, sw] = (a[:, :, None] * delta[:, None, :]).reshape(n, -1)
        grads[:, sb] = delta
        if l > 0:
            back = delta @ model.weights[l].T
            if unit_scales is not None:
                back = back * unit_scales[l - 1]
            delta = back * _act_deriv(model.activation, pre[l - 1], acts[l - 1])
    return grads


def _mean_grad(model, x, out_err, unit_scales=None, cache=None):
    """Gradient of the batch mean, without forming per-example gradients."""
    pre, inputs, acts = cache if cache is not None else _forward_pass(model, x, unit_scales)
    parts = [None] * (2 * model.n_layers)
    delta = out_err / x.shape[0]
    for l in range(model.n_layers - 1, -1, -1):
        parts[2 * l] = (inputs[l].T @ delta).ravel()
        parts[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            back = delta @ model.weights[l].T
            if unit_scales is not None:
                back = back * unit_scales[l - 1]
            delta = back * _act_deriv(model.activation, pre[l - 1], acts[l - 1])
    return np.concatenate(parts)


def _loss_grad(model, x, y, mask=None, unit_scales=None):
    cache = _forward_pass(model, x, unit_scales)
    z = cache[0][-1]
    logp = log_softmax(z)
    loss = -float(np.mean(logp[np.arange(y.size), y]))
    err = np.exp(logp)
    err[np.arange(y.size), y] -= 1.0
    grad = _mean_grad(model, x, err, unit_scales, cache)
    if mask is not None:
        grad = np.where(mask.kept, grad, 0.0)
    return loss, grad


def loss_and_grad(model: MlpModel, x, y, mask: Optional[DropoutMask] = None):
    """Mean cross-entropy over the batch and its exact gradient.

    Masked coordinates are evaluated at zero and receive zero gradient.
    """
    x, _ = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    mask = _check_mask(model, mask)
    return _loss_grad(_masked(model, mask), x, y, mask)


def accuracy(model: MlpModel, data: Dataset, mask=None) -> float:
    z = logits(model, data.features, mask)
    return float(np.mean(np.argmax(z, axis=1) == data.labels))


def mean_loss(model: MlpModel, data: Dataset, mask=None) -> float:
    z = logits(model, data.features, mask)
    return -float(np.mean(log_softmax(z)[np.arange(len(data)), data.labels]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters.

    ``dropout_rate`` is only used by stochastic-dropout training; projection
    training pins coordinates with an explicit mask instead. ``dropout_mode``
    is ``"example"`` (independent unit masks per example, the usual practice)
    or ``"batch"`` (one unit mask shared by the whole minibatch).
    """

    lr: float = 0.1
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0
    hidden: tuple = (100,)
    activation: str = "relu"
    l2: float = 0.0
    phi: object = None
    dropout_rate: float = 0.0
    dropout_mode: str = "example"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.dropout_mode not in ("example", "batch"):
            raise ValueError(f"unknown dropout mode {self.dropout_mode!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def layer_sizes(self, data: Dataset) -> tuple:
        return (data.dim,) + self.hidden + (data.n_classes,)


@dataclass
class TrainResult:
    model: MlpModel
    losses: list = field(default_factory=list)  # per minibatch step

    @property
    def params(self) -> np.ndarray:
        return self.model.params

    def epoch_means(self, n_epochs: int) -> np.ndarray:
        return np.array([np.mean(c) for c in np.array_split(np.asarray(self.losses), n_epochs)])


def _sgd(data: Dataset, cfg: TrainConfig, mask=None, model=None, extra_grad=None, step_hook=None):
    """Shared minibatch SGD loop.

    Random streams: key 0 drives initialisation and shuffling, key 1 drives
    stochastic dropout. Keeping them apart means that a zero dropout rate
    reproduces plain training exactly.
    """
    rng = make_rng(cfg.seed, 0)
    drop_rng = make_rng(cfg.seed, 1)
    if model is None:
        model = MlpModel.init(cfg.layer_sizes(data), rng, cfg.activation)
    mask = _check_mask(model, mask)
    theta = model.params if mask is None else mask.apply(model.params)
    template = model
    losses = []
    p = cfg.dropout_rate
    n = len(data)

    if mask is not None and mask.n_kept == 0:
        model = template.with_params(theta)
        losses.append(mean_loss(model, data))
        return TrainResult(model, losses)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = data.features[idx], data.labels[idx]
            current = template.with_params(theta)
            scales = None
            if p > 0.0:
                scales = []
                for width in template.layer_sizes[1:-1]:
                    shape = (idx.size, width) if cfg.dropout_mode == "example" else (1, width)
                    scales.append((drop_rng.random(shape) >= p) / (1.0 - p))
            # overflow surfaces as a non-finite loss or gradient, checked below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = _loss_grad(current, x, y, mask, scales)
            if cfg.l2 > 0.0:
                loss += 0.5 * cfg.l2 * float(theta @ theta)
                grad = grad + cfg.l2 * theta
            if extra_grad is not None:
                val, g = extra_grad(theta, x, y)
                loss += val
                grad = grad + g
            if mask is not None:
                grad = np.where(mask.kept, grad, 0.0)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericalError(f"training diverged after {len(losses)} steps", state=theta)
            losses.append(loss)
            theta = theta - cfg.lr * grad
            if step_hook is not None:
                step_hook(theta)
    return TrainResult(template.with_params(theta), losses)


def fit(data: Dataset, cfg: TrainConfig, mask: Optional[DropoutMask] = None, model=None) -> TrainResult:
    """Train with an optional fixed mask and the stochastic dropout in ``cfg``."""
    return _sgd(data, cfg, mask=mask, model=model)


def train_projection(data: Dataset, mask: Optional[DropoutMask], cfg: TrainConfig, model=None) -> np.ndarray:
    """Cross-entropy projection of the data onto a masked submanifold.

    Plain SGD restricted to the kept coordinates; returns the flat parameter
    vector, exactly zero on masked coordinates. Stochastic dropout in ``cfg``
    is ignored here.
    """
    cfg = replace(cfg, dropout_rate=0.0)
    return _sgd(data, cfg, mask=mask, model=model).params


# ---------------------------------------------------------------------------
# mask sampling
# ---------------------------------------------------------------------------

def unit_mask(model: MlpModel, dropped_units: Sequence[np.ndarray]) -> DropoutMask:
    """Mask removing the given hidden units (one boolean array per hidden layer).

    A dropped unit loses its incoming weights, its bias and its outgoing weights.
    """
    kept = np.ones(model.n_params, dtype=bool)
    slices = model.layer_slices()
    for l, drop in enumerate(dropped_units):
        drop = np.asarray(drop, dtype=bool)
        n_in, n_out = model.layer_sizes[l], model.layer_sizes[l + 1]
        sw, sb = slices[l]
        sw_next = slices[l + 1][0]
        # basic slices are views, so these writes land in `kept`
        kept[sw].reshape(n_in, n_out)[:, drop] = False
        kept[sb][drop] = False
        kept[sw_next].reshape(n_out, model.layer_sizes[l + 2])[drop, :] = False
    return DropoutMask(kept)


def sample_masks(model: MlpModel, p: float, n_masks: int, rng: Rng, scheme: str = "unit") -> list:
    """Draw ``n_masks`` dropout masks at rate ``p``.

    ``unit`` drops whole hidden units; ``coordinate`` drops individual
    parameters. Output biases are never dropped. A draw that empties a hidden
    layer is redrawn, up to 100 times.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if scheme not in ("unit", "coordinate"):
        raise ValueError(f"unknown mask scheme {scheme!r}")
    out_bias = output_bias_slice(model)
    hidden = model.layer_sizes[1:-1]
    masks = []
    for _ in range(n_masks):
        for _attempt in range(100):
            if scheme == "unit":
                dropped = [rng.random(w) < p for w in hidden]
                if all(not d.all() for d in dropped):
                    masks.append(unit_mask(model, dropped))
                    break
            else:
                kept = rng.random(model.n_params) >= p
                kept[out_bias] = True
                if _hidden_layers_alive(model, kept):
                    masks.append(DropoutMask(kept))
                    break
        else:
            raise DegenerateMaskError(f"rate {p} keeps producing an all-dropped layer")
    return masks


def _hidden_layers_alive(model, kept) -> bool:
    for l, (sw, _) in enumerate(model.layer_slices()[:-1]):
        if not kept[sw].any():
            return False
    return True


def enumerate_unit_masks(model: MlpModel, cap: int = 2**10) -> list:
    """Every unit-dropout pattern (excluding empty layers) for toy models."""
    hidden = model.layer_sizes[1:-1]
    total = 2 ** sum(hidden)
    if total > cap:
        raise ValueError(f"{total} unit patterns exceed the enumeration cap {cap}")
    masks = []
    for code in range(total):
        bits = np.array([(code >> i) & 1 for i in range(sum(hidden))], dtype=bool)
        dropped = np.split(bits, np.cumsum(hidden)[:-1])
        if any(d.all() for d in dropped):
            continue
        masks.append(unit_mask(model, dropped))
    return masks


def bernoulli_log_likelihood(model: MlpModel, mask: DropoutMask, p: float) -> float:
    """Log-probability of a unit mask under independent Bernoulli(p) unit drops."""
    slices = model.layer_slices()
    n_drop = n_keep = 0
    for l, width in enumerate(model.layer_sizes[1:-1]):
        bias_kept = mask.kept[slices[l][1]]
        n_keep += int(bias_kept.sum())
        n_drop += int(width - bias_kept.sum())
    if p == 0.0:
        return 0.0 if n_drop == 0 else -math.inf
    return n_drop * math.log(p) + n_keep * math.log1p(-p)


# ---------------------------------------------------------------------------
# chart diagnostics
# ---------------------------------------------------------------------------

def jacobian_rank(model: MlpModel, inputs, rtol: float = 1e-8) -> int:
    """Numerical rank of the parameter Jacobian of a single sigmoid unit.

    The model must have layer sizes ``(n, 1)``; its output is
    ``sigmoid(x @ w + b)``. Rows of the Jacobian are
    ``y(1-y) * (1, x_1, ..., x_n)`` for each input.
    """
    if model.layer_sizes[-1] != 1 or model.n_layers != 1:
        raise ShapeError("jacobian_rank expects a single-unit, single-layer model")
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = sigmoid(x @ model.weights[0][:, 0] + model.biases[0][0])
    jac = (y * (1.0 - y))[:, None] * np.hstack([np.ones((x.shape[0], 1)), x])
    s = np.linalg.svd(jac, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GDRP"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: MlpModel, path) -> None:
    """Little-endian binary: magic, u32 version, u32 size count, u32 sizes, f64 params."""
    sizes = model.layer_sizes
    header = CHECKPOINT_MAGIC + struct.pack(f"<II{len(sizes)}I", CHECKPOINT_VERSION, len(sizes), *sizes)
    Path(path).write_bytes(header + model.params.astype("<f8").tobytes())


def load_checkpoint(path, activation: str = "relu") -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a geodrop checkpoint")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        sizes = struct.unpack_from(f"<{count}I", raw, 12)
        offset = 12 + 4 * count
        theta = np.frombuffer(raw, dtype="<f8", offset=offset)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated checkpoint") from exc
    model = MlpModel.zeros(sizes, activation)
    if theta.size != model.n_params:
        raise FormatError(f"{path}: expected {model.n_params} parameters, found {theta.size}")
    return model.with_params(theta.astype(np.float64))
