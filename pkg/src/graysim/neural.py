"""Small feedforward networks used as device macromodels.

The whole point of these models is that the solver can pull two things out
of them at every Newton iteration: the predicted device output (a forward
pass) and the sensitivity of that output to the shared state variables (the
input Jacobian, computed analytically layer by layer). Networks are tiny and
fixed-topology, so a hand-rolled backward pass beats dragging in an autodiff
framework and keeps the Jacobian extraction explicit.

Models carry their own affine input/output normalization: device quantities
span many decades (amps from 1e-12 to 1e-1) and the solver always talks to
the model in raw physical units.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyDatasetError,
    ModelFormatError,
    NonFiniteLossError,
)

MODEL_MAGIC = b"GSNN"
MODEL_VERSION = 1


class Activation(IntEnum):
    """Element-wise layer activations. Values are the on-disk tags."""

    IDENTITY = 0
    SOFTPLUS = 1
    TANH = 2
    SQUARE = 3


def _activate(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == Activation.IDENTITY:
        return a
    if kind == Activation.SOFTPLUS:
        # ln(1+e^a) in the overflow-safe form
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    if kind == Activation.TANH:
        return np.tanh(a)
    if kind == Activation.SQUARE:
        return a * a
    raise ValueError(f"unknown activation {kind!r}")


def _activate_deriv(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == Activation.IDENTITY:
        return np.ones_like(a)
    if kind == Activation.SOFTPLUS:
        # logistic sigmoid, overflow-safe
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out
    if kind == Activation.TANH:
        t = np.tanh(a)
        return 1.0 - t * t
    if kind == Activation.SQUARE:
        return 2.0 * a
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionMismatchError("layer weight must be 2-d, bias 1-d")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionMismatchError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )


@dataclass
class Mlp:
    """Feedforward net with affine input/output normalization attached.

    Normalized input is (x - input_offset) / input_scale; the raw output is
    output_offset + output_scale * (last layer output).
    """

    layers: list[Layer]
    input_offset: np.ndarray
    input_scale: np.ndarray
    output_offset: np.ndarray
    output_scale: np.ndarray

    def __post_init__(self):
        if not self.layers:
            raise DimensionMismatchError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise DimensionMismatchError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.input_offset = np.asarray(self.input_offset, dtype=float)
        self.input_scale = np.asarray(self.input_scale, dtype=float)
        self.output_offset = np.asarray(self.output_offset, dtype=float)
        self.output_scale = np.asarray(self.output_scale, dtype=float)
        if self.input_offset.shape != (self.input_dim,) or self.input_scale.shape != (
            self.input_dim,
        ):
            raise DimensionMismatchError("input normalization must match input_dim")
        if self.output_offset.shape != (
            self.output_dim,
        ) or self.output_scale.shape != (self.output_dim,):
            raise DimensionMismatchError("output normalization must match output_dim")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]


@dataclass
class Dataset:
    inputs: np.ndarray  # (samples, input_dim)
    targets: np.ndarray  # (samples, output_dim)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionMismatchError(
                f"{self.inputs.shape[0]} inputs vs {self.targets.shape[0]} targets"
            )
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise DimensionMismatchError("dataset contains non-finite entries")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "mse"  # "mse" or "mae"
    grad_clip: float = 10.0  # global-norm cap; squares/softplus can spike early

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"unknown loss {self.loss!r}")


def init_mlp(dims: list[int], activations: list[Activation], seed: int = 0) -> Mlp:
    """Fresh network with identity normalization.

    Glorot-uniform init for tanh/identity/square layers, He-normal for
    softplus (its positive half behaves like a ReLU at scale).
    """
    if len(activations) != len(dims) - 1:
        raise DimensionMismatchError(
            f"{len(dims) - 1} layers declared but {len(activations)} activations"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        if act == Activation.SOFTPLUS:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    n_in, n_out = dims[0], dims[-1]
    return Mlp(
        layers,
        input_offset=np.zeros(n_in),
        input_scale=np.ones(n_in),
        output_offset=np.zeros(n_out),
        output_scale=np.ones(n_out),
    )


# Architectures used by the bundled device macromodels. Hidden widths are a
# project choice; inputs/outputs follow each device's terminal layout.
PRESETS = {
    # diode: V -> I
    "diode": ([1, 16, 16, 16, 1],
              [Activation.SOFTPLUS] * 3 + [Activation.IDENTITY]),
    # mosfet: (V_GS, V_DS) -> I_DS
    "mosfet": ([2, 32, 32, 32, 1],
               [Activation.SOFTPLUS] * 3 + [Activation.IDENTITY]),
    # pq forecaster: 4 exogenous features -> (P, Q)
    "pq_forecaster": ([4, 32, 32, 32, 2],
                      [Activation.TANH] * 3 + [Activation.IDENTITY]),
    # motor one-step map: (v_r, v_i, i_r[t-1], i_i[t-1]) -> (i_r, i_i)
    "motor": ([4, 24, 24, 2],
              [Activation.SQUARE, Activation.SQUARE, Activation.IDENTITY]),
    # composite load: (v_r, v_i) -> (i_r, i_i)
    "composite": ([2, 32, 32, 32, 2],
                  [Activation.TANH] * 3 + [Activation.IDENTITY]),
}


def preset_mlp(name: str, seed: int = 0) -> Mlp:
    try:
        dims, acts = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None
    return init_mlp(dims, acts, seed=seed)


def _forward_batch(net: Mlp, x: np.ndarray) -> np.ndarray:
    """(n, input_dim) -> (n, output_dim) in raw units."""
    h = (x - net.input_offset) / net.input_scale
    for layer in net.layers:
        h = _activate(layer.activation, h @ layer.weight.T + layer.bias)
    return net.output_offset + net.output_scale * h


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the net on one raw-unit input vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise DimensionMismatchError(
            f"input shape {x.shape} != ({net.input_dim},)"
        )
    return _forward_batch(net, x[None, :])[0]


def input_jacobian(net: Mlp, x) -> np.ndarray:
    """d(output)/d(input) at x, shape (output_dim, input_dim).

    Chain rule through the layers: J = S_out . W_L . D_{L-1} ... D_1 . W_1 . S_in
    with D_k the diagonal of activation derivatives at the pre-activations
    and S_in/S_out the normalization scalings. No finite differences.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise DimensionMismatchError(f"input shape {x.shape} != ({net.input_dim},)")
    h = (x - net.input_offset) / net.input_scale
    jac = np.diag(1.0 / net.input_scale)
    for layer in net.layers:
        pre = layer.weight @ h + layer.bias
        jac = (_activate_deriv(layer.activation, pre)[:, None] * layer.weight) @ jac
        h = _activate(layer.activation, pre)
    return net.output_scale[:, None] * jac


def _loss_and_grad(loss: str, pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    n = diff.size
    if loss == "mse":
        return float(np.mean(diff * diff)), (2.0 / n) * diff
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


def train(net: Mlp, data: Dataset, cfg: TrainConfig) -> tuple[Mlp, list[float]]:
    """Adam mini-batch training. Returns (trained copy, per-epoch loss).

    Input/output normalization is (re)fit to the dataset statistics before
    the first step, so the returned model accepts and emits raw units. The
    reported loss is computed in normalized space. With a fixed seed the
    result is bit-reproducible on one platform.
    """
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if data.inputs.shape[1] != net.input_dim or data.targets.shape[1] != net.output_dim:
        raise DimensionMismatchError(
            f"dataset dims {data.inputs.shape[1]}->{data.targets.shape[1]} vs "
            f"model {net.input_dim}->{net.output_dim}"
        )
    net = copy.deepcopy(net)
    net.input_offset = data.inputs.mean(axis=0)
    net.input_scale = np.maximum(data.inputs.std(axis=0), 1e-12)
    net.output_offset = data.targets.mean(axis=0)
    net.output_scale = np.maximum(data.targets.std(axis=0), 1e-12)

    x_all = (data.inputs - net.input_offset) / net.input_scale
    t_all = (data.targets - net.output_offset) / net.output_scale

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = [p for layer in net.layers for p in (layer.weight, layer.bias)]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]

    # transient overflow in a square/softplus layer is handled via the
    # non-finite-loss path, not a warning flood
    prev_err = np.seterr(over="ignore", invalid="ignore")
    try:
        return _train_loop(net, cfg, x_all, t_all, rng, params, m, v)
    finally:
        np.seterr(**prev_err)


def _train_loop(net, cfg, x_all, t_all, rng, params, m, v):
    step = 0
    history: list[float] = []
    last_finite = copy.deepcopy(net)
    n = x_all.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, tb = x_all[idx], t_all[idx]

            # forward, keeping pre-activations for the backward sweep
            acts = [xb]
            pres = []
            h = xb
            for layer in net.layers:
                pre = h @ layer.weight.T + layer.bias
                pres.append(pre)
                h = _activate(layer.activation, pre)
                acts.append(h)
            loss, dh = _loss_and_grad(cfg.loss, h, tb)
            epoch_loss += loss
            n_batches += 1
            if not np.isfinite(loss):
                continue  # skip the update; the epoch check below reports it

            grads = []
            for li in range(len(net.layers) - 1, -1, -1):
                layer = net.layers[li]
                dpre = dh * _activate_deriv(layer.activation, pres[li])
                grads.append((dpre.T @ acts[li], dpre.sum(axis=0)))
                if li:
                    dh = dpre @ layer.weight
            grads = [g for pair in reversed(grads) for g in pair]

            if cfg.grad_clip > 0:
                gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if gnorm > cfg.grad_clip:
                    scale = cfg.grad_clip / gnorm
                    grads = [g * scale for g in grads]

            step += 1
            lr_t = cfg.learning_rate * (
                np.sqrt(1.0 - cfg.adam_beta2**step) / (1.0 - cfg.adam_beta1**step)
            )
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= cfg.adam_beta1
                mi += (1.0 - cfg.adam_beta1) * g
                vi *= cfg.adam_beta2
                vi += (1.0 - cfg.adam_beta2) * g * g
                p -= lr_t * mi / (np.sqrt(vi) + cfg.adam_eps)

        mean_loss = epoch_loss / n_batches
        if not np.isfinite(mean_loss):
            raise NonFiniteLossError(
                f"loss became non-finite at epoch {epoch}",
                last_model=last_finite,
                loss_history=history,
            )
        history.append(mean_loss)
        last_finite = copy.deepcopy(net)
    return net, history


def evaluate(net: Mlp, data: Dataset) -> dict[str, float]:
    """Raw-unit MAE and MSE of the net over a dataset."""
    pred = _forward_batch(net, data.inputs)
    diff = pred - data.targets
    return {
        "mae": float(np.mean(np.abs(diff))),
        "mse": float(np.mean(diff * diff)),
    }


# ---------------------------------------------------------------------------
# Serialization. Little-endian binary; layout documented in docs/model_format.md.
# ---------------------------------------------------------------------------


def save_model(net: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIII", MODEL_VERSION, net.input_dim, net.output_dim,
                             len(net.layers)))
        for layer in net.layers:
            rows, cols = layer.weight.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(layer.weight.astype("<f8").tobytes())
            fh.write(layer.bias.astype("<f8").tobytes())
            fh.write(struct.pack("<B", int(layer.activation)))
        for vec in (net.input_offset, net.input_scale,
                    net.output_offset, net.output_scale):
            fh.write(vec.astype("<f8").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return buf


def load_model(path) -> Mlp:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MODEL_MAGIC:
            raise ModelFormatError("bad magic; not a model file")
        version, n_in, n_out, n_layers = struct.unpack(
            "<IIII", _read_exact(fh, 16, "header")
        )
        if version != MODEL_VERSION:
            raise ModelFormatError(
                f"unsupported model format version {version} (expected {MODEL_VERSION})"
            )
        if n_layers == 0:
            raise ModelFormatError("model file declares zero layers")
        layers = []
        for li in range(n_layers):
            rows, cols = struct.unpack("<II", _read_exact(fh, 8, f"layer {li} shape"))
            w = np.frombuffer(
                _read_exact(fh, 8 * rows * cols, f"layer {li} weights"), dtype="<f8"
            ).reshape(rows, cols).copy()
            b = np.frombuffer(
                _read_exact(fh, 8 * rows, f"layer {li} biases"), dtype="<f8"
            ).copy()
            (tag,) = struct.unpack("<B", _read_exact(fh, 1, f"layer {li} activation"))
            try:
                act = Activation(tag)
            except ValueError:
                raise ModelFormatError(f"unknown activation tag {tag}") from None
            layers.append(Layer(w, b, act))
        vecs = []
        for name, dim in (("input_offset", n_in), ("input_scale", n_in),
                          ("output_offset", n_out), ("output_scale", n_out)):
            vecs.append(np.frombuffer(
                _read_exact(fh, 8 * dim, name), dtype="<f8").copy())
        extra = fh.read(1)
    if extra:
        raise ModelFormatError("trailing bytes after model payload")
    net = Mlp(layers, *vecs)
    if net.input_dim != n_in or net.output_dim != n_out:
        raise ModelFormatError(
            f"header dims {n_in}->{n_out} disagree with layers "
            f"{net.input_dim}->{net.output_dim}"
        )
    return net
