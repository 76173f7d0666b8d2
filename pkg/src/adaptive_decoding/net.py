"""Small feed-forward networks with hand-written reverse mode and Adam.

Hidden layers use SiLU followed by (inverted) dropout; the output layer is
affine. Inputs may be a single vector or a batch of row vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from adaptive_decoding.exceptions import (
    IncompatibleCheckpointError,
    InvalidInputError,
    TrainingDivergedError,
)

ACTIVATION = "silu"
CHECKPOINT_MAGIC = b"ADCKPT01"


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * _sigmoid(z)


def silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class Mlp:
    weights: list  # each (fan_in, fan_out)
    biases: list
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("an MLP needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise InvalidInputError(f"layer {i}: input width {w.shape[0]} != previous output")
        if not 0 <= self.dropout < 1:
            raise InvalidInputError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dropout)


def init_mlp(sizes, rng: np.random.Generator, dropout: float = 0.1) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise InvalidInputError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases, dropout)


def zero_mlp(sizes, dropout: float = 0.0) -> Mlp:
    return Mlp(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
        dropout,
    )


@dataclass
class ForwardCache:
    inputs: list  # input to each affine layer
    pre: list  # pre-activation of each hidden layer
    masks: list  # dropout scale per hidden layer (None when inactive)
    squeeze: bool
    param_ids: tuple = ()


def forward(net: Mlp, x, train: bool = False, rng: Optional[np.random.Generator] = None):
    """Return ``(output, cache)``; dropout is active only when ``train`` is true."""
    a = np.asarray(x, dtype=np.float64)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != net.weights[0].shape[0]:
        raise InvalidInputError(f"expected input width {net.weights[0].shape[0]}, got shape {np.shape(x)}")
    use_dropout = train and net.dropout > 0
    if use_dropout and rng is None:
        raise InvalidInputError("train-mode forward with dropout needs an rng")
    inputs, pre, masks = [], [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w + b
        if i == last:
            a = z
            break
        pre.append(z)
        a = silu(z)
        if use_dropout:
            keep = 1.0 - net.dropout
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
    cache = ForwardCache(inputs, pre, masks, squeeze, tuple(id(p) for p in net.params()))
    return (a[0] if squeeze else a), cache


def backward(net: Mlp, cache: ForwardCache, grad_out):
    """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input.

    Returns ``(grads, grad_input)`` where ``grads`` follows ``net.params()``
    ordering (W0, b0, W1, b1, ...).
    """
    if cache.param_ids != tuple(id(p) for p in net.params()):
        raise InvalidInputError("cache was produced by a different network")
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    n_layers = len(net.weights)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            if cache.masks[i] is not None:
                g = g * cache.masks[i]
            g = g * silu_grad(cache.pre[i])
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return grads, (g[0] if cache.squeeze else g)


@dataclass
class OptimizerState:
    """Adam moments plus an exponential per-epoch learning-rate schedule."""

    m: list
    v: list
    base_lr: float = 1e-3
    decay: float = 0.97
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    lr: float = field(default=None)

    def __post_init__(self):
        if self.lr is None:
            self.lr = self.base_lr * self.decay**self.epoch

    @classmethod
    def for_params(cls, params, **kwargs) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)

    def end_epoch(self):
        self.epoch += 1
        self.lr = self.base_lr * self.decay**self.epoch

    def header(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "decay": self.decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.lr,
        }


def adam_step(params: list, grads: list, state: OptimizerState) -> None:
    """In-place bias-corrected Adam update of ``params`` (descent direction)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise InvalidInputError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoints -------------------------------------------------------------
#
# layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
# then one flat '<f8' array: every net's parameters in params() order,
# followed by the Adam first and second moments in the same order.


def save_checkpoint(path, nets: dict, state: Optional[OptimizerState] = None, extra: Optional[dict] = None):
    names = sorted(nets)
    header = {
        "activation": ACTIVATION,
        "nets": [{"name": n, "sizes": nets[n].sizes, "dropout": nets[n].dropout} for n in names],
        "optimizer": None if state is None else state.header(),
        "extra": extra or {},
    }
    arrays = [p for n in names for p in nets[n].params()]
    if state is not None:
        arrays += list(state.m) + list(state.v)
    flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(flat.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(nets, state, header)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("activation") != ACTIVATION:
        raise IncompatibleCheckpointError(f"unsupported activation {header.get('activation')!r}")
    flat = np.frombuffer(data[16 + hlen :], dtype="<f8").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = flat[pos : pos + size].reshape(shape).copy()
        pos += size
        return out

    nets = {}
    shapes = []
    for spec in header["nets"]:
        s = spec["sizes"]
        ws, bs = [], []
        for a, b in zip(s[:-1], s[1:]):
            ws.append(take((a, b)))
            bs.append(take((b,)))
            shapes += [(a, b), (b,)]
        nets[spec["name"]] = Mlp(ws, bs, spec["dropout"])
    state = None
    if header["optimizer"] is not None:
        m = [take(sh) for sh in shapes]
        v = [take(sh) for sh in shapes]
        state = OptimizerState(m, v, **header["optimizer"])
    if pos != flat.size:
        raise IncompatibleCheckpointError(f"{path}: {flat.size - pos} trailing values")
    return nets, state, header
