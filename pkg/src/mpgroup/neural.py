"""Small reverse-mode network library on numpy.

Layers act on batches: dense layers on the trailing axis, recurrent layers
map ``(batch, features)`` to ``(batch, steps, hidden)`` by feeding the same
input at every step (or consume a ``(batch, steps, features)`` sequence).
Every layer caches what it needs during ``forward`` and produces parameter
and input gradients in ``backward``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NetworkFormatError(ValueError):
    pass


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


_ACTIVATIONS = ("tanh", "linear")


def _act(name, x):
    return np.tanh(x) if name == "tanh" else x


def _act_grad(name, y):
    # derivative expressed through the activation's output
    return 1.0 - y * y if name == "tanh" else np.ones_like(y)


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    @property
    def trainable(self) -> bool:
        return bool(self.params)

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind} layer: backward called without a cached forward pass")
        return self._cache

    def clear(self):
        self._cache = None

    def config(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, **self.config()}
        for name, p in self.params.items():
            doc[name] = {"shape": list(p.shape), "data": p.ravel().tolist()}
        return doc


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, bias=True, rng=None):
        super().__init__()
        self.n_in, self.n_out, self.bias = int(n_in), int(n_out), bool(bias)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = glorot_uniform(rng, self.n_in, self.n_out)
        if self.bias:
            self.params["b"] = np.zeros(self.n_out)

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out, "bias": self.bias}

    def forward(self, x, cache=True):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"dense layer expects {self.n_in} inputs, got {x.shape[-1]}")
        y = x @ self.params["W"]
        if self.bias:
            y = y + self.params["b"]
        self._cache = x if cache else None
        return y

    def backward(self, dy):
        x = self._need_cache()
        x2, dy2 = x.reshape(-1, self.n_in), dy.reshape(-1, self.n_out)
        self.grads["W"] = x2.T @ dy2
        if self.bias:
            self.grads["b"] = dy2.sum(axis=0)
        return dy @ self.params["W"].T


class Activation(Layer):
    kind = "activation"

    def __init__(self, name="tanh"):
        super().__init__()
        if name != "tanh":
            raise ValueError(f"unsupported activation {name!r}")
        self.name = name

    def config(self):
        return {"name": self.name}

    def forward(self, x, cache=True):
        y = np.tanh(x)
        self._cache = y if cache else None
        return y

    def backward(self, dy):
        y = self._need_cache()
        return dy * (1.0 - y * y)


class Recurrent(Layer):
    """Elman cell ``h_t = act(x_t W + h_{t-1} U + b)`` unrolled over ``steps``."""

    kind = "recurrent"

    def __init__(self, n_in, hidden, steps, activation="tanh", rng=None):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {activation!r}")
        self.n_in, self.hidden, self.steps = int(n_in), int(hidden), int(steps)
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = glorot_uniform(rng, self.n_in, self.hidden)
        self.params["U"] = glorot_uniform(rng, self.hidden, self.hidden)
        self.params["b"] = np.zeros(self.hidden)

    def config(self):
        return {"n_in": self.n_in, "hidden": self.hidden, "steps": self.steps,
                "activation": self.activation}

    def _inputs(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"recurrent layer expects {self.n_in} inputs, got {x.shape[-1]}")
        if x.ndim == 3 and x.shape[1] != self.steps:
            raise ShapeError(f"recurrent layer expects {self.steps} steps, got {x.shape[1]}")
        return x @ self.params["W"] + self.params["b"]

    def forward(self, x, cache=True):
        a = self._inputs(x)
        U = self.params["U"]
        H = np.empty((x.shape[0], self.steps, self.hidden))
        h = np.zeros((x.shape[0], self.hidden))
        for t in range(self.steps):
            pre = (a if a.ndim == 2 else a[:, t]) + h @ U
            h = _act(self.activation, pre)
            H[:, t] = h
        self._cache = (x, H) if cache else None
        return H

    def backward(self, dH):
        x, H = self._need_cache()
        U = self.params["U"]
        dU = np.zeros_like(U)
        da = np.zeros((x.shape[0], self.steps, self.hidden))
        dh_next = np.zeros((x.shape[0], self.hidden))
        for t in range(self.steps - 1, -1, -1):
            dpre = (dH[:, t] + dh_next) * _act_grad(self.activation, H[:, t])
            if t > 0:
                dU += H[:, t - 1].T @ dpre
            dh_next = dpre @ U.T
            da[:, t] = dpre
        self.grads["U"] = dU
        if x.ndim == 2:
            da_sum = da.sum(axis=1)
            self.grads["W"] = x.T @ da_sum
            self.grads["b"] = da_sum.sum(axis=0)
            return da_sum @ self.params["W"].T
        self.grads["W"] = x.reshape(-1, self.n_in).T @ da.reshape(-1, self.hidden)
        self.grads["b"] = da.sum(axis=(0, 1))
        return da @ self.params["W"].T


class LSTM(Layer):
    """Gated recurrent cell (gate order: input, forget, candidate, output)."""

    kind = "lstm"

    def __init__(self, n_in, hidden, steps, rng=None):
        super().__init__()
        self.n_in, self.hidden, self.steps = int(n_in), int(hidden), int(steps)
        rng = rng if rng is not None else np.random.default_rng(0)
        H = self.hidden
        self.params["W"] = glorot_uniform(rng, self.n_in, 4 * H)
        self.params["U"] = glorot_uniform(rng, H, 4 * H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        self.params["b"] = b

    def config(self):
        return {"n_in": self.n_in, "hidden": self.hidden, "steps": self.steps}

    forward_inputs = Recurrent._inputs

    def forward(self, x, cache=True):
        a = self.forward_inputs(x)
        U, Hd = self.params["U"], self.hidden
        B = x.shape[0]
        h, c = np.zeros((B, Hd)), np.zeros((B, Hd))
        Hs = np.empty((B, self.steps, Hd))
        gates, cells = [], []
        for t in range(self.steps):
            z = (a if a.ndim == 2 else a[:, t]) + h @ U
            i = 1.0 / (1.0 + np.exp(-z[:, :Hd]))
            f = 1.0 / (1.0 + np.exp(-z[:, Hd:2 * Hd]))
            g = np.tanh(z[:, 2 * Hd:3 * Hd])
            o = 1.0 / (1.0 + np.exp(-z[:, 3 * Hd:]))
            c_prev = c
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            Hs[:, t] = h
            gates.append((i, f, g, o))
            cells.append((c_prev, tc))
        self._cache = (x, Hs, gates, cells) if cache else None
        return Hs

    def backward(self, dH):
        x, Hs, gates, cells = self._need_cache()
        U, Hd = self.params["U"], self.hidden
        B = x.shape[0]
        dU = np.zeros_like(U)
        dz_all = np.zeros((B, self.steps, 4 * Hd))
        dh_next, dc_next = np.zeros((B, Hd)), np.zeros((B, Hd))
        for t in range(self.steps - 1, -1, -1):
            i, f, g, o = gates[t]
            c_prev, tc = cells[t]
            dh = dH[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            if t > 0:
                dU += Hs[:, t - 1].T @ dz
            dh_next = dz @ U.T
            dc_next = dc * f
            dz_all[:, t] = dz
        self.grads["U"] = dU
        if x.ndim == 2:
            dz_sum = dz_all.sum(axis=1)
            self.grads["W"] = x.T @ dz_sum
            self.grads["b"] = dz_sum.sum(axis=0)
            return dz_sum @ self.params["W"].T
        self.grads["W"] = x.reshape(-1, self.n_in).T @ dz_all.reshape(-1, 4 * Hd)
        self.grads["b"] = dz_all.sum(axis=(0, 1))
        return dz_all @ self.params["W"].T


class Scale(Layer):
    """Fixed output scaling from [-1, 1] onto the target range [lo, hi].

    ``linear``: ``lo + (z + 1) / 2 * (hi - lo)``;
    ``log``: ``exp((z + 1) / 2 * log(1 + hi - lo)) - 1 + lo``.
    A trailing singleton axis (one output per step) is dropped.
    """

    kind = "scale"

    def __init__(self, mode, lo, hi):
        super().__init__()
        if mode not in ("linear", "log"):
            raise ValueError(f"unknown scale mode {mode!r}")
        if not hi > lo:
            raise ValueError("scale layer needs hi > lo")
        self.mode, self.lo, self.hi = mode, float(lo), float(hi)

    def config(self):
        return {"mode": self.mode, "lo": self.lo, "hi": self.hi}

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.mode == "linear":
            return self.lo + 0.5 * (z + 1.0) * (self.hi - self.lo)
        return np.exp(0.5 * (z + 1.0) * np.log1p(self.hi - self.lo)) - 1.0 + self.lo

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if self.mode == "linear":
            return 2.0 * (y - self.lo) / (self.hi - self.lo) - 1.0
        return 2.0 * np.log1p(y - self.lo) / np.log1p(self.hi - self.lo) - 1.0

    def forward(self, x, cache=True):
        shape = x.shape
        if x.ndim == 3 and shape[-1] == 1:
            x = x[..., 0]
        y = self(x)
        self._cache = (shape, y) if cache else None
        return y

    def backward(self, dy):
        shape, y = self._need_cache()
        if self.mode == "linear":
            dz = dy * (0.5 * (self.hi - self.lo))
        else:
            dz = dy * (0.5 * np.log1p(self.hi - self.lo)) * (y + 1.0 - self.lo)
        return dz.reshape(shape)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Activation, Recurrent, LSTM, Scale)}


class Network:
    """Ordered stack of layers mapping ``input_dim`` features to ``output_dim`` values."""

    def __init__(self, layers, input_dim):
        self.layers = list(layers)
        self.input_dim = int(input_dim)
        probe = self.forward(np.zeros((1, self.input_dim)), cache=False)
        if probe.ndim != 2:
            raise ShapeError(f"network output must be a vector per input, got shape {probe.shape[1:]}")
        self.output_dim = probe.shape[1]

    def forward(self, z, cache=True):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        x = z[None, :] if single else z
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input of dimension {self.input_dim}, got shape {z.shape}")
        for layer in self.layers:
            x = layer.forward(x, cache=cache)
        return x[0] if single else x

    __call__ = forward

    def predict(self, z, batch_size=4096):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return self.forward(z, cache=False)
        out = [self.forward(z[k:k + batch_size], cache=False) for k in range(0, len(z), batch_size)]
        return np.concatenate(out, axis=0)

    def backward(self, upstream):
        """Gradients of ``<upstream, forward(z)>`` for the cached input.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
        :meth:`parameters`.
        """
        dy = np.asarray(upstream, dtype=float)
        cache = self.layers[0]._cache if self.layers else None
        if cache is None:
            raise StateError("backward called without a cached forward pass")
        single = dy.ndim == 1
        if single:
            dy = dy[None, :]
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        grads = [layer.grads[name] for layer in self.layers for name in layer.params]
        return grads, (dy[0] if single else dy)

    def parameters(self) -> list[np.ndarray]:
        return [layer.params[name] for layer in self.layers for name in layer.params]

    def get_weights(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def set_weights(self, weights) -> None:
        for p, w in zip(self.parameters(), weights, strict=True):
            p[...] = w

    def clear(self):
        for layer in self.layers:
            layer.clear()

    def copy(self) -> "Network":
        self.clear()
        return copy.deepcopy(self)

    @property
    def scale_layer(self) -> Scale | None:
        last = self.layers[-1] if self.layers else None
        return last if isinstance(last, Scale) else None

    def to_dict(self) -> dict:
        return {"format": "mpgroup-network", "version": 1, "input_dim": self.input_dim,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, doc) -> "Network":
        return deserialize(doc)


# --------------------------------------------------------------- builders

def build_network(input_dim, T, hidden=64, recurrent_hidden=64, cell="recurrent",
                  scale_mode="linear", lo=0.0, hi=1.0, seed=0) -> Network:
    """Dense+tanh encoder, recurrent layer unrolled over ``T`` steps, one
    linear output per step, then the target scaling layer."""
    rng = np.random.default_rng(seed)
    if cell == "lstm":
        rec = LSTM(hidden, recurrent_hidden, T, rng=rng)
    elif cell == "recurrent":
        rec = Recurrent(hidden, recurrent_hidden, T, rng=rng)
    else:
        raise ValueError(f"unknown cell {cell!r}")
    layers = [Dense(input_dim, hidden, rng=rng), Activation("tanh"), rec,
              Dense(recurrent_hidden, 1, rng=rng), Scale(scale_mode, lo, hi)]
    return Network(layers, input_dim)


# ------------------------------------------------------------ losses

def loss(kind, pred, target):
    """Mean squared or mean absolute error and its gradient w.r.t. ``pred``.

    For a batch the per-sample loss is averaged over samples.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    kind = kind.upper()
    if kind == "MSE":
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    if kind == "MAE":
        return float(np.sum(np.abs(diff)) / n), np.sign(diff) / n
    raise ValueError(f"unknown loss {kind!r}")


# --------------------------------------------------------- optimizers

@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    m: list = field(default_factory=list, repr=False)
    v: list = field(default_factory=list, repr=False)
    t: int = 0

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v, strict=True):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


@dataclass
class FixedStep:
    lr: float = 0.05

    def step(self, params, grads):
        for p, g in zip(params, grads, strict=True):
            p -= self.lr * g
        return params


def make_optimizer(name, lr=None):
    name = name.lower()
    if name == "adam":
        return Adam() if lr is None else Adam(lr=lr)
    if name in ("fixed", "fixedstep", "sgd"):
        return FixedStep() if lr is None else FixedStep(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class TrainState:
    optimizer: Adam | FixedStep
    seed: int = 0
    epoch: int = 0

    def step(self, params, grads):
        return self.optimizer.step(params, grads)


# ------------------------------------------------------- serialization

def serialize(net: Network) -> str:
    return json.dumps(net.to_dict(), separators=(",", ":"))


def _array(doc, name, index, shape):
    if name not in doc:
        raise NetworkFormatError(f"layer {index}: missing field {name!r}")
    entry = doc[name]
    if not isinstance(entry, dict) or "data" not in entry:
        raise NetworkFormatError(f"layer {index}: field {name!r} needs 'shape' and 'data'")
    data = np.asarray(entry["data"], dtype=float)
    if tuple(entry.get("shape", ())) != tuple(shape) or data.size != int(np.prod(shape)):
        raise ShapeError(f"layer {index}: {name} has shape {entry.get('shape')} / {data.size} values,"
                         f" expected {list(shape)}")
    return data.reshape(shape)


def _field(doc, name, index):
    if name not in doc:
        raise NetworkFormatError(f"layer {index}: missing field {name!r}")
    return doc[name]


def deserialize(doc) -> Network:
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise NetworkFormatError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise NetworkFormatError("network document must be a JSON object")
    for key in ("input_dim", "layers"):
        if key not in doc:
            raise NetworkFormatError(f"missing field {key!r}")
    layers = []
    for k, ld in enumerate(doc["layers"]):
        kind = _field(ld, "kind", k)
        if kind not in LAYER_KINDS:
            raise NetworkFormatError(f"layer {k}: unknown kind {kind!r}")
        if kind == "dense":
            n_in, n_out = _field(ld, "n_in", k), _field(ld, "n_out", k)
            layer = Dense(n_in, n_out, bias=_field(ld, "bias", k))
            layer.params["W"] = _array(ld, "W", k, (n_in, n_out))
            if layer.bias:
                layer.params["b"] = _array(ld, "b", k, (n_out,))
        elif kind == "activation":
            layer = Activation(_field(ld, "name", k))
        elif kind in ("recurrent", "lstm"):
            n_in, hid, steps = (_field(ld, f, k) for f in ("n_in", "hidden", "steps"))
            if kind == "recurrent":
                layer = Recurrent(n_in, hid, steps, activation=_field(ld, "activation", k))
                width = hid
            else:
                layer = LSTM(n_in, hid, steps)
                width = 4 * hid
            layer.params["W"] = _array(ld, "W", k, (n_in, width))
            layer.params["U"] = _array(ld, "U", k, (hid, width))
            layer.params["b"] = _array(ld, "b", k, (width,))
        else:
            layer = Scale(_field(ld, "mode", k), _field(ld, "lo", k), _field(ld, "hi", k))
        layers.append(layer)
    try:
        return Network(layers, doc["input_dim"])
    except ShapeError as exc:
        raise ShapeError(f"layer dimensions do not chain: {exc}") from None


def save_network(net: Network, path) -> None:
    Path(path).write_text(serialize(net))


def load_network(path) -> Network:
    return deserialize(Path(path).read_text())
