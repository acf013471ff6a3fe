"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine sized for this package: batched multilayer
perceptrons of a few hundred units, stored as (rows, features) matrices.
Broadcasting is limited to matrix @ matrix, row-vector bias addition, and
elementwise/scalar forms; everything is float64 so finite-difference checks
stay meaningful.
"""

from __future__ import annotations

import json

import numpy as np
from scipy import special as _special

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class DivergenceError(ArithmeticError):
    """Raised when a gradient or update turns non-finite."""


class Tensor:
    """Node in the autodiff graph: float64 data plus an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -----------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        # Reduce broadcast axes back to this tensor's shape.
        if g.shape != self.data.shape:
            extra = g.ndim - self.data.ndim
            if extra > 0:
                g = g.sum(axis=tuple(range(extra)))
            axes = tuple(i for i, n in enumerate(self.data.shape) if n == 1 and g.shape[i] != 1)
            if axes:
                g = g.sum(axis=axes, keepdims=True)
        self.grad = self.grad + g

    def backward(self):
        """Backpropagate from this scalar, populating .grad on reachable leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        out_data = self.data + other.data
        def backward(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)
        return Tensor._result(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)
        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        out_data = self.data * other.data
        def backward(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)
        return Tensor._result(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _lift(other)
        out_data = self.data @ other.data
        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        return Tensor._result(out_data, (self, other), backward)

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        def backward(g):
            self._accumulate(g * out_data)
        return Tensor._result(out_data, (self,), backward)

    def log(self):
        def backward(g):
            self._accumulate(g / self.data)
        return Tensor._result(np.log(self.data), (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)
        def backward(g):
            self._accumulate(g * (1.0 - out_data * out_data))
        return Tensor._result(out_data, (self,), backward)

    def relu(self):
        mask = self.data > 0
        def backward(g):
            self._accumulate(g * mask)
        return Tensor._result(np.where(mask, self.data, 0.0), (self,), backward)

    def abs(self):
        sign = np.sign(self.data)
        def backward(g):
            self._accumulate(g * sign)
        return Tensor._result(np.abs(self.data), (self,), backward)

    def clip(self, lo, hi):
        """Clamp values to [lo, hi]; gradient is zero outside the interval."""
        inside = (self.data >= lo) & (self.data <= hi)
        def backward(g):
            self._accumulate(g * inside)
        return Tensor._result(np.clip(self.data, lo, hi), (self,), backward)

    def log_ndtr(self):
        """Log of the standard normal CDF, numerically stable in both tails."""
        out_data = _special.log_ndtr(self.data)
        def backward(g):
            log_pdf = -0.5 * self.data * self.data - _LOG_SQRT_2PI
            self._accumulate(g * np.exp(log_pdf - out_data))
        return Tensor._result(out_data, (self,), backward)

    # -- reductions and reshaping --------------------------------------------

    def sum(self, axis=None):
        out_data = self.data.sum(axis=axis)
        shape = self.data.shape
        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape).copy())
        return Tensor._result(out_data, (self,), backward)

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def take_cols(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        out_data = self.data[:, idx]
        shape = self.data.shape
        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, (slice(None), idx), g)
            self._accumulate(full)
        return Tensor._result(out_data, (self,), backward)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def concat(tensors, axis=1):
    """Concatenate 2-d tensors along columns (axis=1) or rows (axis=0)."""
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)
    return Tensor._result(out_data, tuple(tensors), backward)


# -- multilayer perceptron ----------------------------------------------------

_HIDDEN_ACTS = ("relu", "tanh")
_OUTPUT_ACTS = ("identity", "tanh")


class Mlp:
    """Fully connected net with fixed widths and per-layer uniform init.

    Weights are initialized uniform in +-1/sqrt(fan_in) from the supplied
    generator; zero_output_layer zeroes the last layer so the net starts as
    the constant-zero function (used by coupling layers for identity init).
    """

    def __init__(self, layer_dims, hidden_activation="relu",
                 output_activation="identity", rng=None, zero_output_layer=False):
        if len(layer_dims) < 2:
            raise ValueError("need at least an input and an output width")
        if hidden_activation not in _HIDDEN_ACTS:
            raise ValueError(f"hidden_activation must be one of {_HIDDEN_ACTS}")
        if output_activation not in _OUTPUT_ACTS:
            raise ValueError(f"output_activation must be one of {_OUTPUT_ACTS}")
        rng = as_generator(rng)
        self.layer_dims = list(int(d) for d in layer_dims)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(fan_out,))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))
        if zero_output_layer:
            self.weights[-1].data[:] = 0.0
            self.biases[-1].data[:] = 0.0

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def __call__(self, x):
        """Tape forward pass; x is a (rows, in_dim) Tensor."""
        x = _lift(x)
        if x.data.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.data.shape[-1]}")
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            act = self.output_activation if i == n_layers - 1 else self.hidden_activation
            if act == "relu":
                x = x.relu()
            elif act == "tanh":
                x = x.tanh()
        return x

    def forward_np(self, x):
        """Plain numpy forward pass (no tape); x is (rows, in_dim) or (in_dim,)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[1]}")
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.data + b.data
            act = self.output_activation if i == n_layers - 1 else self.hidden_activation
            if act == "relu":
                np.maximum(x, 0.0, out=x)
            elif act == "tanh":
                np.tanh(x, out=x)
        return x[0] if squeeze else x

    def input_jacobian_np(self, x):
        """Batched analytic Jacobian of outputs w.r.t. inputs: (rows, out, in)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        n = x.shape[0]
        jac = np.broadcast_to(np.eye(self.in_dim), (n, self.in_dim, self.in_dim)).copy()
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.data + b.data
            jac = np.matmul(w.data.T, jac)
            act = self.output_activation if i == n_layers - 1 else self.hidden_activation
            if act == "relu":
                h = np.maximum(pre, 0.0)
                jac = jac * (pre > 0)[:, :, None]
            elif act == "tanh":
                h = np.tanh(pre)
                jac = jac * (1.0 - h * h)[:, :, None]
            else:
                h = pre
        return jac[0] if single else jac

    def state_arrays(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w.data
            out[f"b{i}"] = b.data
        return out

    def load_state_arrays(self, arrays):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            src_w, src_b = arrays[f"w{i}"], arrays[f"b{i}"]
            if src_w.shape != w.data.shape or src_b.shape != b.data.shape:
                raise ValueError("parameter shape mismatch while loading")
            w.data = src_w.astype(np.float64).copy()
            b.data = src_b.astype(np.float64).copy()

    def copy(self):
        clone = Mlp(self.layer_dims, self.hidden_activation, self.output_activation,
                    rng=np.random.default_rng(0))
        clone.load_state_arrays(self.state_arrays())
        return clone


def zero_grads(params):
    for p in params:
        p.grad = None


class AdamState:
    """Adam optimizer state for a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, params):
        """Apply one Adam update in place; raises DivergenceError on non-finite grads."""
        if len(params) != len(self.m):
            raise ValueError("parameter list does not match optimizer state")
        grads = []
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient in Adam step")
            grads.append(g)
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def adam_step(params, state):
    """Functional alias for AdamState.step."""
    state.step(params)


def as_generator(seed_or_rng):
    """Accept an int seed, a Generator, or None (fresh default seed 0)."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    if seed_or_rng is None:
        return np.random.default_rng(0)
    return np.random.default_rng(int(seed_or_rng))


# -- serialization -------------------------------------------------------------
#
# Parameters travel as JSON: a manifest dict plus named float64 arrays with an
# explicit shape. Python's repr-based float encoding round-trips every finite
# float64 bit-exactly.

def save_arrays(path, manifest, arrays):
    payload = {
        "manifest": manifest,
        "arrays": {
            name: {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in arrays.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_arrays(path):
    with open(path) as fh:
        payload = json.load(fh)
    arrays = {}
    for name, entry in payload["arrays"].items():
        data = np.array(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"array {name}: data length does not match shape {shape}")
        arrays[name] = data.reshape(shape)
    return payload["manifest"], arrays
