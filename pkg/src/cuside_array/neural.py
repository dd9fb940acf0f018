""" Reverse-mode automatic differentiation on numpy arrays, plus the layers the model needs.

A ``Tensor`` records the operation that produced it. ``Tensor.backward`` walks the recorded
graph in reverse topological order; gradients of leaf tensors accumulate across calls, so
several losses may be back-propagated one after another.

Recurrent layers are fused sequence operations: the forward pass caches its gates and the
backward pass runs back-propagation through time in numpy, one node per layer instead of one
per time step.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from cuside_array.errors import CheckpointError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


class Tensor:
    """ A numpy array that remembers how it was computed.

    Attributes:
        value: float64 array.
        grad: accumulated gradient of a leaf, same shape as ``value``, or None.
        requires_grad: True for parameters and anything computed from them.
        name: optional label, used in error messages.
    """
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Iterable[np.ndarray | None]] | None = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, value, parents: Iterable[Tensor], backward, op: str) -> Tensor:
        """ Creates the output of an operation.

        Args:
            value: Forward result.
            parents: Input tensors.
            backward: Maps the output gradient to one gradient (or None) per parent.
            op: Operation name for diagnostics.

        Raises:
            NonFiniteError: If the result is not finite.
        """
        out = cls(value)
        if not np.all(np.isfinite(out.value)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op})"

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> Tensor:
        return Tensor(self.value.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def backward(self) -> None:
        """ Back-propagates from this scalar.

        Raises:
            ShapeError: If the tensor has more than one element.
        """
        if self.value.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def constant(value) -> Tensor:
    return Tensor(value)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor.from_op(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor.from_op(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor.from_op(a.value * b.value, (a, b),
                          lambda g: (g * b.value, g * a.value), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor.from_op(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def mul_const(a: Tensor, array: np.ndarray) -> Tensor:
    """ Elementwise product with a constant array of the same shape. """
    array = np.asarray(array, dtype=np.float64)
    if array.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {array.shape} differ")
    return Tensor.from_op(a.value * array, (a,), lambda g: (g * array,), "mul_const")


def add_const(a: Tensor, array: np.ndarray) -> Tensor:
    array = np.broadcast_to(np.asarray(array, dtype=np.float64), a.shape)
    return Tensor.from_op(a.value + array, (a,), lambda g: (g,), "add_const")


def total(a: Tensor) -> Tensor:
    """ Sum of all elements. """
    return Tensor.from_op(a.value.sum(), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    return Tensor.from_op(a.value.mean(), (a,), lambda g: (np.full(a.shape, float(g) / n),),
                          "mean")


def add_scalars(terms: list[tuple[Tensor, float]]) -> Tensor:
    """ Weighted sum of scalar tensors, ``sum(w * t)``. """
    value = sum(w * float(t.value) for t, w in terms)
    weights = [w for _, w in terms]
    return Tensor.from_op(np.asarray(value), [t for t, _ in terms],
                          lambda g: tuple(g * w for w in weights), "add_scalars")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor.from_op(a.value @ b.value, (a, b),
                          lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """ ``x @ weight + bias`` for x of shape (T, D_in), weight (D_in, D_out), bias (D_out,). """
    if x.value.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return Tensor.from_op(
        x.value @ weight.value + bias.value, (x, weight, bias),
        lambda g: (g @ weight.value.T, x.value.T @ g, g.sum(axis=0)), "linear")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return Tensor.from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def log_softmax(a: Tensor) -> Tensor:
    """ Row-wise log-softmax over the last axis. """
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return Tensor.from_op(out, (a,),
                          lambda g: (g - probs * g.sum(axis=-1, keepdims=True),), "log_softmax")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """ Inverted dropout; the identity outside training. """
    if not train or p <= 0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return Tensor.from_op(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor.from_op(np.concatenate([t.value for t in tensors], axis=axis), tensors,
                          backward, "concat")


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """ Slice ``a[start:stop]`` along the first axis. """
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"rows [{start}, {stop}) out of range for {a.shape[0]}")

    def backward(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        return (full,)

    return Tensor.from_op(a.value[start:stop], (a,), backward, "rows")


def pad_rows(a: Tensor, before: int, after: int) -> Tensor:
    """ Zero rows before and after along the first axis. """
    pad = [(before, after)] + [(0, 0)] * (a.value.ndim - 1)
    n = a.shape[0]
    return Tensor.from_op(np.pad(a.value, pad), (a,), lambda g: (g[before:before + n],),
                          "pad_rows")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor.from_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),),
                          "reshape")


def l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """ Mean absolute error over entries where ``mask`` is true.

    Returns a zero loss with zero gradient when every entry is masked out.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    weight = np.ones(pred.shape) if mask is None else np.broadcast_to(
        np.asarray(mask, dtype=np.float64), pred.shape)
    count = weight.sum()
    diff = pred.value - target
    if count == 0:
        return Tensor.from_op(np.asarray(0.0), (pred,), lambda g: (np.zeros(pred.shape),), "l1")
    value = np.sum(np.abs(diff) * weight) / count
    return Tensor.from_op(np.asarray(value), (pred,),
                          lambda g: (float(g) * np.sign(diff) * weight / count,), "l1")


def lstm_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor,
                  reverse: bool = False) -> Tensor:
    """ One LSTM direction over a whole sequence from zero initial state.

    Gate order in the 4H columns is input, forget, cell, output.

    Args:
        x: Inputs (T, D).
        w_x: Input weights (D, 4H).
        w_h: Recurrent weights (H, 4H).
        bias: (4H,).
        reverse: Run from the last frame to the first; outputs stay time-aligned.

    Returns:
        Tensor: hidden states (T, H).
    """
    hidden = w_h.shape[0]
    if x.value.ndim != 2 or w_x.shape != (x.shape[1], 4 * hidden) or \
            w_h.shape != (hidden, 4 * hidden) or bias.shape != (4 * hidden,):
        raise ShapeError(f"lstm: x {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}, b {bias.shape}")
    xs = x.value[::-1] if reverse else x.value
    steps = xs.shape[0]
    gx = xs @ w_x.value + bias.value
    h = np.zeros((steps + 1, hidden))
    c = np.zeros((steps + 1, hidden))
    gates = np.zeros((steps, 4 * hidden))
    for t in range(steps):
        z = gx[t] + h[t] @ w_h.value
        i, f, o = _sigmoid(z[:hidden]), _sigmoid(z[hidden:2 * hidden]), _sigmoid(z[3 * hidden:])
        g = np.tanh(z[2 * hidden:3 * hidden])
        c[t + 1] = f * c[t] + i * g
        h[t + 1] = o * np.tanh(c[t + 1])
        gates[t] = np.concatenate([i, f, g, o])

    def backward(dy):
        dy = dy[::-1] if reverse else dy
        dz_all = np.zeros_like(gates)
        dw_h = np.zeros_like(w_h.value)
        dh_next = np.zeros(hidden)
        dc_next = np.zeros(hidden)
        for t in reversed(range(steps)):
            i, f = gates[t, :hidden], gates[t, hidden:2 * hidden]
            g, o = gates[t, 2 * hidden:3 * hidden], gates[t, 3 * hidden:]
            dh = dy[t] + dh_next
            tc = np.tanh(c[t + 1])
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([dc * g * i * (1.0 - i), dc * c[t] * f * (1.0 - f),
                                 dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)])
            dz_all[t] = dz
            dw_h += np.outer(h[t], dz)
            dh_next = dz @ w_h.value.T
            dc_next = dc * f
        dx = dz_all @ w_x.value.T
        return (dx[::-1] if reverse else dx, xs.T @ dz_all, dw_h, dz_all.sum(axis=0))

    out = h[1:][::-1] if reverse else h[1:]
    return Tensor.from_op(out.copy(), (x, w_x, w_h, bias), backward, "lstm")


def gru_sequence(x: Tensor, h0: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor,
                 b_h: Tensor) -> Tensor:
    """ Unidirectional GRU over a sequence.

    ``r = s(x Wr + h Ur)``, ``z = s(x Wz + h Uz)``, ``n = tanh(x Wn + r * (h Un))``,
    ``h' = (1 - z) n + z h`` with gate columns ordered r, z, n and separate input and
    recurrent biases. Output ``t`` depends only on inputs ``0..t``.

    Args:
        x: Inputs (T, D).
        h0: Initial state (H,).
        w_x: (D, 3H). w_h: (H, 3H). b_x, b_h: (3H,).

    Returns:
        Tensor: hidden states (T, H).
    """
    hidden = w_h.shape[0]
    if x.value.ndim != 2 or w_x.shape != (x.shape[1], 3 * hidden) or \
            w_h.shape != (hidden, 3 * hidden) or h0.shape != (hidden,) or \
            b_x.shape != (3 * hidden,) or b_h.shape != (3 * hidden,):
        raise ShapeError(f"gru: x {x.shape}, h0 {h0.shape}, w_x {w_x.shape}, w_h {w_h.shape}")
    steps = x.shape[0]
    gx = x.value @ w_x.value + b_x.value
    h = np.zeros((steps + 1, hidden))
    h[0] = h0.value
    cache = np.zeros((steps, 4 * hidden))
    for t in range(steps):
        gh = h[t] @ w_h.value + b_h.value
        r = _sigmoid(gx[t, :hidden] + gh[:hidden])
        z = _sigmoid(gx[t, hidden:2 * hidden] + gh[hidden:2 * hidden])
        n = np.tanh(gx[t, 2 * hidden:] + r * gh[2 * hidden:])
        h[t + 1] = (1.0 - z) * n + z * h[t]
        cache[t] = np.concatenate([r, z, n, gh[2 * hidden:]])

    def backward(dy):
        dgx = np.zeros((steps, 3 * hidden))
        dgh_all = np.zeros((steps, 3 * hidden))
        dh_next = np.zeros(hidden)
        for t in reversed(range(steps)):
            r, z = cache[t, :hidden], cache[t, hidden:2 * hidden]
            n, gh_n = cache[t, 2 * hidden:3 * hidden], cache[t, 3 * hidden:]
            dh = dy[t] + dh_next
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            da_z = dh * (h[t] - n) * z * (1.0 - z)
            da_r = da_n * gh_n * r * (1.0 - r)
            dgx[t] = np.concatenate([da_r, da_z, da_n])
            dgh_all[t] = np.concatenate([da_r, da_z, da_n * r])
            dh_next = dh * z + dgh_all[t] @ w_h.value.T
        return (dgx @ w_x.value.T, dh_next, x.value.T @ dgx, h[:-1].T @ dgh_all,
                dgx.sum(axis=0), dgh_all.sum(axis=0))

    return Tensor.from_op(h[1:].copy(), (x, h0, w_x, w_h, b_x, b_h), backward, "gru")


def last_row(a: Tensor) -> Tensor:
    """ Final row of a (T, H) tensor as an (H,) vector. """
    return reshape(rows(a, a.shape[0] - 1, a.shape[0]), (a.shape[1],))


def gru_forward(x: Tensor, h0: Tensor, params: ModelParams, prefix: str) -> tuple[Tensor, Tensor]:
    """ GRU layer ``prefix`` from ``params``; returns (outputs, final state). """
    y = gru_sequence(x, h0, params[f"{prefix}.w_x"], params[f"{prefix}.w_h"],
                     params[f"{prefix}.b_x"], params[f"{prefix}.b_h"])
    return y, last_row(y)


def blstm_forward(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """ Bidirectional LSTM layer: forward and backward halves concatenated, (T, 2H). """
    forward = lstm_sequence(x, params[f"{prefix}.fw.w_x"], params[f"{prefix}.fw.w_h"],
                            params[f"{prefix}.fw.b"])
    backward = lstm_sequence(x, params[f"{prefix}.bw.w_x"], params[f"{prefix}.bw.w_h"],
                             params[f"{prefix}.bw.b"], reverse=True)
    return concat([forward, backward], axis=1)


def log_mel(power: Tensor, fb: np.ndarray, floor: float) -> Tensor:
    """ ``log(max(floor, power @ fb.T))``; entries clamped at the floor pass no gradient. """
    mel = power.value @ fb.T
    live = mel > floor
    out = np.log(np.where(live, mel, floor))
    return Tensor.from_op(out, (power,),
                          lambda g: ((np.where(live, g / np.where(live, mel, 1.0), 0.0)) @ fb,),
                          "log_mel")


def init_linear(params: ModelParams, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator) -> None:
    bound = np.sqrt(6.0 / (d_in + d_out))
    params.add(f"{prefix}.w", rng.uniform(-bound, bound, (d_in, d_out)))
    params.add(f"{prefix}.b", np.zeros(d_out))


def init_lstm(params: ModelParams, prefix: str, d_in: int, hidden: int,
              rng: np.random.Generator) -> None:
    """ Adds one LSTM direction; forget-gate bias starts at one. """
    bound = 1.0 / np.sqrt(hidden)
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0
    params.add(f"{prefix}.w_x", rng.uniform(-bound, bound, (d_in, 4 * hidden)))
    params.add(f"{prefix}.w_h", rng.uniform(-bound, bound, (hidden, 4 * hidden)))
    params.add(f"{prefix}.b", bias)


def init_blstm(params: ModelParams, prefix: str, d_in: int, hidden: int,
               rng: np.random.Generator) -> None:
    init_lstm(params, f"{prefix}.fw", d_in, hidden, rng)
    init_lstm(params, f"{prefix}.bw", d_in, hidden, rng)


def init_gru(params: ModelParams, prefix: str, d_in: int, hidden: int,
             rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(hidden)
    params.add(f"{prefix}.w_x", rng.uniform(-bound, bound, (d_in, 3 * hidden)))
    params.add(f"{prefix}.w_h", rng.uniform(-bound, bound, (hidden, 3 * hidden)))
    params.add(f"{prefix}.b_x", np.zeros(3 * hidden))
    params.add(f"{prefix}.b_h", np.zeros(3 * hidden))


def normalize(x: Tensor, mean_: np.ndarray, std: np.ndarray) -> Tensor:
    """ ``(x - mean) / std`` per column with constant statistics. """
    shifted = add_const(x, -np.broadcast_to(mean_, x.shape))
    return mul_const(shifted, np.broadcast_to(1.0 / std, x.shape))


class ModelParams:
    """ Ordered name -> Tensor map shared by every branch of the model.

    Attributes:
        arch_hash: Hex digest identifying the architecture the tensors belong to.
        frozen: Names excluded from optimisation (feature statistics).
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None, arch_hash: str = "",
                 frozen: Iterable[str] = (), metadata: dict | None = None):
        self._tensors: dict[str, Tensor] = {}
        self.arch_hash = arch_hash
        self.frozen = set(frozen)
        self.metadata = dict(metadata or {})
        for name, tensor in (tensors or {}).items():
            self.add(name, tensor)

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name} already exists")
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        tensor.name = name
        tensor.requires_grad = not (frozen or name in self.frozen)
        if frozen:
            self.frozen.add(name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if n not in self.frozen}

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """ Gradient per trainable tensor; zeros where nothing was accumulated. """
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for n, t in self.trainable().items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self._tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams({n: Tensor(t.value.copy()) for n, t in self._tensors.items()},
                           arch_hash=self.arch_hash, frozen=self.frozen, metadata=self.metadata)

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            if self._tensors[name].shape != np.shape(value):
                raise ShapeError(f"{name}: shape {np.shape(value)} != {self._tensors[name].shape}")
            self._tensors[name].value = np.array(value, dtype=np.float64)


def architecture_hash(config_json: str, shapes: dict[str, tuple[int, ...]]) -> str:
    """ sha256 over the architecture config and the sorted parameter shapes. """
    document = json.dumps({"config": json.loads(config_json),
                           "shapes": sorted((n, list(s)) for n, s in shapes.items())},
                          sort_keys=True)
    return hashlib.sha256(document.encode("utf-8")).hexdigest()


class AdamState:
    """ Adam moments, step count and hyper-parameters. """

    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros_like(t.value) for n, t in params.trainable().items()}
        self.v = {n: np.zeros_like(t.value) for n, t in params.trainable().items()}


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray],
                                                                           float]:
    """ Rescales all gradients when their global L2 norm exceeds ``max_norm``.

    Returns:
        tuple: (possibly rescaled gradients, norm before clipping).
    """
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {n: g * factor for n, g in grads.items()}, norm


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> None:
    """ One bias-corrected Adam update, in place. """
    lr = state.lr if lr is None else lr
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        tensor = params[name]
        if grad.shape != tensor.shape:
            raise ShapeError(f"{name}: gradient {grad.shape} vs parameter {tensor.shape}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        step = lr * (state.m[name] / correction1) / (np.sqrt(state.v[name] / correction2)
                                                       + state.eps)
        tensor.value = tensor.value - step


CHECKPOINT_MAGIC = b"CSDARRAY"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    """ Writes parameters in the versioned binary checkpoint format.

    Layout: magic, uint32 version, 64-byte hex architecture hash, length-prefixed JSON metadata,
    uint32 record count, then per record: name, frozen flag, shape, raw little-endian float64.
    """
    path = Path(path)
    meta = json.dumps({"frozen": sorted(params.frozen), **params.metadata},
                      sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              params.arch_hash.encode("ascii").ljust(64, b"\0"),
              struct.pack("<I", len(meta)), meta, struct.pack("<I", len(params))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<BI", name in params.frozen, tensor.value.ndim))
        chunks.append(struct.pack(f"<{tensor.value.ndim}Q", *tensor.shape))
        chunks.append(tensor.value.astype("<f8").tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as err:
        err.add_note(f"while writing checkpoint {path}")
        raise
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> ModelParams:
    """ Reads a checkpoint written by ``save_checkpoint``.

    Raises:
        FileNotFoundError: If the file is missing.
        CheckpointError: If the file is corrupt, of another version, or its architecture hash
            differs from ``expected_hash``.
    """
    blob = Path(path).read_bytes()
    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        piece = blob[offset:offset + size]
        offset += size
        return piece

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arch_hash = take(64).rstrip(b"\0").decode("ascii")
    if expected_hash is not None and arch_hash != expected_hash:
        raise CheckpointError(f"{path}: architecture hash {arch_hash[:12]} does not match "
                              f"{expected_hash[:12]}")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except ValueError as err:
        raise CheckpointError(f"{path}: corrupt metadata") from err
    frozen = meta.pop("frozen", [])
    (count,) = struct.unpack("<I", take(4))
    params = ModelParams(arch_hash=arch_hash, frozen=frozen, metadata=meta)
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        is_frozen, ndim = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        params.add(name, value, frozen=bool(is_frozen))
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return params


def average_params(models: list[ModelParams]) -> ModelParams:
    """ Elementwise mean of parameter sets with the same architecture.

    Raises:
        CheckpointError: If the sets differ in architecture hash or names.
    """
    if not models:
        raise CheckpointError("nothing to average")
    first = models[0]
    for other in models[1:]:
        if other.arch_hash != first.arch_hash or other.names() != first.names():
            raise CheckpointError("cannot average checkpoints of different architectures")
    averaged = first.copy()
    averaged.set_values({name: np.mean([m[name].value for m in models], axis=0)
                         for name in first.names()})
    return averaged


def numerical_gradient(loss_fn: Callable[[], float], tensor: Tensor,
                       eps: float = 1e-5) -> np.ndarray:
    """ Central finite differences of ``loss_fn`` with respect to every entry of ``tensor``. """
    grad = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    for index in range(flat.size):
        saved = flat[index]
        flat[index] = saved + eps
        plus = loss_fn()
        flat[index] = saved - eps
        minus = loss_fn()
        flat[index] = saved
        grad.reshape(-1)[index] = (plus - minus) / (2.0 * eps)
    return grad


def gradient_check(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                   eps: float = 1e-5, atol: float = 1e-7) -> dict[str, float]:
    """ Worst relative error between back-propagated and finite-difference gradients.

    Args:
        loss_fn: Builds the scalar loss from the current tensor values.
        tensors: Tensors to check, by name; they must require grad.
        eps: Finite-difference step.
        atol: Added to the denominator so near-zero gradients compare absolutely.

    Returns:
        dict: name -> max |analytic - numeric| / (|analytic| + |numeric| + atol) * 2.
    """
    for tensor in tensors.values():
        tensor.grad = None
    loss_fn().backward()
    errors = {}
    for name, tensor in tensors.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.value)
        numeric = numerical_gradient(lambda: float(loss_fn().value), tensor, eps)
        denom = np.abs(analytic) + np.abs(numeric) + atol
        errors[name] = float(np.max(2.0 * np.abs(analytic - numeric) / denom))
    return errors
