"""A small reverse-mode differentiation engine over batched numpy arrays.

Only the operations the GSC network needs are provided. Every op records a
node on a :class:`Tape`; :meth:`Tape.backward` walks the tape in reverse and
accumulates adjoints. Integer inputs (neighbor indices, sample selections,
interpolation weights, labels) are plain arrays and never receive gradients.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolationError, InvalidArgumentError, TrainingDivergenceError


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf"):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _flat_rows(idx, n_rows):
    """Offset per-batch row indices (B, ...) into a flat (B * n_rows) row space."""
    batch = idx.shape[0]
    offsets = (np.arange(batch) * n_rows).reshape((batch,) + (1,) * (idx.ndim - 1))
    return (idx + offsets).reshape(-1)


def _scatter_matrix(flat, n_out, weights=None):
    data = np.ones(flat.size) if weights is None else weights.reshape(-1)
    return sp.csr_matrix((data, (flat, np.arange(flat.size))), shape=(n_out, flat.size))


class Tape:
    """Records operations in execution order for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def _emit(self, value, parents, backward_fn, op):
        node = Node(value, tuple(parents), backward_fn, op)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return self._emit(np.asarray(value, dtype=np.float64), (), None, "constant")

    def param(self, store, name):
        node = self.params.get(name)
        if node is None:
            node = self._emit(store[name], (), None, "param")
            self.params[name] = node
        return node

    @staticmethod
    def _check(cond, op, message):
        if not cond:
            raise InvalidArgumentError(f"{op}: {message}")

    # -- elementwise and dense ------------------------------------------------

    def linear(self, x, w):
        """``x @ w`` over the last axis of ``x``."""
        self._check(w.value.ndim == 2 and x.value.shape[-1] == w.value.shape[0], "linear",
                    f"input width {x.value.shape[-1]} does not match weight {w.value.shape}")
        xv, wv = x.value, w.value

        def backward(g):
            gx = g @ wv.T
            gw = xv.reshape(-1, wv.shape[0]).T @ g.reshape(-1, wv.shape[1])
            return gx, gw

        return self._emit(xv @ wv, (x, w), backward, "linear")

    def bias_add(self, x, b):
        self._check(b.value.shape == (x.value.shape[-1],), "bias_add",
                    f"bias shape {b.value.shape} does not match width {x.value.shape[-1]}")
        width = b.value.shape[0]
        return self._emit(x.value + b.value, (x, b),
                          lambda g: (g, g.reshape(-1, width).sum(axis=0)), "bias_add")

    def relu(self, x):
        mask = x.value > 0
        return self._emit(np.where(mask, x.value, 0.0), (x,),
                          lambda g: (np.where(mask, g, 0.0),), "relu")

    def subtract(self, a, b):
        try:
            out = a.value - b.value
        except ValueError as exc:
            raise InvalidArgumentError(f"subtract: {exc}") from None
        sa, sb = a.value.shape, b.value.shape
        return self._emit(out, (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "subtract")

    def add(self, a, b):
        try:
            out = a.value + b.value
        except ValueError as exc:
            raise InvalidArgumentError(f"add: {exc}") from None
        sa, sb = a.value.shape, b.value.shape
        return self._emit(out, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    def concat(self, xs, axis=-1):
        xs = list(xs)
        ref = xs[0].value
        ax = axis % ref.ndim
        for x in xs[1:]:
            v = x.value
            self._check(v.ndim == ref.ndim and all(v.shape[i] == ref.shape[i]
                                                   for i in range(ref.ndim) if i != ax),
                        "concat", f"incompatible shapes {ref.shape} and {v.shape}")
        splits = np.cumsum([x.value.shape[ax] for x in xs])[:-1]
        return self._emit(np.concatenate([x.value for x in xs], axis=ax), xs,
                          lambda g: tuple(np.split(g, splits, axis=ax)), "concat")

    # -- pooling -----------------------------------------------------------------

    def max_pool(self, x, axis):
        """Componentwise max along ``axis``; gradient goes to the first argmax."""
        xv = x.value
        arg = np.expand_dims(np.argmax(xv, axis=axis), axis)
        out = np.take_along_axis(xv, arg, axis=axis)

        def backward(g):
            gx = np.zeros_like(xv)
            np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return self._emit(np.squeeze(out, axis=axis), (x,), backward, "max_pool")

    def mean_pool(self, x, axis):
        xv = x.value
        n = xv.shape[axis]
        return self._emit(xv.mean(axis=axis), (x,),
                          lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, xv.shape),),
                          "mean_pool")

    # -- indexing ----------------------------------------------------------------

    def gather(self, x, idx):
        """Rows of ``x`` (B, N, C) picked per batch by ``idx`` (B, ...) -> (B, ..., C)."""
        xv = x.value
        idx = np.asarray(idx)
        self._check(xv.ndim == 3 and idx.shape[0] == xv.shape[0], "gather",
                    f"features {xv.shape} incompatible with indices {idx.shape}")
        self._check(idx.size == 0 or (idx.min() >= 0 and idx.max() < xv.shape[1]), "gather",
                    f"index out of range [0, {xv.shape[1]})")
        b, n, c = xv.shape
        flat = _flat_rows(idx, n)
        out = xv.reshape(b * n, c)[flat].reshape(idx.shape + (c,))

        def backward(g):
            scatter = _scatter_matrix(flat, b * n)
            return ((scatter @ g.reshape(-1, c)).reshape(b, n, c),)

        return self._emit(out, (x,), backward, "gather")

    def edge_linear(self, x, idx, w):
        """First MLP layer applied to grouped edge rows ``(f_j - f_i, f_j)``.

        Equivalent to ``linear(concat(gather(x, idx) - x_i, gather(x, idx)), w)``
        with ``w`` of shape (2C, C_out); evaluated per point before gathering.
        """
        xv, wv = x.value, w.value
        idx = np.asarray(idx)
        b, n, c = xv.shape
        self._check(wv.shape[0] == 2 * c, "edge_linear",
                    f"weight {wv.shape} expects edge width {wv.shape[0]}, got 2*{c}")
        self._check(idx.shape[:2] == (b, n), "edge_linear",
                    f"index rows {idx.shape} do not match features {xv.shape}")
        self._check(idx.min() >= 0 and idx.max() < n, "edge_linear",
                    f"index out of range [0, {n})")
        w_diff, w_nbr = wv[:c], wv[c:]
        anchor = xv @ w_diff
        neighbor = xv @ (w_diff + w_nbr)
        cout = wv.shape[1]
        flat = _flat_rows(idx, n)
        out = neighbor.reshape(b * n, cout)[flat].reshape(idx.shape + (cout,))
        out -= anchor[:, :, None, :]

        def backward(g):
            scatter = _scatter_matrix(flat, b * n)
            g_nbr = (scatter @ g.reshape(-1, cout)).reshape(b, n, cout)
            g_anchor = -g.sum(axis=2)
            gx = g_nbr @ (w_diff + w_nbr).T + g_anchor @ w_diff.T
            x2 = xv.reshape(-1, c)
            t_nbr = x2.T @ g_nbr.reshape(-1, cout)
            gw = np.concatenate([t_nbr + x2.T @ g_anchor.reshape(-1, cout), t_nbr], axis=0)
            return gx, gw

        return self._emit(out, (x, w), backward, "edge_linear")

    def edge_linear_max(self, x, idx, w):
        """``max_pool(edge_linear(x, idx, w), axis=2)`` without the (B, N, k, C) adjoint.

        The anchor term is constant along the neighbor axis, so the max is
        taken over gathered ``x_j (W_diff + W_nbr)`` rows only.
        """
        xv, wv = x.value, w.value
        idx = np.asarray(idx)
        b, n, c = xv.shape
        self._check(wv.shape[0] == 2 * c, "edge_linear_max",
                    f"weight {wv.shape} expects edge width {wv.shape[0]}, got 2*{c}")
        self._check(idx.shape[:2] == (b, n), "edge_linear_max",
                    f"index rows {idx.shape} do not match features {xv.shape}")
        self._check(idx.min() >= 0 and idx.max() < n, "edge_linear_max",
                    f"index out of range [0, {n})")
        w_diff, w_nbr = wv[:c], wv[c:]
        w_sum = w_diff + w_nbr
        cout = wv.shape[1]
        neighbor = xv @ w_sum
        flat = _flat_rows(idx, n)
        rows = neighbor.reshape(b * n, cout)[flat].reshape(idx.shape + (cout,))
        arg = np.argmax(rows, axis=2)
        out = np.take_along_axis(rows, arg[:, :, None, :], axis=2)[:, :, 0, :]
        out -= xv @ w_diff

        def backward(g):
            src = np.take_along_axis(idx, arg, axis=2)  # (B, N, C_out) source rows
            target = _flat_rows(src, n) * cout + np.tile(np.arange(cout), b * n)
            g_nbr = np.bincount(target, weights=g.reshape(-1), minlength=b * n * cout)
            g_nbr = g_nbr.reshape(b, n, cout)
            gx = g_nbr @ w_sum.T - g @ w_diff.T
            x2 = xv.reshape(-1, c)
            t_nbr = x2.T @ g_nbr.reshape(-1, cout)
            gw = np.concatenate([t_nbr - x2.T @ g.reshape(-1, cout), t_nbr], axis=0)
            return gx, gw

        return self._emit(out, (x, w), backward, "edge_linear_max")

    def weighted_gather(self, x, idx, weights):
        """Per-target weighted sum of gathered rows (feature interpolation)."""
        xv = x.value
        idx = np.asarray(idx)
        weights = np.asarray(weights, dtype=np.float64)
        self._check(idx.shape == weights.shape and idx.shape[0] == xv.shape[0],
                    "weighted_gather", f"indices {idx.shape} / weights {weights.shape} mismatch")
        b, n, c = xv.shape
        flat = _flat_rows(idx, n)
        rows = xv.reshape(b * n, c)[flat].reshape(idx.shape + (c,))
        out = np.einsum("bmk,bmkc->bmc", weights, rows)

        def backward(g):
            scatter = _scatter_matrix(flat, b * n, weights)
            g_rep = np.repeat(g.reshape(-1, c), idx.shape[-1], axis=0)
            return ((scatter @ g_rep).reshape(b, n, c),)

        return self._emit(out, (x,), backward, "weighted_gather")

    # -- regularization and loss ---------------------------------------------------

    def dropout(self, x, rate, seed):
        """Inverted dropout with a mask drawn from ``seed``; rate 0 is the identity."""
        self._check(0.0 <= rate < 1.0, "dropout", f"rate must be in [0, 1), got {rate}")
        if rate == 0.0:
            return x
        rng = np.random.default_rng(seed)
        mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
        return self._emit(x.value * mask, (x,), lambda g: (g * mask,), "dropout")

    def softmax_cross_entropy(self, logits, labels, mask=None):
        """Mean cross-entropy over all leading positions.

        ``mask`` (same shape as the logits) marks admissible classes; others
        are excluded from the softmax.
        """
        z = logits.value
        labels = np.asarray(labels)
        self._check(labels.shape == z.shape[:-1], "softmax_cross_entropy",
                    f"labels {labels.shape} do not match logits {z.shape}")
        self._check(labels.size == 0 or (labels.min() >= 0 and labels.max() < z.shape[-1]),
                    "softmax_cross_entropy", f"label out of range [0, {z.shape[-1]})")
        if mask is not None:
            z = np.where(mask, z, -np.inf)
        shifted = z - z.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        probs = np.exp(log_probs)
        picked = np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
        count = labels.size
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)

        def backward(g):
            return (g * (probs - onehot) / count,)

        return self._emit(np.asarray(-picked.mean()), (logits,), backward, "softmax_cross_entropy")

    # -- backward ----------------------------------------------------------------

    def backward(self, out):
        """Populate ``.grad`` on every node reachable from scalar ``out``."""
        if out.value.size != 1:
            raise InvalidArgumentError("backward: output must be a scalar")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def param_grads(self):
        return {name: (np.zeros_like(node.value) if node.grad is None else np.asarray(node.grad))
                for name, node in self.params.items()}


class ParamStore:
    """Named trainable arrays. Names are unique and shapes never change."""

    def __init__(self, arrays=None):
        self._arrays = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._arrays:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.array(value, dtype=np.float64)

    def assign(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        current = self._arrays[name]
        if value.shape != current.shape:
            raise InvalidArgumentError(
                f"parameter {name!r}: shape {value.shape} does not match {current.shape}")
        self._arrays[name] = value.copy()

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self):
        return {name: arr.shape for name, arr in self._arrays.items()}

    def size(self):
        return sum(arr.size for arr in self._arrays.values())

    def copy(self):
        return ParamStore({name: arr.copy() for name, arr in self._arrays.items()})


class SGD:
    def __init__(self, lr=0.01, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.state = {}

    def step(self, store, grads):
        for name, g in grads.items():
            vel = self.state.get(name)
            vel = g.copy() if vel is None else self.momentum * vel + g
            self.state[name] = vel
            store._arrays[name] = store[name] - self.lr * vel


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {}

    def step(self, store, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m, v = self.state.get(name, (np.zeros_like(g), np.zeros_like(g)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.state[name] = (m, v)
            store._arrays[name] = store[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name="adam", lr=1e-3, momentum=0.9):
    name = name.lower()
    if name == "adam":
        return Adam(lr)
    if name in ("sgd", "momentum"):
        return SGD(lr, momentum)
    raise InvalidArgumentError(f"unknown optimizer {name!r}; expected 'adam' or 'sgd'")


@dataclass
class LossValue:
    loss: float
    diagnostics: dict = field(default_factory=dict)


def train_step(loss_fn, store, optimizer, step=0):
    """One forward/backward/update cycle.

    ``loss_fn(tape, store)`` must return ``(loss_node, diagnostics)``. Returns
    the loss measured before the parameter update.
    """
    tape = Tape()
    loss, diagnostics = loss_fn(tape, store)
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingDivergenceError(step, value)
    tape.backward(loss)
    optimizer.step(store, tape.param_grads())
    return LossValue(value, diagnostics)


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float
    step: float

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.errors.values())

    def to_dict(self):
        return {
            "tolerance": self.tolerance,
            "step": self.step,
            "passed": self.passed,
            "max_error": self.max_error,
            "parameters": {name: {"max_rel_error": err, "passed": err < self.tolerance}
                           for name, err in self.errors.items()},
        }


def relative_error(analytic, numeric):
    """Largest entrywise deviation, relative to the larger of the two gradients' scales."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(forward, store, tolerance=1e-4, step=1e-5, names=None):
    """Compare backprop gradients against central differences, per parameter.

    ``forward(tape, store)`` returns a scalar loss node and must be
    deterministic (fix any dropout seed inside the closure).
    """

    def loss_value():
        return float(forward(Tape(), store).value)

    tape = Tape()
    loss = forward(tape, store)
    if float(loss.value) != loss_value():
        raise ContractViolationError("forward pass is not deterministic; fix dropout seeds")
    tape.backward(loss)
    grads = tape.param_grads()
    errors = {}
    for name in (names if names is not None else list(store)):
        original = store[name]
        numeric = np.zeros_like(original)
        analytic = grads.get(name, np.zeros_like(original))
        work = original.copy()
        store._arrays[name] = work
        try:
            for i in np.ndindex(original.shape):
                base = work[i]
                work[i] = base + step
                up = loss_value()
                work[i] = base - step
                down = loss_value()
                work[i] = base
                numeric[i] = (up - down) / (2.0 * step)
        finally:
            store._arrays[name] = original
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tolerance, step)
