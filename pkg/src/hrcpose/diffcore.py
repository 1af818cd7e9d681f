"""Define-then-run reverse-mode differentiation over a fixed op vocabulary.

A :class:`Tape` is built once by calling its op methods, which return
:class:`Node` handles. ``evaluate`` runs the forward pass for a set of
bindings (inputs and parameters by name); ``gradients`` then runs the
backward pass from a scalar node.

Rules worth knowing:

* ``relu`` has subgradient 0 at 0, ``abs`` has subgradient 0 at 0.
* ``maxpool`` routes the gradient to the first maximal row of each column.
* ``ranked_contrast`` treats the gradient of ``sqrt`` at 0 as 0.

Values are computed in the tape dtype (float32 for training, float64 for
verification). All reductions use numpy's fixed pairwise order, so repeated
passes are bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError, TapeStateError

LEAF_OPS = ("input", "param")


class Node:
    __slots__ = ("id", "op", "inputs", "attrs", "name", "requires_grad")

    def __init__(self, id, op, inputs, attrs, name, requires_grad):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name
        self.requires_grad = requires_grad

    @property
    def label(self):
        return self.name if self.name is not None else f"#{self.id}"

    def __repr__(self):
        return f"Node({self.label}, {self.op})"


class Tape:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self.leaves = {}
        self.values = None
        self.grads = None
        self._cache = {}

    # ------------------------------------------------------------ building

    def _add(self, op, inputs=(), name=None, **attrs):
        rg = any(n.requires_grad for n in inputs)
        node = Node(len(self.nodes), op, tuple(inputs), attrs, name, rg)
        self.nodes.append(node)
        self.values = None
        return node

    def _leaf(self, op, name, shape, requires_grad, const):
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = Node(len(self.nodes), op, (), {"shape": shape, "const": const}, name, requires_grad)
        self.nodes.append(node)
        self.leaves[name] = node
        self.values = None
        return node

    def input(self, name, shape=None, requires_grad=True, const=False):
        """Bound input. ``const`` inputs (masks, indices) keep their dtype and get no gradient."""
        return self._leaf("input", name, shape, requires_grad and not const, const)

    def param(self, name, shape=None):
        return self._leaf("param", name, shape, True, False)

    def affine(self, x, w, b, name=None):
        return self._add("affine", (x, w, b), name)

    def relu(self, x, name=None):
        return self._add("relu", (x,), name)

    def maxpool(self, x, groups, name=None):
        """Max over points: rows of ``x`` form ``groups`` equal blocks."""
        return self._add("maxpool", (x,), name, groups=groups)

    def concat(self, a, b, name=None):
        return self._add("concat", (a, b), name)

    def pairwise_sqdist(self, x, name=None):
        return self._add("pairwise_sqdist", (x,), name)

    def add(self, a, b, name=None):
        return self._add("add", (a, b), name)

    def sub(self, a, b, name=None):
        return self._add("sub", (a, b), name)

    def mul(self, a, b, name=None):
        return self._add("mul", (a, b), name)

    def scale(self, a, c, name=None):
        return self._add("scale", (a,), name, c=float(c))

    def sum(self, a, name=None):
        return self._add("sum", (a,), name)

    def mean(self, a, name=None):
        return self._add("mean", (a,), name)

    def exp(self, a, name=None):
        return self._add("exp", (a,), name)

    def log(self, a, name=None):
        return self._add("log", (a,), name)

    def logsumexp(self, a, name=None):
        """Log-sum-exp over the last axis."""
        return self._add("logsumexp", (a,), name)

    def abs(self, a, name=None):
        return self._add("abs", (a,), name)

    def softplus(self, a, name=None):
        return self._add("softplus", (a,), name)

    def normalize_rows(self, a, name=None):
        return self._add("normalize_rows", (a,), name)

    def rowdot(self, a, b, name=None):
        return self._add("rowdot", (a, b), name)

    def columns(self, a, start, stop, name=None):
        return self._add("columns", (a,), name, start=start, stop=stop)

    def ranked_contrast(self, d2, mask, weight, tau, name=None):
        """Fused ranking contrastive loss on a squared-distance matrix.

        ``mask`` is an (N, N, N) boolean input selecting the denominator set of
        each (anchor, positive) pair and ``weight`` an (N, N) input holding the
        averaging weight of each pair (0 for pairs that do not contribute).
        """
        return self._add("ranked_contrast", (d2, mask, weight), name, tau=float(tau))

    # ------------------------------------------------------------ running

    def evaluate(self, bindings, outputs=()):
        """Forward pass. Returns the values of ``outputs`` as a list."""
        missing = [n for n in self.leaves if n not in bindings]
        if missing:
            raise ShapeError(f"unbound inputs: {missing}")
        vals = [None] * len(self.nodes)
        self._cache = {}
        for node in self.nodes:
            if node.op in LEAF_OPS:
                v = np.asarray(bindings[node.name])
                if not node.attrs["const"]:
                    v = v.astype(self.dtype, copy=False)
                shape = node.attrs["shape"]
                if shape is not None and tuple(v.shape) != tuple(shape):
                    raise ShapeError(
                        f"node {node.label!r}: bound shape {v.shape} != declared {tuple(shape)}"
                    )
                vals[node.id] = v
                continue
            args = [vals[i.id] for i in node.inputs]
            try:
                vals[node.id] = getattr(self, "_f_" + node.op)(node, *args)
            except ShapeError:
                raise
            except ValueError as exc:
                raise ShapeError(f"node {node.label!r} ({node.op}): {exc}") from None
        self.values = vals
        self.grads = None
        return [vals[n.id] for n in outputs]

    def value(self, node):
        if self.values is None:
            raise TapeStateError("evaluate() has not been run")
        return self.values[node.id]

    def gradients(self, output):
        """Backward pass from scalar ``output``.

        Returns ``{leaf name: gradient}`` for every leaf that requires grad.
        """
        if self.values is None:
            raise TapeStateError("gradients() called before evaluate()")
        out_val = self.values[output.id]
        if np.ndim(out_val) != 0:
            raise ShapeError(f"node {output.label!r}: gradient output must be scalar")
        grads = [None] * len(self.nodes)
        grads[output.id] = np.ones((), dtype=self.dtype)
        for node in reversed(self.nodes[: output.id + 1]):
            g = grads[node.id]
            if g is None or node.op in LEAF_OPS or not node.requires_grad:
                continue
            args = [self.values[i.id] for i in node.inputs]
            in_grads = getattr(self, "_b_" + node.op)(node, g, *args)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=self.dtype)
                grads[inp.id] = gi if grads[inp.id] is None else grads[inp.id] + gi
        self.grads = grads
        result = {}
        for name, leaf in self.leaves.items():
            if leaf.requires_grad:
                g = grads[leaf.id]
                result[name] = np.zeros_like(self.values[leaf.id]) if g is None else g
        return result

    # ------------------------------------------------------------ forward rules

    def _f_affine(self, node, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ValueError(f"incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
        return x @ w + b

    def _f_relu(self, node, x):
        return np.maximum(x, 0)

    def _f_maxpool(self, node, x):
        groups = node.attrs["groups"]
        if x.ndim != 2 or x.shape[0] % groups:
            raise ValueError(f"{x.shape[0]} rows do not split into {groups} groups")
        out, idx = kernels.maxpool_forward(x, groups)
        self._cache[node.id] = idx
        return out.astype(self.dtype, copy=False)

    def _f_concat(self, node, a, b):
        if a.shape[:-1] != b.shape[:-1]:
            raise ValueError(f"cannot concatenate {a.shape} and {b.shape}")
        return np.concatenate([a, b], axis=-1)

    def _f_pairwise_sqdist(self, node, x):
        if x.ndim != 2:
            raise ValueError(f"expected a 2-D array, got {x.shape}")
        diff = x[:, None, :] - x[None, :, :]
        return (diff * diff).sum(axis=-1)

    def _check_same(self, a, b):
        if np.shape(a) != np.shape(b) and np.ndim(a) and np.ndim(b):
            raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")

    def _f_add(self, node, a, b):
        self._check_same(a, b)
        return a + b

    def _f_sub(self, node, a, b):
        self._check_same(a, b)
        return a - b

    def _f_mul(self, node, a, b):
        self._check_same(a, b)
        return a * b

    def _f_scale(self, node, a):
        return a * self.dtype.type(node.attrs["c"])

    def _f_sum(self, node, a):
        return np.sum(a, dtype=self.dtype)

    def _f_mean(self, node, a):
        return np.sum(a, dtype=self.dtype) / self.dtype.type(a.size)

    def _f_exp(self, node, a):
        return np.exp(a)

    def _f_log(self, node, a):
        return np.log(a)

    def _f_logsumexp(self, node, a):
        m = np.max(a, axis=-1, keepdims=True)
        out = m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True))
        return out[..., 0]

    def _f_abs(self, node, a):
        return np.abs(a)

    def _f_softplus(self, node, a):
        return np.logaddexp(0, a).astype(self.dtype, copy=False)

    def _f_normalize_rows(self, node, a):
        n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        self._cache[node.id] = n
        return a / n

    def _f_rowdot(self, node, a, b):
        self._check_same(a, b)
        return (a * b).sum(axis=-1)

    def _f_columns(self, node, a):
        return a[:, node.attrs["start"]:node.attrs["stop"]]

    def _f_ranked_contrast(self, node, d2, mask, weight):
        n = d2.shape[0]
        if d2.shape != (n, n) or mask.shape != (n, n, n) or weight.shape != (n, n):
            raise ValueError(f"d2{d2.shape} mask{mask.shape} weight{weight.shape}")
        loss, gd2 = kernels.ranked_contrast(d2, mask, weight, node.attrs["tau"])
        self._cache[node.id] = gd2
        return self.dtype.type(loss)

    # ------------------------------------------------------------ backward rules

    def _b_affine(self, node, g, x, w, b):
        gx = g @ w.T if node.inputs[0].requires_grad else None
        return gx, x.T @ g, g.sum(axis=0)

    def _b_relu(self, node, g, x):
        return (g * (x > 0),)

    def _b_maxpool(self, node, g, x):
        n = x.shape[0] // node.attrs["groups"]
        return (kernels.maxpool_backward(np.ascontiguousarray(g), self._cache[node.id], n),)

    def _b_concat(self, node, g, a, b):
        k = a.shape[-1]
        return g[..., :k], g[..., k:]

    def _b_pairwise_sqdist(self, node, g, x):
        gs = g + g.T
        # d/dx_i sum_k gs_ik |x_i - x_k|^2 = 2 sum_k gs_ik (x_i - x_k)
        gx = 2.0 * (gs.sum(axis=1)[:, None] * x - gs @ x)
        return (gx,)

    def _unbroadcast(self, g, like):
        if np.ndim(like) == 0:
            return np.sum(g)
        return g

    def _b_add(self, node, g, a, b):
        return self._unbroadcast(g, a), self._unbroadcast(g, b)

    def _b_sub(self, node, g, a, b):
        return self._unbroadcast(g, a), self._unbroadcast(-g, b)

    def _b_mul(self, node, g, a, b):
        return self._unbroadcast(g * b, a), self._unbroadcast(g * a, b)

    def _b_scale(self, node, g, a):
        return (g * self.dtype.type(node.attrs["c"]),)

    def _b_sum(self, node, g, a):
        return (np.full(a.shape, g, dtype=self.dtype),)

    def _b_mean(self, node, g, a):
        return (np.full(a.shape, g / self.dtype.type(a.size), dtype=self.dtype),)

    def _b_exp(self, node, g, a):
        return (g * np.exp(a),)

    def _b_log(self, node, g, a):
        return (g / a,)

    def _b_logsumexp(self, node, g, a):
        out = self.values[node.id]
        return (np.asarray(g)[..., None] * np.exp(a - out[..., None]),)

    def _b_abs(self, node, g, a):
        return (g * np.sign(a),)

    def _b_softplus(self, node, g, a):
        sig = np.exp(-np.logaddexp(0, -a))
        return (g * sig,)

    def _b_normalize_rows(self, node, g, a):
        y = self.values[node.id]
        n = self._cache[node.id]
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    def _b_rowdot(self, node, g, a, b):
        return g[..., None] * b, g[..., None] * a

    def _b_columns(self, node, g, a):
        ga = np.zeros_like(a)
        ga[:, node.attrs["start"]:node.attrs["stop"]] = g
        return (ga,)

    def _b_ranked_contrast(self, node, g, d2, mask, weight):
        return g * self._cache[node.id], None, None


@dataclass
class FDResult:
    max_rel_error: float
    n_checked: int
    worst: tuple = ()
    note: str = ""
    errors: list = field(default_factory=list, repr=False)


def finite_diff_check(tape, output, bindings, n_coords=100, step=1e-5, seed=0, wrt=None):
    """Compare reverse-mode gradients with central differences.

    Samples ``n_coords`` coordinates uniformly from the flattened parameters
    (or the leaves named in ``wrt``). The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if wrt is None:
        wrt = [name for name, leaf in tape.leaves.items() if leaf.op == "param"]
    sizes = [np.asarray(bindings[name]).size for name in wrt]
    total = int(sum(sizes))
    if total == 0:
        return FDResult(0.0, 0, note="no parameter coordinates to sample")
    work = {k: (np.array(v, dtype=tape.dtype) if k in wrt else v) for k, v in bindings.items()}
    tape.evaluate(work)
    analytic = tape.gradients(output)
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst, errors = (), []
    max_err = 0.0
    for fid in np.sort(flat_ids):
        li = int(np.searchsorted(offsets, fid, side="right") - 1)
        name = wrt[li]
        arr = work[name].reshape(-1)
        pos = int(fid - offsets[li])
        orig = arr[pos]
        arr[pos] = orig + step
        fp = float(tape.evaluate(work, [output])[0])
        arr[pos] = orig - step
        fm = float(tape.evaluate(work, [output])[0])
        arr[pos] = orig
        num = (fp - fm) / (2.0 * step)
        ana = float(analytic[name].reshape(-1)[pos])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        errors.append((name, pos, ana, num, err))
        if err >= max_err:
            max_err, worst = err, (name, pos, ana, num)
    tape.evaluate(work)
    return FDResult(max_err, len(errors), worst, errors=errors)
