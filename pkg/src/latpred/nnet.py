"""Minimal dense-tensor autodiff core.

Reverse-mode differentiation over float64 numpy arrays, sized for the small
MLP/GCN regression models used elsewhere in this package. Gradients are built
out of the same differentiable primitives, so ``grad`` can be applied to a
graph that already contains gradients (needed to backpropagate through inner
gradient-descent steps). Includes the Adam optimizer and a named parameter
container with stable iteration order.
"""

from __future__ import annotations

import contextlib
import json
import zipfile
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "GradDepthError",
    "as_tensor",
    "constant",
    "leaf",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "relu",
    "concat",
    "narrow",
    "reshape",
    "tsum",
    "tmean",
    "broadcast_to",
    "mse_loss",
    "grad",
    "normalize_adjacency",
    "gcn_layer",
    "AdamState",
    "adam_step",
    "ParamSet",
    "save_params",
    "load_params",
]

# Cap on nested differentiation; two inner steps plus the outer meta-gradient
# reach depth 3, so the default leaves generous headroom.
MAX_GRAD_DEPTH = 8

_checks_enabled = True


@contextlib.contextmanager
def _no_finite_checks():
    global _checks_enabled
    prev = _checks_enabled
    _checks_enabled = False
    try:
        yield
    finally:
        _checks_enabled = prev


class NonFiniteError(FloatingPointError):
    """A sanctioned op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GradDepthError(RuntimeError):
    """Differentiation nesting exceeded MAX_GRAD_DEPTH."""


class Tensor:
    """Node of the computation graph: float64 data plus backward closures.

    ``parents`` and ``vjps`` are parallel tuples; ``vjps[i]`` maps the adjoint
    of this node to the adjoint contribution of ``parents[i]``, expressed in
    taped primitives so that gradient graphs stay differentiable.
    """

    __slots__ = ("data", "parents", "vjps", "requires_grad", "gdepth", "op")

    def __init__(self, data, parents=(), vjps=(), requires_grad=False, gdepth=0, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _checks_enabled and arr.size and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.data = arr
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.gdepth = gdepth
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # Arithmetic sugar; the module-level functions are the real ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def constant(x) -> Tensor:
    return Tensor(x, op="const")


def leaf(x) -> Tensor:
    """Differentiable leaf (parameter or probed input)."""
    return Tensor(x, requires_grad=True, op="leaf")


def _result(data, parents, vjps, op):
    req = any(p.requires_grad for p in parents)
    depth = max((p.gdepth for p in parents), default=0)
    return Tensor(data, tuple(parents), tuple(vjps), req, depth, op)


def _sum_to(t: Tensor, shape) -> Tensor:
    """Reduce ``t`` to ``shape`` by summing broadcast axes (differentiable)."""
    if t.shape == tuple(shape):
        return t
    extra = t.ndim - len(shape)
    for _ in range(extra):
        t = tsum(t, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and t.shape[ax] != 1:
            t = tsum(t, axis=ax, keepdims=True)
    if t.shape != tuple(shape):
        raise ShapeError(f"cannot reduce {t.shape} to {tuple(shape)}")
    return t


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    return _result(
        data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e
    return _result(
        data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(neg(g), b.shape)),
        "sub",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), (lambda g: neg(g),), "neg")


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; also serves as broadcast_mul."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    return _result(
        data,
        (a, b),
        (lambda g: _sum_to(mul(g, b), a.shape), lambda g: _sum_to(mul(g, a), b.shape)),
        "mul",
    )


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes),
        (a,),
        (lambda g: transpose(g, inv),),
        "transpose",
    )


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking rules; operands must be >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from e
    return _result(
        data,
        (a, b),
        (
            lambda g: _sum_to(matmul(g, _swap_last(b)), a.shape),
            lambda g: _sum_to(matmul(_swap_last(a), g), b.shape),
        ),
        "matmul",
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _result(
        np.maximum(a.data, 0.0),
        (a,),
        (lambda g: mul(g, constant(mask)),),
        "relu",
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)
    vjps = []
    for i, t in enumerate(ts):
        start, length = int(offsets[i]), sizes[i]
        vjps.append(lambda g, s=start, n=length: narrow(g, ax, s, n))
    return _result(data, tuple(ts), tuple(vjps), "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        pads = [(0, 0)] * a.ndim
        pads[axis] = (start, a.shape[axis] - start - length)
        return _pad(g, pads)

    return _result(a.data[idx], (a,), (vjp,), "narrow")


def _pad(a, pads) -> Tensor:
    a = as_tensor(a)
    pads = tuple(tuple(p) for p in pads)
    orig = a.shape

    def vjp(g):
        out = g
        for ax, (lo, hi) in enumerate(pads):
            if lo or hi:
                out = narrow(out, ax, lo, orig[ax])
        return out

    return _result(np.pad(a.data, pads), (a,), (vjp,), "pad")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _result(
        a.data.reshape(shape),
        (a,),
        (lambda g: reshape(g, orig),),
        "reshape",
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    orig = a.shape

    def vjp(g):
        if axis is None:
            return broadcast_to(reshape(g, (1,) * len(orig)) if orig else g, orig)
        if not keepdims:
            kshape = list(orig)
            kshape[axis] = 1
            g = reshape(g, tuple(kshape))
        return broadcast_to(g, orig)

    return _result(data, (a,), (vjp,), "sum")


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _result(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        (lambda g: _sum_to(g, orig),),
        "broadcast_to",
    )


def mse_loss(pred, target) -> Tensor:
    """Mean squared error; differentiable in both arguments."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# Backward pass


def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Adjoints of ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are themselves graph
    nodes, so a later ``grad`` call differentiates through them. Tensors in
    ``wrt`` that the output does not depend on get zero gradients.
    """
    if output.gdepth >= MAX_GRAD_DEPTH:
        raise GradDepthError(f"grad nesting exceeds MAX_GRAD_DEPTH={MAX_GRAD_DEPTH}")
    order = _topo(output)
    wrt_ids = {id(w) for w in wrt}
    # restrict the backward walk to nodes that actually depend on wrt
    needed: set[int] = set(wrt_ids)
    for node in order:  # parents precede consumers
        if id(node) not in needed and any(id(p) in needed for p in node.parents):
            needed.add(id(node))

    adjoint: dict[int, Tensor] = {}
    seed_depth = output.gdepth + 1
    seed = Tensor(np.ones_like(output.data), requires_grad=create_graph,
                  gdepth=seed_depth, op="grad_seed")
    adjoint[id(output)] = seed

    ctx = contextlib.nullcontext() if create_graph else _no_finite_checks()
    with ctx:
        for node in reversed(order):
            if id(node) not in needed:
                adjoint.pop(id(node), None)
                continue
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad or id(parent) not in needed:
                    continue
                contrib = vjp(g)
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = contrib if prev is None else add(prev, contrib)
            if id(node) in wrt_ids:
                adjoint[id(node)] = g

    out = []
    for w in wrt:
        g = adjoint.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.data),
                       gdepth=seed_depth if create_graph else 0, op="grad_zero")
        if not create_graph:
            # a detached gradient is a constant: later differentiation never
            # flows through it, so it carries no nesting depth
            g = g.detach()
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Graph convolution


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops.

    The (possibly directed) 0/1 adjacency is first closed to an undirected
    graph, then A_hat = D^-1/2 (A + A^T + I) D^-1/2 with D the degree matrix
    of the self-looped graph. Precompute once per graph topology.
    """
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    a = np.clip(adj + adj.T, 0.0, 1.0) + np.eye(adj.shape[0])
    d = a.sum(axis=1)
    dinv = 1.0 / np.sqrt(d)
    return a * dinv[:, None] * dinv[None, :]


def gcn_layer(h: Tensor, adj_norm, w: Tensor) -> Tensor:
    """One graph-convolution layer: relu(A_hat @ H @ W).

    ``adj_norm`` is the precomputed normalized adjacency (see
    :func:`normalize_adjacency`); ``h`` may carry a leading batch axis.
    """
    a = as_tensor(adj_norm)
    if a.shape[0] != h.shape[-2]:
        raise ShapeError(f"gcn_layer: adjacency {a.shape} vs features {h.shape}")
    return relu(matmul(matmul(a, h), w))


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self._scratch: dict[str, np.ndarray] = {}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction.

    ``grads`` values may be Tensors or arrays; a NaN/Inf gradient aborts with
    the offending parameter's name before any tensor is touched. The bias
    correction is folded into the step size, algebraically identical to the
    textbook form.
    """
    b1, b2 = betas
    gs = {}
    for name in params:
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {params[name].shape} for '{name}'")
        gs[name] = g
    state.t += 1
    t = state.t
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    step = lr * np.sqrt(bc2) / bc1
    eps_hat = eps * np.sqrt(bc2)
    for name, p in params.items():
        g = gs[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
            state._scratch[name] = np.empty_like(p.data)
        v = state.v[name]
        s = state._scratch[name]
        np.multiply(g, 1 - b1, out=s)
        m *= b1
        m += s
        np.multiply(g, g, out=s)
        s *= 1 - b2
        v *= b2
        v += s
        np.sqrt(v, out=s)
        s += eps_hat
        np.divide(m, s, out=s)
        s *= step
        p.data -= s


# ---------------------------------------------------------------------------
# Parameter container and checkpoints

CHECKPOINT_VERSION = 1


class ParamSet:
    """Named parameter tensors with stable order and fixed group labels."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, data, group: str) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = leaf(np.array(data, dtype=np.float64))
        self._tensors[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def group(self, name: str) -> str:
        return self._groups[name]

    def group_names(self, group: str) -> list[str]:
        return [n for n, g in self._groups.items() if g == group]

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def n_params(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self._tensors.items():
            out.add(n, t.data.copy(), self._groups[n])
        return out

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for n, arr in values.items():
            if n not in self._tensors:
                raise KeyError(f"unknown parameter '{n}'")
            if self._tensors[n].shape != arr.shape:
                raise ShapeError(f"checkpoint shape {arr.shape} vs model {self._tensors[n].shape} for '{n}'")
            self._tensors[n].data[...] = arr


def save_params(path, params: ParamSet, extra_manifest: dict | None = None) -> None:
    """Write a versioned checkpoint: npz of named arrays + JSON manifest entry."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "groups": {n: params.group(n) for n in params},
        "shapes": {n: list(params[n].shape) for n in params},
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    arrays = {n: params[n].data for n in params}
    np.savez(path, **arrays)
    with zipfile.ZipFile(path, "a") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files if k != "manifest.json"}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    return arrays, manifest
