"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for numerically
sensitive checks). Every differentiable operation records a node on an
implicit tape; ``backward`` replays the tape in reverse creation order,
which is a valid reverse topological order and makes gradient accumulation
deterministic.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# Toggle for the finiteness invariant on every op output. Kept on by default;
# the fast path only scans the array a second time when the f64 sum is bad.
FINITE_CHECKS = True


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class DimensionError(EngineError):
    """Shapes of the operands are incompatible."""


class UnsupportedKernelError(EngineError):
    """Convolution kernel cannot be used with symmetric same-padding."""


class DegenerateBatchError(EngineError):
    """Batch statistics are undefined for the given batch."""


class ContractError(EngineError):
    """An operation was called outside its contract."""


class NonFiniteError(EngineError):
    """A NaN or Inf appeared in an operation result."""


_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not FINITE_CHECKS:
        return
    # f64 total cannot overflow for any finite f32/f64 payload of sane size,
    # so a non-finite sum implies a non-finite entry.
    if not math.isfinite(float(arr.sum(dtype=np.float64))):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")


class Node:
    """One recorded operation: parents plus a vector-Jacobian closure."""

    __slots__ = ("nid", "parents", "vjp", "out")

    def __init__(self, parents: Sequence["Tensor"], vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.nid = next(_node_ids)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.out: Optional["Tensor"] = None


class Tensor:
    """Dense array value, optionally linked to the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        _check_finite(self.data, "tensor creation")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def detach(self) -> "Tensor":
        """Fresh leaf with a copy of the data (models a serialized payload)."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def register_op(out_data: np.ndarray, parents: Sequence[Tensor],
                vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
                op_name: str = "op") -> Tensor:
    """Wrap ``out_data`` as a Tensor, recording a tape node when needed.

    ``vjp`` maps the output gradient to one gradient (or None) per parent.
    """
    _check_finite(out_data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        node = Node(parents, vjp)
        node.out = out
        out.node = node
        out.requires_grad = True
    return out


class TapeGraph:
    """Ordered view of the tape nodes reachable from a root tensor."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = list(nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "TapeGraph":
        if root.node is None:
            return cls([])
        seen = set()
        collected = []
        stack = [root.node]
        while stack:
            node = stack.pop()
            if node.nid in seen:
                continue
            seen.add(node.nid)
            collected.append(node)
            for p in node.parents:
                if p.node is not None and p.node.nid not in seen:
                    stack.append(p.node)
        collected.sort(key=lambda n: n.nid)
        return cls(collected)

    def validate(self) -> None:
        """Every node's recorded parents must precede it (acyclicity)."""
        ids = [n.nid for n in self.nodes]
        if ids != sorted(ids):
            raise ContractError("tape nodes out of topological order")
        position = {nid: i for i, nid in enumerate(ids)}
        for i, node in enumerate(self.nodes):
            for p in node.parents:
                if p.node is not None and position[p.node.nid] >= i:
                    raise ContractError("tape parent does not precede its consumer")


def _accumulate(store: dict, key, grad: np.ndarray) -> None:
    prev = store.get(key)
    store[key] = grad if prev is None else prev + grad


def backward_from(root: Tensor, seed: np.ndarray, into: Optional[dict] = None) -> None:
    """Reverse sweep seeded with d(objective)/d(root) = ``seed``.

    Leaf gradients are added to each leaf's ``.grad`` unless ``into`` is
    given, in which case they accumulate there keyed by the leaf tensor.
    Nodes run in descending creation order, so accumulation order is fixed.
    """
    seed = np.asarray(seed, dtype=root.dtype)
    if seed.shape != root.shape:
        raise DimensionError(f"seed shape {seed.shape} != root shape {root.shape}")

    def deposit(leaf: Tensor, g: np.ndarray) -> None:
        if into is not None:
            _accumulate(into, leaf, g)
        else:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        _check_finite(leaf.grad if into is None else into[leaf], "backward")

    if root.node is None:
        if root.requires_grad:
            deposit(root, seed)
        return

    graph = TapeGraph.from_root(root)
    pending: dict[int, np.ndarray] = {root.node.nid: seed}
    for node in reversed(graph.nodes):
        out_grad = pending.pop(node.nid, None)
        if out_grad is None:
            continue
        parent_grads = node.vjp(out_grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            if parent.node is not None:
                _accumulate(pending, parent.node.nid, g)
            elif parent.requires_grad:
                deposit(parent, g)


def backward(loss: Tensor) -> None:
    """Gradients of a scalar loss for every requires-grad leaf it reaches."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    backward_from(loss, np.ones(loss.shape, dtype=loss.dtype))


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dtype:
            raise DimensionError(f"mixed dtypes {dtype} and {t.dtype}")
    return dtype


# ---------------------------------------------------------------------------
# layers / primitive ops
# ---------------------------------------------------------------------------

def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y[i,o] = sum_k x[i,k] * w[o,k] + b[o]."""
    _check_same_dtype(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    y = x.data @ w.data.T + b.data
    xd, wd = x.data, w.data

    def vjp(g):
        gx = g @ wd
        gw = g.T @ xd
        gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return register_op(y, (x, w, b), vjp, "linear")


def _same_pad(kh: int, kw: int) -> tuple[int, int]:
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedKernelError(f"same-padding needs odd kernel dims, got {kh}x{kw}")
    return (kh - 1) // 2, (kw - 1) // 2


def _windows(xpad: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """im2col matrix (B*H'*W', C*kh*kw) of all kernel-sized windows."""
    sw = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    B, C, Ho, Wo = sw.shape[:4]
    return sw.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw), Ho, Wo


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2D cross-correlation, spatial size preserved."""
    _check_same_dtype(x, kernels, bias)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    B, cin, H, W = x.shape
    cout, cin_k, kh, kw = kernels.shape
    if cin_k != cin:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} incompatible with kernels {kernels.shape}")
    ph, pw = _same_pad(kh, kw)
    xpad = np.zeros((B, cin, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    xpad[:, :, ph:ph + H, pw:pw + W] = x.data
    kd = kernels.data
    cols, _, _ = _windows(xpad, kh, kw)
    y = (cols @ kd.reshape(cout, -1).T).reshape(B, H, W, cout).transpose(0, 3, 1, 2) \
        + bias.data[None, :, None, None]

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, cout)
        gk = (g2.T @ cols).reshape(cout, cin, kh, kw)
        # input gradient = cross-correlation of the padded output gradient
        # with the spatially flipped kernel, in/out channels swapped
        gpad = np.zeros((B, cout, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
        gpad[:, :, ph:ph + H, pw:pw + W] = g
        kflip = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gcols, _, _ = _windows(gpad, kh, kw)
        gx = (gcols @ kflip.reshape(cin, -1).T).reshape(B, H, W, cin).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        return gx, gk, gb

    return register_op(y, (x, kernels, bias), vjp, "conv2d")


class BatchNormState:
    """Running mean/variance for one batchnorm layer (mutated in train mode)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), dtype=self.running_mean.dtype)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batchnorm2d_forward(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                        train: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over (B, H, W); train mode updates running stats."""
    _check_same_dtype(x, gamma, beta)
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm2d: gamma {gamma.shape} / beta {beta.shape} vs {C} channels")
    dtype = x.dtype
    n = B * H * W
    if train:
        if n < 2:
            raise DegenerateBatchError(f"batchnorm needs >= 2 values per channel in train mode, got {n}")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = np.square(x.data - mean[None, :, None, None].astype(dtype)).mean(axis=(0, 2, 3), dtype=np.float64)
        state.running_mean = ((1.0 - momentum) * state.running_mean + momentum * mean.astype(dtype)).astype(dtype)
        state.running_var = ((1.0 - momentum) * state.running_var + momentum * var.astype(dtype)).astype(dtype)
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = (x.data - mean.astype(dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    gd = gamma.data

    if train:
        def vjp(g):
            gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            # dL/dx through the batch statistics
            gx = (gd * inv_std)[None, :, None, None] / n * (
                n * g
                - gbeta[None, :, None, None]
                - xhat * ggamma[None, :, None, None]
            )
            return gx.astype(g.dtype), ggamma, gbeta
    else:
        def vjp(g):
            gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            gx = g * (gd * inv_std)[None, :, None, None]
            return gx.astype(g.dtype), ggamma, gbeta

    return register_op(y, (x, gamma, beta), vjp, "batchnorm2d")


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    pos = x.data >= 0
    y = np.where(pos, x.data, x.dtype.type(slope) * x.data)

    def vjp(g):
        return (np.where(pos, g, g.dtype.type(slope) * g),)

    return register_op(y, (x,), vjp, "leaky_relu")


def hard_sigmoid(x: Tensor) -> Tensor:
    """clamp(x/6 + 1/2, 0, 1)."""
    dt = x.dtype.type
    y = np.clip(x.data * dt(1.0 / 6.0) + dt(0.5), dt(0.0), dt(1.0))
    interior = (x.data > -3.0) & (x.data < 3.0)

    def vjp(g):
        return (np.where(interior, g * g.dtype.type(1.0 / 6.0), g.dtype.type(0.0)),)

    return register_op(y, (x,), vjp, "hard_sigmoid")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return register_op(x.data.reshape(shape), (x,), vjp, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    if x.data.ndim < 2:
        raise DimensionError(f"flatten expects a batch axis, got shape {x.shape}")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    _check_same_dtype(*tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ref_rest = ref[:axis] + ref[axis + 1:]
        other_rest = other[:axis] + other[axis + 1:]
        if len(ref) != len(other) or ref_rest != other_rest:
            raise DimensionError(f"concat: incompatible shapes {tuple(ref)} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(sl)])
        return grads

    return register_op(out, tensors, vjp, "concat")


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_dtype(x, y)
    if x.shape != y.shape:
        raise DimensionError(f"add: shapes {x.shape} and {y.shape} differ")

    def vjp(g):
        return g, g

    return register_op(x.data + y.data, (x, y), vjp, "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same_dtype(x, y)
    if x.shape != y.shape:
        raise DimensionError(f"mul: shapes {x.shape} and {y.shape} differ")
    xd, yd = x.data, y.data

    def vjp(g):
        return g * yd, g * xd

    return register_op(xd * yd, (x, y), vjp, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)

    def vjp(g):
        return (g * c,)

    return register_op(x.data * c, (x,), vjp, "scale")


def sum_all(x: Tensor) -> Tensor:
    """Scalar sum of all entries (64-bit accumulation)."""
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    shp = x.shape

    def vjp(g):
        return (np.broadcast_to(np.asarray(g, dtype=g.dtype), shp).copy(),)

    return register_op(total, (x,), vjp, "sum_all")


def finite_diff_grad(f: Callable[[Tensor], float], theta: Tensor, eps: float) -> Tensor:
    """Central-difference gradient of a parameter-to-scalar map.

    Perturbs ``theta`` in place coordinate by coordinate and restores it;
    ``f`` is re-evaluated at each probe. Use float64 parameters for tight
    tolerances.
    """
    if eps <= 0:
        raise ContractError("finite_diff_grad needs eps > 0")
    flat = theta.data.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(theta))
        flat[i] = orig - eps
        fm = float(f(theta))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(theta.shape), dtype=np.float64)
