"""Layer kernels operating on fragment storages.

Every layer treats a storage as a list of independent fragments: the same
function is applied to each one and parameter gradients are summed over
them.  Backward functions take the loss gradient with respect to the layer
*output* (after the activation) and return it with respect to the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, InvalidInputError, ShapeError
from .tensor import Fragment, Storage, lineage_axes


# -- activations --------------------------------------------------------------

def _logistic(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


_FORWARD = {
    "identity": lambda z: z,
    "tanh": np.tanh,
    "logistic": _logistic,
}

# derivatives expressed through the activation output y
_DERIVATIVE = {
    "identity": lambda y: np.ones_like(y),
    "tanh": lambda y: 1.0 - y * y,
    "logistic": lambda y: y * (1.0 - y),
}

ACTIVATIONS = tuple(_FORWARD)


def activate(z, name: str):
    try:
        return _FORWARD[name](z)
    except KeyError:
        raise InvalidInputError(f"unknown activation {name!r}; choose from {ACTIVATIONS}") from None


def activation_grad(y, delta, name: str):
    """Chain ``delta`` (w.r.t. the activation output ``y``) back through the activation."""
    if name == "identity":
        return delta
    return delta * _DERIVATIVE[name](y)


# -- parameter containers -----------------------------------------------------

@dataclass(eq=False)
class ConvParams:
    """Fully connected bank of ``n_out x n_in`` correlation kernels."""

    weights: np.ndarray  # (n_out, n_in, k_rows, k_cols)
    bias: np.ndarray  # (n_out,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ShapeError(f"conv weights must be (n_out, n_in, k_rows, k_cols), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        if self.activation not in _FORWARD:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass(eq=False)
class DenseLayer:
    """One affine layer of the classifier head, applied per pixel."""

    weights: np.ndarray  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"dense weights {self.weights.shape} and bias {self.bias.shape} do not match")
        if self.activation not in _FORWARD:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class PoolIndexRecord:
    """Argmax positions chosen by one :func:`mpf_forward` call.

    ``rows[j]``/``cols[j]`` hold, for output fragment ``j`` and every map and
    pooled cell, the coordinates of the selected maximum inside the source
    input fragment ``j // k**2``.
    """

    k: int
    input_shapes: tuple[tuple[int, int, int], ...]
    rows: tuple[np.ndarray, ...] = field(repr=False)
    cols: tuple[np.ndarray, ...] = field(repr=False)

    def source(self, j: int) -> int:
        return j // (self.k * self.k)


# -- convolution --------------------------------------------------------------

def _correlate(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Valid 2D cross-correlation of an ``(n_in, H, W)`` stack with a kernel bank."""
    n_out, _, kr, kc = weights.shape
    h, w = x.shape[1] - kr + 1, x.shape[2] - kc + 1
    out = np.zeros((n_out, h, w), dtype=np.result_type(x, weights))
    for a in range(kr):
        for b in range(kc):
            out += np.tensordot(weights[:, :, a, b], x[:, a:a + h, b:b + w], axes=1)
    return out


def conv_forward(storage: Storage, params: ConvParams) -> Storage:
    kr, kc = params.kernel
    if storage.n_maps != params.n_in:
        raise ShapeError(f"conv expects {params.n_in} input maps, storage has {storage.n_maps}")
    out = []
    for i, frag in enumerate(storage):
        rows, cols = frag.shape
        if rows < kr or cols < kc:
            raise ShapeError(f"fragment {i} ({rows}x{cols}, lineage {frag.lineage}) is smaller than the {kr}x{kc} kernel")
        z = _correlate(frag.maps, params.weights)
        z += params.bias[:, None, None]
        out.append(activate(z, params.activation))
    return storage.like(out)


def conv_backward(inputs: Storage, outputs: Storage, delta_out: Storage, params: ConvParams,
                  need_input_delta: bool = True):
    """Returns ``(delta_in, grad_weights, grad_bias)``; ``delta_in`` is None when not requested."""
    if len(delta_out) != len(inputs) or len(outputs) != len(inputs):
        raise ShapeError(f"conv backward got {len(delta_out)} deltas for {len(inputs)} input fragments")
    kr, kc = params.kernel
    grad_w = np.zeros_like(params.weights)
    grad_b = np.zeros_like(params.bias)
    deltas = []
    for i, (x, y, d) in enumerate(zip(inputs, outputs, delta_out)):
        if d.maps.shape != y.maps.shape:
            raise ShapeError(f"fragment {i}: delta shape {d.maps.shape} != output shape {y.maps.shape}")
        dz = activation_grad(y.maps, d.maps, params.activation)
        h, w = dz.shape[1:]
        grad_b += dz.sum(axis=(1, 2))
        dx = np.zeros(x.maps.shape, dtype=dz.dtype) if need_input_delta else None
        for a in range(kr):
            for b in range(kc):
                window = x.maps[:, a:a + h, b:b + w]
                grad_w[:, :, a, b] += np.tensordot(dz, window, axes=([1, 2], [1, 2]))
                if dx is not None:
                    dx[:, a:a + h, b:b + w] += np.tensordot(params.weights[:, :, a, b].T, dz, axes=1)
        deltas.append(dx)
    delta_in = inputs.like(deltas) if need_input_delta else None
    return delta_in, grad_w, grad_b


# -- max pooling --------------------------------------------------------------

def _pool_blocks(x: np.ndarray, k: int):
    """Non-overlapping ``k x k`` max pooling of a map stack, partial blocks dropped.

    Returns the pooled stack and the row/col of each maximum in ``x``
    coordinates.  Ties go to the first element in row-major block order.
    """
    n, rows, cols = x.shape
    h, w = rows // k, cols // k
    blocks = x[:, :h * k, :w * k].reshape(n, h, k, w, k).transpose(0, 1, 3, 2, 4).reshape(n, h, w, k * k)
    idx = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(idx, k)
    r = di + k * np.arange(h)[None, :, None]
    c = dj + k * np.arange(w)[None, None, :]
    return pooled, r, c


def mpf_forward(storage: Storage, k: int):
    """Max pooling at every one of the ``k*k`` offsets, one output fragment each.

    Output fragments are ordered by input fragment, then offset in row-major
    order ``(0,0), (0,1), ..., (k-1,k-1)``.
    """
    k = int(k)
    if k < 1:
        raise InvalidInputError(f"pool factor must be >= 1, got {k}")
    out, rows, cols, shapes = [], [], [], []
    for i, frag in enumerate(storage):
        h, w = frag.shape
        if h < k or w < k:
            raise ShapeError(f"fragment {i} ({h}x{w}, lineage {frag.lineage}) is smaller than pool factor {k}")
        shapes.append(frag.maps.shape)
        for r in range(k):
            for c in range(k):
                pooled, pr, pc = _pool_blocks(frag.maps[:, r:, c:], k)
                out.append(Fragment(pooled, frag.lineage + ((r, c, k),)))
                rows.append(pr + r)
                cols.append(pc + c)
    record = PoolIndexRecord(k, tuple(shapes), tuple(rows), tuple(cols))
    return Storage(tuple(out)), record


def mpf_backward(delta_out: Storage, record: PoolIndexRecord) -> Storage:
    """Scatter-add output deltas onto the recorded argmax positions.

    An input element that was the maximum for several offsets receives the
    sum of all their deltas.
    """
    kk = record.k * record.k
    if len(delta_out) != len(record.input_shapes) * kk or len(record.rows) != len(delta_out):
        raise ConsistencyError(
            f"{len(delta_out)} delta fragments do not match {len(record.input_shapes)} inputs x {kk} offsets")
    deltas = []
    for s, (n, h, w) in enumerate(record.input_shapes):
        acc = np.zeros(n * h * w, dtype=delta_out.dtype)
        plane = (np.arange(n) * (h * w))[:, None, None]
        for j in range(s * kk, (s + 1) * kk):
            d = delta_out[j].maps
            if d.shape != record.rows[j].shape:
                raise ConsistencyError(f"delta fragment {j} shape {d.shape} != index shape {record.rows[j].shape}")
            flat = plane + record.rows[j] * w + record.cols[j]
            acc += np.bincount(flat.ravel(), weights=d.ravel(), minlength=n * h * w)
        deltas.append(Fragment(acc.reshape(n, h, w), delta_out[s * kk].lineage[:-1]))
    return Storage(tuple(deltas))


def mp_forward_patch(maps: np.ndarray, k: int):
    """Plain single-offset max pooling of one map stack (patch mode)."""
    maps = np.asarray(maps)
    if maps.ndim == 2:
        maps = maps[None]
    if k < 1:
        raise InvalidInputError(f"pool factor must be >= 1, got {k}")
    if maps.shape[1] < k or maps.shape[2] < k:
        raise ShapeError(f"map stack {maps.shape[1:]} is smaller than pool factor {k}")
    pooled, r, c = _pool_blocks(maps, k)
    return pooled, (r, c)


# -- classifier head ----------------------------------------------------------

def fc_forward(storage: Storage, layer: DenseLayer) -> Storage:
    if storage.n_maps != layer.n_in:
        raise ShapeError(f"dense layer expects {layer.n_in} channels, storage has {storage.n_maps}")
    out = []
    for frag in storage:
        z = np.tensordot(layer.weights, frag.maps, axes=1)
        z += layer.bias[:, None, None]
        out.append(activate(z, layer.activation))
    return storage.like(out)


def fc_backward(inputs: Storage, outputs: Storage, delta_out: Storage, layer: DenseLayer,
                need_input_delta: bool = True):
    grad_w = np.zeros_like(layer.weights)
    grad_b = np.zeros_like(layer.bias)
    deltas = []
    for x, y, d in zip(inputs, outputs, delta_out, strict=True):
        if d.maps.shape != y.maps.shape:
            raise ShapeError(f"dense delta shape {d.maps.shape} != output shape {y.maps.shape}")
        dz = activation_grad(y.maps, d.maps, layer.activation)
        grad_w += np.tensordot(dz, x.maps, axes=([1, 2], [1, 2]))
        grad_b += dz.sum(axis=(1, 2))
        if need_input_delta:
            deltas.append(np.tensordot(layer.weights.T, dz, axes=1))
    return (inputs.like(deltas) if need_input_delta else None), grad_w, grad_b


def dense_head_forward(storage: Storage, head: Sequence[DenseLayer]) -> list[Storage]:
    """Run the head per pixel; returns the storage after every head layer (last = logits)."""
    outs = []
    for layer in head:
        storage = fc_forward(storage, layer)
        outs.append(storage)
    return outs


def dense_head_backward(inputs: Storage, outputs: Sequence[Storage], delta_out: Storage,
                        head: Sequence[DenseLayer], need_input_delta: bool = True):
    """Backward through the whole head.

    ``outputs`` is the list returned by :func:`dense_head_forward`.  Returns
    ``(delta_in, [(grad_w, grad_b), ...])`` with gradients in layer order.
    """
    layer_inputs = [inputs, *outputs[:-1]]
    grads = []
    delta = delta_out
    for j in reversed(range(len(head))):
        need = need_input_delta or j > 0
        delta, gw, gb = fc_backward(layer_inputs[j], outputs[j], delta, head[j], need)
        grads.append((gw, gb))
    return delta, grads[::-1]


# -- loss ---------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def mcce_loss_and_delta(logits: Storage, target: np.ndarray, class_weights: Sequence[float],
                        n_pixels: int | None = None):
    """Class-weighted multi-class cross entropy, averaged over pixels.

    ``target`` is the per-pixel label image in full-resolution coordinates;
    fragment positions are routed to it through their lineage.  Positions
    that land outside ``target`` (planner margin) get zero delta.  Returns
    ``(loss, delta)`` with ``delta`` shaped like ``logits``.
    """
    target = np.asarray(target)
    weights = np.asarray(class_weights, dtype=np.float64)
    n_classes = logits.n_maps
    if weights.shape != (n_classes,):
        raise InvalidInputError(f"need {n_classes} class weights, got {weights.shape}")
    if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
        raise InvalidInputError(f"class weights must be positive and finite, got {weights}")
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")

    picked = []
    covered = 0
    for frag in logits:
        rows, cols = lineage_axes(frag.lineage, *frag.shape)
        rmask = rows < target.shape[0]
        cmask = cols < target.shape[1]
        picked.append((rmask, cmask, target[np.ix_(rows[rmask], cols[cmask])]))
        covered += int(rmask.sum()) * int(cmask.sum())
    n = covered if n_pixels is None else n_pixels

    loss = 0.0
    deltas = []
    for frag, (rmask, cmask, t) in zip(logits, picked):
        z = frag.maps[:, rmask][:, :, cmask]
        zmax = z.max(axis=0)
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
        zt = np.take_along_axis(z, t[None], axis=0)[0]
        w = weights[t]
        loss += float(np.sum(w * (lse - zt)))
        d_inner = np.exp(z - lse)
        np.put_along_axis(d_inner, t[None], np.take_along_axis(d_inner, t[None], axis=0) - 1.0, axis=0)
        d_inner *= w / n
        d = np.zeros_like(frag.maps)
        d[np.ix_(np.arange(n_classes), np.flatnonzero(rmask), np.flatnonzero(cmask))] = d_inner
        deltas.append(d)
    return loss / n, logits.like(deltas)
