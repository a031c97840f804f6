"""Naive patch-by-patch evaluation of a network.

This is the reference the dense fragment path is checked against, and the
baseline it is timed against.  Each pixel's window is cut out of the
mirror-padded image and run through a classical single-patch network; no
work is shared between overlapping patches.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .data import mirror_pad
from .errors import InvalidInputError, ShapeError
from .layers import ConvParams, DenseLayer, activate, activation_grad, mp_forward_patch, softmax
from .network import Model, PoolLayer


def _window(window) -> tuple[int, int]:
    wr, wc = (window, window) if np.isscalar(window) else window
    if wr < 1 or wc < 1:
        raise InvalidInputError(f"window must be positive, got {window}")
    return int(wr), int(wc)


def _pads(window) -> tuple[int, int, int, int]:
    wr, wc = _window(window)
    return (wr - 1) // 2, wr // 2, (wc - 1) // 2, wc // 2


def extract_patch(image, center, window) -> np.ndarray:
    """The ``window`` around ``center`` from the mirror-padded image.

    For even windows the extra row/column falls below/right of the centre.
    """
    image = np.asarray(image)
    row, col = center
    if not (0 <= row < image.shape[0] and 0 <= col < image.shape[1]):
        raise InvalidInputError(f"center {center} is outside the {image.shape} image")
    wr, wc = _window(window)
    padded = mirror_pad(image, *_pads(window))
    return padded[row:row + wr, col:col + wc]


def iter_patches(image, window) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
    """Yield ``((row, col), patch)`` for every pixel in row-major order."""
    image = np.asarray(image)
    wr, wc = _window(window)
    padded = mirror_pad(image, *_pads(window))
    for i in range(image.shape[0]):
        for j in range(image.shape[1]):
            yield (i, j), padded[i:i + wr, j:j + wc]


def count_patches(image, window) -> int:
    """Number of windows a patch-by-patch evaluation of ``image`` visits."""
    return sum(1 for _ in iter_patches(image, window))


# -- single-patch network -----------------------------------------------------

def _conv(x, params: ConvParams):
    kr, kc = params.kernel
    windows = np.lib.stride_tricks.sliding_window_view(x, (kr, kc), axis=(1, 2))
    z = np.tensordot(params.weights, windows, axes=([1, 2, 3], [0, 3, 4]))
    return z + params.bias[:, None, None]


def _forward_patch(patch, model: Model):
    x = np.asarray(patch, dtype=model.dtype)[None]
    trace = []
    for layer in model.layers:
        if isinstance(layer, ConvParams):
            y = activate(_conv(x, layer), layer.activation)
            trace.append((x, y, None))
        elif isinstance(layer, PoolLayer):
            if x.shape[1] % layer.k or x.shape[2] % layer.k:
                raise ShapeError(f"patch-mode pooling needs {x.shape[1:]} divisible by {layer.k}")
            y, idx = mp_forward_patch(x, layer.k)
            trace.append((x, y, idx))
        else:
            if x.ndim != 1:
                if x.shape[1:] != (1, 1):
                    raise ShapeError(f"head reached with spatial extent {x.shape[1:]}")
                x = x[:, 0, 0]
            y = activate(layer.weights @ x + layer.bias, layer.activation)
            trace.append((x, y, None))
        x = y
    return x, trace


def forward_patch(patch, model: Model) -> np.ndarray:
    """Class probabilities for one window."""
    logits, _ = _forward_patch(patch, model)
    return softmax(logits)


def grad_patch(patch, label: int, class_weights: Sequence[float], model: Model, normalizer: float = 1.0):
    """``(loss, flat_gradient)`` for one window.

    The loss is ``-w[label] * log p[label] / normalizer``; with
    ``normalizer`` equal to the image's pixel count the per-patch terms sum
    to the whole-image mean loss.
    """
    weights = np.asarray(class_weights, dtype=np.float64)
    n_classes = model.arch.n_classes
    if not 0 <= label < n_classes:
        raise InvalidInputError(f"label {label} outside [0, {n_classes})")
    logits, trace = _forward_patch(patch, model)
    p = softmax(logits)
    w = weights[label]
    loss = -w * np.log(p[label]) / normalizer
    delta = p.copy()
    delta[label] -= 1.0
    delta *= w / normalizer

    grads = []
    for layer, (x, y, idx) in zip(reversed(model.layers), reversed(trace)):
        if isinstance(layer, DenseLayer):
            dz = activation_grad(y, delta, layer.activation)
            grads.append((np.outer(dz, x), dz))
            delta = layer.weights.T @ dz
        elif isinstance(layer, PoolLayer):
            if delta.ndim == 1:
                delta = delta[:, None, None]
            back = np.zeros_like(x)
            r, c = idx
            maps = np.arange(x.shape[0])[:, None, None]
            back[maps, r, c] = delta
            delta = back
        else:
            if delta.ndim == 1:
                delta = delta[:, None, None]
            dz = activation_grad(y, delta, layer.activation)
            kr, kc = layer.kernel
            windows = np.lib.stride_tricks.sliding_window_view(x, (kr, kc), axis=(1, 2))
            gw = np.tensordot(dz, windows, axes=([1, 2], [1, 2]))
            padded = np.pad(dz, ((0, 0), (kr - 1, kr - 1), (kc - 1, kc - 1)))
            dwin = np.lib.stride_tricks.sliding_window_view(padded, (kr, kc), axis=(1, 2))
            delta = np.tensordot(layer.weights[:, :, ::-1, ::-1], dwin, axes=([0, 2, 3], [0, 3, 4]))
            grads.append((gw, dz.sum(axis=(1, 2))))
    flat = [g.ravel() for pair in reversed(grads) for g in pair]
    return float(loss), np.concatenate(flat)


def _window_of(model: Model) -> tuple[int, int]:
    return model.arch.window_rows, model.arch.window_cols


def dense_via_patches(image, model: Model, pixels: Sequence[tuple[int, int]] | None = None) -> np.ndarray:
    """Probability map built by evaluating every pixel's window separately.

    ``pixels`` restricts the evaluation to a subset (other entries stay 0).
    """
    image = np.asarray(image, dtype=model.dtype)
    wr, wc = _window_of(model)
    padded = mirror_pad(image, *_pads((wr, wc)))
    out = np.zeros((model.arch.n_classes, *image.shape), dtype=model.dtype)
    if pixels is None:
        pixels = ((i, j) for i in range(image.shape[0]) for j in range(image.shape[1]))
    for i, j in pixels:
        out[:, i, j] = forward_patch(padded[i:i + wr, j:j + wc], model)
    return out


def patch_loss_and_gradient(image, labels, class_weights, model: Model):
    """Whole-image loss and gradient summed from per-patch contributions."""
    image = np.asarray(image, dtype=model.dtype)
    labels = np.asarray(labels)
    n = labels.size
    total_loss = 0.0
    total = np.zeros(model.n_params, dtype=np.float64)
    for (i, j), patch in iter_patches(image, _window_of(model)):
        loss, g = grad_patch(patch, int(labels[i, j]), class_weights, model, normalizer=n)
        total_loss += loss
        total += g
    return total_loss, total
