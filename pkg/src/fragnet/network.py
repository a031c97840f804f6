"""Whole-image networks: architecture, geometry planning, dense passes.

The dense forward pass mirror-pads the image so that every pixel is the
centre of one full window, pushes the single-fragment storage through all
layers, and interleaves the final fragments back into a full-resolution
probability map.  Pixel ``(i, j)``'s window covers padded rows
``i .. i + window_rows - 1``; the window is anchored with
``(window - 1) // 2`` pixels above/left of the pixel, which reduces to the
usual centred patch for odd windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .data import mirror_pad
from .errors import ConsistencyError, InvalidInputError, ShapeError
from .layers import (
    ACTIVATIONS,
    ConvParams,
    DenseLayer,
    conv_backward,
    conv_forward,
    fc_backward,
    fc_forward,
    mcce_loss_and_delta,
    mpf_backward,
    mpf_forward,
    softmax,
)
from .tensor import Storage, lineage_axes, storage_from_image


# -- architecture -------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    k_rows: int
    k_cols: int
    n_out: int
    activation: str = "tanh"


@dataclass(frozen=True)
class MPF:
    k: int


@dataclass(frozen=True)
class FCHead:
    hidden: tuple[int, ...]
    n_classes: int
    activation: str = "tanh"


LayerSpec = Union[Conv, MPF, FCHead]


@dataclass(frozen=True)
class ArchSpec:
    window_rows: int
    window_cols: int
    layers: tuple[LayerSpec, ...]

    @property
    def head(self) -> FCHead:
        return self.layers[-1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].n_classes

    @property
    def pool_factors(self) -> list[int]:
        return [l.k for l in self.layers if isinstance(l, MPF)]

    @property
    def stride(self) -> int:
        return int(np.prod(self.pool_factors, dtype=np.int64))

    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            if isinstance(l, Conv):
                out.append({"conv": {"kernel": [l.k_rows, l.k_cols], "maps": l.n_out, "activation": l.activation}})
            elif isinstance(l, MPF):
                out.append({"mpf": l.k})
            else:
                out.append({"head": {"hidden": list(l.hidden), "classes": l.n_classes, "activation": l.activation}})
        return {"window": [self.window_rows, self.window_cols], "layers": out}

    @classmethod
    def from_dict(cls, cfg: dict) -> "ArchSpec":
        """Parse the ``window`` / ``layers`` part of a config mapping."""
        try:
            window = cfg["window"]
            wr, wc = (window, window) if isinstance(window, int) else (int(window[0]), int(window[1]))
            layers: list[LayerSpec] = []
            for entry in cfg["layers"]:
                if not isinstance(entry, dict) or len(entry) != 1:
                    raise InvalidInputError(f"layer entry must be a single-key mapping, got {entry!r}")
                kind, body = next(iter(entry.items()))
                if kind == "conv":
                    kernel = body["kernel"]
                    kr, kc = (kernel, kernel) if isinstance(kernel, int) else (int(kernel[0]), int(kernel[1]))
                    layers.append(Conv(kr, kc, int(body["maps"]), body.get("activation", "tanh")))
                elif kind == "mpf":
                    layers.append(MPF(int(body)))
                elif kind == "head":
                    layers.append(FCHead(tuple(int(h) for h in body.get("hidden", ())), int(body["classes"]),
                                         body.get("activation", "tanh")))
                else:
                    raise InvalidInputError(f"unknown layer kind {kind!r} (expected conv, mpf or head)")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInputError):
                raise
            raise InvalidInputError(f"malformed architecture config: {exc!r}") from exc
        return cls(wr, wc, tuple(layers))


@dataclass
class GeometryReport:
    ok: bool
    shapes: list[tuple[int, int]]  # patch-mode size after each layer, starting with the window
    failed_layer: int | None = None
    message: str = ""

    def __str__(self):
        chain = " -> ".join(f"{r}x{c}" for r, c in self.shapes)
        status = "valid" if self.ok else f"INVALID at layer {self.failed_layer}: {self.message}"
        return f"{chain}: {status}"


def validate_arch(spec: ArchSpec) -> GeometryReport:
    """Check that a window shrinks to exactly 1x1 at the classifier head."""
    rows, cols = spec.window_rows, spec.window_cols
    shapes = [(rows, cols)]

    def fail(i, msg):
        return GeometryReport(False, shapes, i, msg)

    if rows < 1 or cols < 1:
        return fail(None, f"window must be at least 1x1, got {rows}x{cols}")
    heads = [i for i, l in enumerate(spec.layers) if isinstance(l, FCHead)]
    if heads != [len(spec.layers) - 1]:
        return fail(heads[0] if heads else None, "exactly one FCHead is required and it must be last")
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if layer.k_rows < 1 or layer.k_cols < 1 or layer.n_out < 1:
                return fail(i, "conv kernel and map count must be >= 1")
            if layer.activation not in ACTIVATIONS:
                return fail(i, f"unknown activation {layer.activation!r}")
            if layer.k_rows > rows or layer.k_cols > cols:
                return fail(i, f"{layer.k_rows}x{layer.k_cols} kernel exceeds {rows}x{cols} input")
            rows, cols = rows - layer.k_rows + 1, cols - layer.k_cols + 1
        elif isinstance(layer, MPF):
            if layer.k < 1:
                return fail(i, "pool factor must be >= 1")
            if rows % layer.k or cols % layer.k:
                return fail(i, f"{rows}x{cols} is not divisible by pool factor {layer.k}")
            rows, cols = rows // layer.k, cols // layer.k
        else:
            if layer.n_classes < 2 or any(h < 1 for h in layer.hidden):
                return fail(i, "head needs >= 2 classes and positive hidden sizes")
            if layer.activation not in ACTIVATIONS:
                return fail(i, f"unknown activation {layer.activation!r}")
            if (rows, cols) != (1, 1):
                return fail(i, f"spatial extent at the head is {rows}x{cols}, expected 1x1")
        shapes.append((rows, cols))
    return GeometryReport(True, shapes)


# -- geometry planning --------------------------------------------------------

@dataclass(frozen=True)
class GeometryPlan:
    image_rows: int
    image_cols: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    stride: int
    # fragment sizes after every layer, per fragment
    fragment_sizes: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False)

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (self.image_rows + self.pad_top + self.pad_bottom,
                self.image_cols + self.pad_left + self.pad_right)


def _axis_coverage(length: int, window: int, layers: Sequence[LayerSpec], axis: int) -> np.ndarray:
    """Simulate one axis of the dense pass; returns write counts per output coordinate."""
    frags = [((), length)]
    for layer in layers:
        if isinstance(layer, Conv):
            k = layer.k_rows if axis == 0 else layer.k_cols
            frags = [(lin, n - k + 1) for lin, n in frags]
            if any(n < 1 for _, n in frags):
                return np.zeros(0, dtype=np.int64)
        elif isinstance(layer, MPF):
            k = layer.k
            nxt = []
            for lin, n in frags:
                for r in range(k):
                    if (n - r) // k < 1:
                        return np.zeros(0, dtype=np.int64)
                    nxt.append((lin + (r,), (n - r) // k))
            frags = nxt
    pools = [l.k for l in layers if isinstance(l, MPF)]
    counts = np.zeros(length, dtype=np.int64)
    for lin, n in frags:
        pos = np.arange(n)
        for r, k in zip(reversed(lin), reversed(pools)):
            pos = r + k * pos
        np.add.at(counts, pos, 1)
    return counts


def _plan_axis(size: int, window: int, layers, axis: int) -> tuple[int, int]:
    before = (window - 1) // 2
    after = window - 1 - before
    for extra in range(0, 4 * window + 64):
        counts = _axis_coverage(size + before + after + extra, window, layers, axis)
        if counts.size >= size and np.all(counts[:size] == 1) and np.all(counts <= 1):
            return before, after + extra
    raise ConsistencyError(f"no padding gives full coverage for size {size}, window {window}")


def plan_geometry(spec: ArchSpec, image_rows: int, image_cols: int) -> GeometryPlan:
    report = validate_arch(spec)
    if not report.ok:
        raise InvalidInputError(f"architecture rejected: {report}")
    if image_rows < 1 or image_cols < 1:
        raise InvalidInputError(f"image must be at least 1x1, got {image_rows}x{image_cols}")
    top, bottom = _plan_axis(image_rows, spec.window_rows, spec.layers, 0)
    left, right = _plan_axis(image_cols, spec.window_cols, spec.layers, 1)
    if max(top, bottom) >= image_rows or max(left, right) >= image_cols:
        raise InvalidInputError(
            f"image {image_rows}x{image_cols} is too small to mirror-pad for a "
            f"{spec.window_rows}x{spec.window_cols} window (needs padding {top}/{bottom}/{left}/{right})")
    sizes = _fragment_sizes(spec, image_rows + top + bottom, image_cols + left + right)
    return GeometryPlan(image_rows, image_cols, top, bottom, left, right, spec.stride, sizes)


def _fragment_sizes(spec: ArchSpec, rows: int, cols: int):
    frags = [(rows, cols)]
    out = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            frags = [(r - layer.k_rows + 1, c - layer.k_cols + 1) for r, c in frags]
        elif isinstance(layer, MPF):
            k = layer.k
            frags = [((r - a) // k, (c - b) // k) for r, c in frags for a in range(k) for b in range(k)]
        out.append(tuple(frags))
    return tuple(out)


# -- model --------------------------------------------------------------------

@dataclass(frozen=True)
class PoolLayer:
    k: int


Layer = Union[ConvParams, PoolLayer, DenseLayer]


class Model:
    """Parameters of one network, layer by layer.

    ``layers`` holds :class:`ConvParams`, :class:`PoolLayer` and (for the
    head) :class:`DenseLayer` objects.  The flat parameter order is layer
    order, and within a layer the weights in row-major
    ``(n_out, n_in, k_rows, k_cols)`` order followed by the biases.
    """

    def __init__(self, arch: ArchSpec, layers: list[Layer]):
        self.arch = arch
        self.layers = layers

    @classmethod
    def build(cls, arch: ArchSpec, seed: int | None = 0, scale: float = 1.0, dtype=np.float64) -> "Model":
        """Random init: weights ~ N(0, scale^2 / fan_in), zero biases.  ``seed=None`` gives all zeros."""
        report = validate_arch(arch)
        if not report.ok:
            raise InvalidInputError(f"architecture rejected: {report}")
        rng = np.random.default_rng(seed) if seed is not None else None

        def draw(shape, fan_in):
            if rng is None:
                return np.zeros(shape, dtype=dtype)
            return (rng.standard_normal(shape) * (scale / np.sqrt(fan_in))).astype(dtype)

        layers: list[Layer] = []
        n_in = 1
        for spec in arch.layers:
            if isinstance(spec, Conv):
                w = draw((spec.n_out, n_in, spec.k_rows, spec.k_cols), n_in * spec.k_rows * spec.k_cols)
                layers.append(ConvParams(w, np.zeros(spec.n_out, dtype=dtype), spec.activation))
                n_in = spec.n_out
            elif isinstance(spec, MPF):
                layers.append(PoolLayer(spec.k))
            else:
                sizes = [*spec.hidden, spec.n_classes]
                for j, n_out in enumerate(sizes):
                    act = spec.activation if j < len(sizes) - 1 else "identity"
                    layers.append(DenseLayer(draw((n_out, n_in), n_in), np.zeros(n_out, dtype=dtype), act))
                    n_in = n_out
        return cls(arch, layers)

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if isinstance(layer, (ConvParams, DenseLayer)):
                out.extend((layer.weights, layer.bias))
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    @property
    def dtype(self):
        return self.param_arrays()[0].dtype

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {theta.shape}")
        pos = 0
        for a in self.param_arrays():
            a[...] = theta[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def astype(self, dtype) -> "Model":
        clone = Model.build(self.arch, seed=None, dtype=dtype)
        clone.set_flat(self.get_flat().astype(dtype))
        return clone

    def copy(self) -> "Model":
        return self.astype(self.dtype)


# -- dense passes -------------------------------------------------------------

@dataclass
class TapeStep:
    layer: Layer
    inputs: Storage
    outputs: Storage
    record: object = None


@dataclass
class Tape:
    plan: GeometryPlan
    steps: list[TapeStep]

    @property
    def logits(self) -> Storage:
        return self.steps[-1].outputs


def _pad_image(image: np.ndarray, plan: GeometryPlan) -> np.ndarray:
    return mirror_pad(image, plan.pad_top, plan.pad_bottom, plan.pad_left, plan.pad_right)


def run_layers(storage: Storage, model: Model) -> list[TapeStep]:
    steps = []
    for layer in model.layers:
        if isinstance(layer, ConvParams):
            out, rec = conv_forward(storage, layer), None
        elif isinstance(layer, PoolLayer):
            out, rec = mpf_forward(storage, layer.k)
        else:
            out, rec = fc_forward(storage, layer), None
        steps.append(TapeStep(layer, storage, out, rec))
        storage = out
    return steps


def forward_dense(image, model: Model, plan: GeometryPlan | None = None):
    """Probability map ``(n_classes, rows, cols)`` for every pixel, plus the tape for backward."""
    image = np.asarray(image, dtype=model.dtype)
    if plan is None:
        plan = plan_geometry(model.arch, *image.shape)
    elif (plan.image_rows, plan.image_cols) != image.shape:
        raise ShapeError(f"plan is for {plan.image_rows}x{plan.image_cols}, image is {image.shape}")
    steps = run_layers(storage_from_image(_pad_image(image, plan)), model)
    tape = Tape(plan, steps)
    logits = defragment(tape.logits, plan)
    return softmax(logits, axis=0), tape


def dense_loss(image, labels, model: Model, class_weights, plan: GeometryPlan | None = None) -> float:
    """Forward-only loss, as used by line searches."""
    _, tape = forward_dense(image, model, plan)
    loss, _ = mcce_loss_and_delta(tape.logits, labels, class_weights, n_pixels=labels.size)
    return loss


def backward_dense(tape: Tape, target, class_weights, model: Model | None = None):
    """Loss and flat parameter gradient (same order as :meth:`Model.get_flat`)."""
    target = np.asarray(target)
    plan = tape.plan
    if target.shape != (plan.image_rows, plan.image_cols):
        raise ShapeError(f"target {target.shape} does not match planned image {plan.image_rows}x{plan.image_cols}")
    loss, delta = mcce_loss_and_delta(tape.logits, target, class_weights, n_pixels=target.size)
    grads: list[list[np.ndarray]] = []
    for i in reversed(range(len(tape.steps))):
        step = tape.steps[i]
        need = i > 0
        if isinstance(step.layer, ConvParams):
            delta, gw, gb = conv_backward(step.inputs, step.outputs, delta, step.layer, need)
            grads.append([gw, gb])
        elif isinstance(step.layer, PoolLayer):
            delta = mpf_backward(delta, step.record)
        else:
            delta, gw, gb = fc_backward(step.inputs, step.outputs, delta, step.layer, need)
            grads.append([gw, gb])
    flat = [g.ravel() for pair in reversed(grads) for g in pair]
    return loss, np.concatenate(flat)


def coverage_counts(storage: Storage, plan: GeometryPlan) -> np.ndarray:
    """How many times each full-resolution position is written by defragmentation."""
    counts = np.zeros(plan.padded_shape, dtype=np.int64)
    for frag in storage:
        rows, cols = lineage_axes(frag.lineage, *frag.shape)
        if rows.size and (rows[-1] >= counts.shape[0] or cols[-1] >= counts.shape[1]):
            raise ConsistencyError(f"fragment {frag.lineage} reaches beyond the padded grid")
        counts[np.ix_(rows, cols)] += 1
    return counts


def defragment(storage: Storage, plan: GeometryPlan) -> np.ndarray:
    """Interleave fragments into an ``(n_maps, image_rows, image_cols)`` stack."""
    counts = coverage_counts(storage, plan)
    if counts.max(initial=0) > 1:
        raise ConsistencyError("defragmentation wrote some pixel more than once")
    h, w = plan.image_rows, plan.image_cols
    if not np.all(counts[:h, :w] == 1):
        raise ConsistencyError(f"defragmentation left {int((counts[:h, :w] == 0).sum())} pixels unwritten")
    out = np.zeros((storage.n_maps, *plan.padded_shape), dtype=storage.dtype)
    for frag in storage:
        rows, cols = lineage_axes(frag.lineage, *frag.shape)
        out[:, rows[:, None], cols[None, :]] = frag.maps
    return out[:, :h, :w]
