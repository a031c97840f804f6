"""Optimizers, class weighting and training loops."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Item, class_pixel_counts, dihedral_augment
from .errors import InvalidInputError
from .network import Model, backward_dense, dense_loss, forward_dense, plan_geometry

log = logging.getLogger(__name__)

LossGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]
Loss = Callable[[np.ndarray], float]


@dataclass
class ArmijoConfig:
    c: float = 1e-4
    beta: float = 0.5
    alpha0: float = 0.1
    max_backtracks: int = 20
    alpha_growth: float = 2.0

    def __post_init__(self):
        if not 0 < self.c < 1 or not 0 < self.beta < 1 or self.alpha0 <= 0:
            raise InvalidInputError(f"invalid Armijo constants {self}")
        if self.max_backtracks < 0 or self.alpha_growth < 1:
            raise InvalidInputError(f"invalid Armijo schedule {self}")


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 100
    grad_tolerance: float = 1e-8
    armijo: ArmijoConfig = field(default_factory=lambda: ArmijoConfig(alpha0=1.0))
    curvature_eps: float = 1e-10

    def __post_init__(self):
        if self.memory < 1:
            raise InvalidInputError(f"LBFGS memory must be >= 1, got {self.memory}")


@dataclass
class TrainConfig:
    optimizer: str = "sgd-armijo"
    epochs: int = 10
    shuffle_seed: int = 0
    class_weights: Sequence[float] | str = "auto"
    augment: bool = False
    armijo: ArmijoConfig = field(default_factory=ArmijoConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    lbfgs_iters_per_epoch: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("sgd-armijo", "lbfgs"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")


class NonFiniteError(InvalidInputError):
    """Loss or gradient became NaN/Inf."""


def _check_finite(loss, grad, where):
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite loss or gradient at {where}")


# -- line search --------------------------------------------------------------

@dataclass
class StepResult:
    params: np.ndarray
    alpha: float
    loss: float  # loss at the returned params
    accepted: bool
    backtracks: int


def armijo_search(params, loss, grad, direction, eval_loss: Loss, config: ArmijoConfig,
                  alpha: float | None = None) -> StepResult:
    """Backtrack along ``direction`` until ``L(p + a d) <= L(p) + c a g.d``.

    When no step is accepted within ``max_backtracks`` halvings the original
    ``params`` object is returned untouched.
    """
    slope = float(np.dot(grad, direction))
    alpha = config.alpha0 if alpha is None else alpha
    for n in range(config.max_backtracks + 1):
        trial = params + alpha * direction
        new_loss = eval_loss(trial)
        if math.isfinite(new_loss) and new_loss <= loss + config.c * alpha * slope:
            return StepResult(trial, alpha, new_loss, True, n)
        alpha *= config.beta
    return StepResult(params, 0.0, loss, False, config.max_backtracks)


def armijo_step(params, eval_loss_grad: LossGrad, config: ArmijoConfig, alpha: float | None = None,
                eval_loss: Loss | None = None) -> tuple[StepResult, float, np.ndarray]:
    """One steepest-descent step safeguarded by backtracking.

    Returns the step result together with the loss and gradient at the
    starting point.
    """
    loss, grad = eval_loss_grad(params)
    _check_finite(loss, grad, "armijo step start")
    eval_loss = eval_loss or (lambda p: eval_loss_grad(p)[0])
    result = armijo_search(params, loss, grad, -grad, eval_loss, config, alpha)
    return result, loss, grad


# -- LBFGS --------------------------------------------------------------------

@dataclass
class LbfgsHistory:
    memory: int
    pairs: deque = field(default=None)
    loss: float | None = None
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.pairs is None:
            self.pairs = deque(maxlen=self.memory)

    def __len__(self):
        return len(self.pairs)


def two_loop_direction(grad: np.ndarray, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    q = grad.copy()
    coeffs = []
    for s, y in reversed(pairs):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        coeffs.append((rho, a))
    if pairs:
        s, y = pairs[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(pairs, reversed(coeffs)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def lbfgs_step(history: LbfgsHistory, params, eval_loss_grad: LossGrad, config: LbfgsConfig,
               eval_loss: Loss | None = None):
    """One LBFGS iteration; returns ``(step_result, history)``.

    ``history`` caches the loss and gradient at ``params`` between calls.
    With an empty history the first step is plain steepest descent scaled
    by ``config.armijo.alpha0``.
    """
    if history.grad is None:
        history.loss, history.grad = eval_loss_grad(params)
    loss, grad = history.loss, history.grad
    _check_finite(loss, grad, "lbfgs step start")
    pairs = list(history.pairs)
    direction = two_loop_direction(grad, pairs)
    if np.dot(direction, grad) >= 0:
        log.debug("lbfgs direction is not a descent direction, using -grad")
        direction = -grad
        pairs = []
    alpha = config.armijo.alpha0 if not pairs else 1.0
    eval_loss = eval_loss or (lambda p: eval_loss_grad(p)[0])
    result = armijo_search(params, loss, grad, direction, eval_loss, config.armijo, alpha)
    if not result.accepted:
        return result, history
    new_loss, new_grad = eval_loss_grad(result.params)
    s = result.params - params
    y = new_grad - grad
    # relative test: an absolute threshold would drop every pair near convergence
    if np.dot(s, y) > config.curvature_eps * np.linalg.norm(s) * np.linalg.norm(y):
        history.pairs.append((s, y))
    history.loss, history.grad = new_loss, new_grad
    result.loss = new_loss
    return result, history


def minimize_lbfgs(params, eval_loss_grad: LossGrad, config: LbfgsConfig, callback=None):
    """Iterate :func:`lbfgs_step` until the gradient norm drops below tolerance."""
    history = LbfgsHistory(config.memory)
    params = np.array(params, dtype=np.float64)
    for it in range(config.max_iters):
        if history.grad is None:
            history.loss, history.grad = eval_loss_grad(params)
        if np.linalg.norm(history.grad) < config.grad_tolerance:
            break
        result, history = lbfgs_step(history, params, eval_loss_grad, config)
        if callback is not None:
            callback(it, result, history)
        if not result.accepted:
            break
        params = result.params
    return params, history


def finite_diff_gradient(params, eval_loss: Loss, step: float = 1e-5) -> np.ndarray:
    """Central differences, one parameter at a time."""
    if step <= 0:
        raise InvalidInputError(f"step must be positive, got {step}")
    params = np.array(params, dtype=np.float64)
    grad = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up = eval_loss(params)
        params[i] = orig - step
        down = eval_loss(params)
        params[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


# -- class weights ------------------------------------------------------------

def auto_class_weights(items: Sequence[Item], n_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)``."""
    counts = class_pixel_counts(items, n_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise InvalidInputError(f"classes {missing} never occur; pass explicit class weights")
    return counts.sum() / (n_classes * counts.astype(np.float64))


# -- evaluation helpers -------------------------------------------------------

def predict_labels(model: Model, image) -> np.ndarray:
    probs, _ = forward_dense(image, model)
    return probs.argmax(axis=0)


def balanced_pixel_error(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Mean over present classes of the per-class pixel error rate."""
    rates = []
    for c in range(n_classes):
        mask = labels == c
        if mask.any():
            rates.append(float(np.mean(pred[mask] != c)))
    return float(np.mean(rates)) if rates else float("nan")


def dataset_balanced_error(model: Model, items: Sequence[Item], n_classes: int) -> float:
    if not items:
        return float("nan")
    preds = np.concatenate([predict_labels(model, it.image).ravel() for it in items])
    labels = np.concatenate([it.labels.ravel() for it in items])
    return balanced_pixel_error(preds, labels, n_classes)


# -- training -----------------------------------------------------------------

@dataclass
class StepRecord:
    """One optimizer step, handed to ``train``'s ``on_step`` callback."""

    epoch: int
    item_id: str
    params_before: np.ndarray
    params_after: np.ndarray
    loss_before: float
    loss_after: float
    slope: float  # g . d at the starting point
    alpha: float
    accepted: bool
    image: np.ndarray
    labels: np.ndarray


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_pixel_error: float
    accepted_alpha_mean: float
    skipped_steps: int
    warning: str = ""


LOG_COLUMNS = ("epoch", "meanLoss", "valPixelError", "acceptedAlphaMean", "skippedSteps")


def write_epoch_log(path, logs: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for e in logs:
            writer.writerow((e.epoch, repr(e.mean_loss), repr(e.val_pixel_error),
                             repr(e.accepted_alpha_mean), e.skipped_steps))


def _resolve_weights(config: TrainConfig, train_items, n_classes) -> np.ndarray:
    if isinstance(config.class_weights, str):
        if config.class_weights != "auto":
            raise InvalidInputError(f"class_weights must be 'auto' or a list, got {config.class_weights!r}")
        return auto_class_weights(train_items, n_classes)
    weights = np.asarray(config.class_weights, dtype=np.float64)
    if weights.shape != (n_classes,) or np.any(weights <= 0):
        raise InvalidInputError(f"need {n_classes} positive class weights, got {config.class_weights}")
    return weights


class _Objective:
    """Loss/gradient closures for one image (or a list of images) under a model."""

    def __init__(self, model: Model, items: Sequence[tuple[np.ndarray, np.ndarray]], weights):
        self.model = model
        self.items = items
        self.weights = weights
        self.plans = {}

    def _plan(self, shape):
        if shape not in self.plans:
            self.plans[shape] = plan_geometry(self.model.arch, *shape)
        return self.plans[shape]

    def loss(self, theta) -> float:
        self.model.set_flat(theta)
        total = 0.0
        for image, labels in self.items:
            total += dense_loss(image, labels, self.model, self.weights, self._plan(labels.shape))
        return total / len(self.items)

    def loss_grad(self, theta):
        self.model.set_flat(theta)
        total, grad = 0.0, np.zeros(self.model.n_params)
        for image, labels in self.items:
            _, tape = forward_dense(image, self.model, self._plan(labels.shape))
            loss, g = backward_dense(tape, labels, self.weights)
            total += loss
            grad += g
        n = len(self.items)
        return total / n, grad / n


def train(dataset: Dataset, model: Model, config: TrainConfig, on_step=None, on_epoch=None):
    """Train ``model`` in place; returns ``(model, epoch_logs)``.

    ``sgd-armijo`` takes one safeguarded step per training image, visiting
    images in a fresh seeded order each epoch.  ``lbfgs`` works on the mean
    loss over the whole training split.
    """
    n_classes = model.arch.n_classes
    train_items = dataset.split("train")
    val_items = dataset.split("validation")
    if not train_items:
        raise InvalidInputError("dataset has no training items")
    for it in train_items + val_items:
        plan_geometry(model.arch, *it.labels.shape)
    weights = _resolve_weights(config, train_items, n_classes)
    rng = np.random.default_rng(config.shuffle_seed)
    theta = model.get_flat().astype(np.float64)
    logs: list[EpochLog] = []
    alpha = config.armijo.alpha0
    history = LbfgsHistory(config.lbfgs.memory)
    batch = _Objective(model, [(it.image, it.labels) for it in train_items], weights)

    for epoch in range(1, config.epochs + 1):
        losses, alphas, skipped, steps = [], [], 0, 0
        if config.optimizer == "sgd-armijo":
            for idx in rng.permutation(len(train_items)):
                it = train_items[idx]
                image, labels = it.image, it.labels
                if config.augment:
                    image, labels = dihedral_augment(image, labels, int(rng.integers(8)))
                obj = _Objective(model, [(image, labels)], weights)
                result, loss, grad = armijo_step(theta, obj.loss_grad, config.armijo, alpha, obj.loss)
                steps += 1
                losses.append(loss)
                if result.accepted:
                    alphas.append(result.alpha)
                    # grow back after backtracking, never past alpha0
                    alpha = min(result.alpha * config.armijo.alpha_growth, config.armijo.alpha0)
                else:
                    skipped += 1
                    alpha = config.armijo.alpha0
                if on_step is not None:
                    on_step(StepRecord(epoch, it.id, theta, result.params, loss, result.loss,
                                       -float(np.dot(grad, grad)), result.alpha, result.accepted, image, labels))
                theta = result.params
        else:
            for _ in range(config.lbfgs_iters_per_epoch):
                if history.grad is None:
                    history.loss, history.grad = batch.loss_grad(theta)
                losses.append(history.loss)
                result, history = lbfgs_step(history, theta, batch.loss_grad, config.lbfgs, batch.loss)
                steps += 1
                if result.accepted:
                    alphas.append(result.alpha)
                    theta = result.params
                else:
                    skipped += 1
        model.set_flat(theta)
        val_err = dataset_balanced_error(model, val_items, n_classes)
        warning = ""
        if steps and skipped / steps > 0.5:
            warning = f"epoch {epoch}: {skipped}/{steps} steps skipped"
            log.warning(warning)
        entry = EpochLog(epoch, float(np.mean(losses)), val_err,
                         float(np.mean(alphas)) if alphas else 0.0, skipped, warning)
        logs.append(entry)
        log.info("epoch %d loss %.5f val-error %.4f alpha %.3g skipped %d",
                 epoch, entry.mean_loss, val_err, entry.accepted_alpha_mean, skipped)
        if on_epoch is not None and on_epoch(entry) is False:
            break
    model.set_flat(theta)
    return model, logs
