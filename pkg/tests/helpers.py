import numpy as np

from fragnet.network import MPF, ArchSpec, Conv, FCHead, Model, validate_arch

ACTS = ("tanh", "logistic", "identity")


def random_arch(rng, n_pool=None, window_range=(8, 32), max_maps=4, pool_choices=(2, 3)):
    """Random valid architecture, built backwards from the 1x1 head input.

    Layout: Conv, then (MPF, Conv) per pooling layer, then the head.
    """
    lo, hi = window_range
    for _ in range(10_000):
        n = int(rng.integers(1, 3)) if n_pool is None else n_pool
        pools = [int(rng.choice(pool_choices)) for _ in range(n)]
        kernels = [(int(rng.integers(1, 6)), int(rng.integers(1, 6))) for _ in range(n + 1)]
        rows, cols = kernels[-1]
        for k, (kr, kc) in zip(reversed(pools), reversed(kernels[:-1])):
            rows, cols = rows * k + kr - 1, cols * k + kc - 1
        if not (lo <= rows <= hi and lo <= cols <= hi):
            continue
        layers = []
        for i, (kr, kc) in enumerate(kernels):
            layers.append(Conv(kr, kc, int(rng.integers(1, max_maps + 1)), str(rng.choice(ACTS))))
            if i < n:
                layers.append(MPF(pools[i]))
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(0, 2))))
        layers.append(FCHead(hidden, int(rng.integers(2, 4)), str(rng.choice(ACTS[:2]))))
        arch = ArchSpec(rows, cols, tuple(layers))
        assert validate_arch(arch).ok, validate_arch(arch)
        return arch
    raise RuntimeError("no architecture found")


def stride_arch(pools, window_extra=1):
    """Small arch with the given pooling factors (2x2 convs between pools, 1x1 before the head)."""
    layers = []
    for k in pools:
        layers += [Conv(2, 2, 2), MPF(k)]
    layers += [Conv(window_extra, window_extra, 2), FCHead((), 2)]
    size = window_extra
    for k in reversed(pools):
        size = size * k + 1
    return ArchSpec(size, size, tuple(layers))


def tiny_arch():
    """73 parameters, 6x6 window, one 2x2 pooling layer."""
    return ArchSpec(6, 6, (Conv(3, 3, 2), MPF(2), Conv(2, 2, 3), FCHead((4,), 2)))


def random_model(arch, seed, scale=1.5):
    model = Model.build(arch, seed=seed, scale=scale)
    rng = np.random.default_rng(seed + 1000)
    theta = model.get_flat()
    # nonzero biases exercise the bias gradients too
    model.set_flat(theta + 0.1 * rng.standard_normal(theta.size) * (theta == 0))
    return model


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
