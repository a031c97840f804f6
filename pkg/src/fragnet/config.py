"""YAML run configuration: architecture plus training and preprocessing options.

Schema::

    window: 32                 # or [rows, cols]
    layers:                    # ordered; exactly one head, last
      - conv: {kernel: 5, maps: 8, activation: tanh}   # kernel: k or [kr, kc]
      - mpf: 2
      - head: {hidden: [100], classes: 2, activation: tanh}
    init: {seed: 0, scale: 1.0}
    data: {downsample: 1}
    train:
      optimizer: sgd-armijo    # or lbfgs
      epochs: 20
      class_weights: auto      # or a list, one per class
      augment: false           # random dihedral transform per presentation
      armijo: {c: 1.0e-4, beta: 0.5, alpha0: 0.1, max_backtracks: 20, alpha_growth: 2.0}
                           # next search starts at min(alpha_growth * last step, alpha0)
      lbfgs: {memory: 10, iters_per_epoch: 1, alpha0: 1.0}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import InvalidInputError
from .network import ArchSpec, validate_arch
from .optim import ArmijoConfig, LbfgsConfig, TrainConfig

EXAMPLE_CONFIG = Path(__file__).with_name("configs") / "window32.yaml"


@dataclass
class RunConfig:
    arch: ArchSpec
    train: TrainConfig
    init_seed: int = 0
    init_scale: float = 1.0
    downsample: int = 1
    raw: dict = field(default_factory=dict, repr=False)


def parse_config(cfg: dict, require_valid: bool = True) -> RunConfig:
    if not isinstance(cfg, dict):
        raise InvalidInputError("config must be a mapping")
    arch = ArchSpec.from_dict(cfg)
    if require_valid:
        report = validate_arch(arch)
        if not report.ok:
            raise InvalidInputError(f"architecture rejected: {report}")
    t = dict(cfg.get("train") or {})
    try:
        armijo = ArmijoConfig(**(t.pop("armijo", None) or {}))
        lb = dict(t.pop("lbfgs", None) or {})
        iters = int(lb.pop("iters_per_epoch", 1))
        lb_armijo = ArmijoConfig(alpha0=float(lb.pop("alpha0", 1.0)))
        lbfgs = LbfgsConfig(armijo=lb_armijo, **lb)
        weights = t.pop("class_weights", "auto")
        train = TrainConfig(
            optimizer=t.pop("optimizer", "sgd-armijo"),
            epochs=int(t.pop("epochs", 10)),
            shuffle_seed=int(t.pop("shuffle_seed", 0)),
            class_weights=weights if isinstance(weights, str) else [float(w) for w in weights],
            augment=bool(t.pop("augment", False)),
            armijo=armijo,
            lbfgs=lbfgs,
            lbfgs_iters_per_epoch=iters,
        )
    except TypeError as exc:
        raise InvalidInputError(f"bad train section: {exc}") from exc
    if t:
        raise InvalidInputError(f"unknown train keys {sorted(t)}")
    init = cfg.get("init") or {}
    downsample = int((cfg.get("data") or {}).get("downsample", 1))
    if downsample < 1:
        raise InvalidInputError("data.downsample must be >= 1")
    return RunConfig(arch, train, int(init.get("seed", 0)), float(init.get("scale", 1.0)), downsample, cfg)


def load_config(path, require_valid: bool = True) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"{path}: no such config file")
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    return parse_config(cfg, require_valid)
