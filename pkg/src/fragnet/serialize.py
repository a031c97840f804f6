"""Model files: magic/version line, JSON architecture echo, then every
parameter tensor in layer order using the text tensor dump format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError
from .network import ArchSpec, Model
from .tensor import dump_tensor, load_tensor

MAGIC = "FRAGNET-MODEL"
VERSION = 1


def save_model(path, model: Model, meta: dict | None = None) -> None:
    header = {"arch": model.arch.to_dict(), "meta": meta or {}}
    arrays = model.param_arrays()
    with open(path, "w") as fh:
        fh.write(f"{MAGIC} {VERSION}\n")
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(f"{len(arrays)}\n")
        for a in arrays:
            # conv kernels go out as n_out*n_in maps; vectors as one 1 x n row
            if a.ndim == 4:
                dump_tensor(a.reshape(-1, a.shape[2], a.shape[3]), fh)
            else:
                dump_tensor(np.atleast_2d(a), fh)


def load_model(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such model file")
    with path.open() as fh:
        magic = fh.readline().split()
        if len(magic) != 2 or magic[0] != MAGIC:
            raise DataError(f"{path}: not a model file")
        if int(magic[1]) != VERSION:
            raise DataError(f"{path}: unsupported model version {magic[1]}")
        try:
            header = json.loads(fh.readline())
            arch = ArchSpec.from_dict(header["arch"])
            model = Model.build(arch, seed=None)
        except (ValueError, KeyError, InvalidInputError) as exc:
            raise DataError(f"{path}: bad model header: {exc}") from exc
        arrays = model.param_arrays()
        if int(fh.readline()) != len(arrays):
            raise DataError(f"{path}: tensor count does not match the architecture")
        for a in arrays:
            t = load_tensor(fh)
            if t.size != a.size:
                raise DataError(f"{path}: tensor of {t.size} values where {a.shape} was expected")
            a[...] = t.reshape(a.shape)
    return model, header.get("meta", {})
