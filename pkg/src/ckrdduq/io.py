"""Columnar sample tables and small persistence helpers."""
from __future__ import annotations

import json
import os
from collections import OrderedDict

import numpy as np


class TableError(ValueError):
    pass


class SampleTable:
    """Ordered named float columns of equal length.

    Vector quantities are stored as groups of scalar columns named
    ``<prefix>_<k>`` (e.g. ``xi_1_0``, ``tau_1_3``); :meth:`group` gathers
    them back into a matrix.
    """

    def __init__(self, columns: dict | None = None):
        self.columns: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for k, v in (columns or {}).items():
            self[k] = v

    def __len__(self) -> int:
        return 0 if not self.columns else next(iter(self.columns.values())).shape[0]

    def __contains__(self, name) -> bool:
        return name in self.columns

    def __getitem__(self, name) -> np.ndarray:
        return self.columns[name]

    def __setitem__(self, name, values) -> None:
        if not name.isascii() or any(c.isspace() for c in name):
            raise TableError(f"column name {name!r} must be ASCII without whitespace")
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if self.columns and name not in self.columns and values.shape[0] != len(self):
            raise TableError(f"column {name} has {values.shape[0]} rows, table has {len(self)}")
        if np.isnan(values).any():
            raise TableError(f"column {name} has missing values")
        self.columns[name] = values

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def set_group(self, prefix: str, matrix) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        matrix = matrix.reshape(matrix.shape[0], -1)
        for k in range(matrix.shape[1]):
            self[f"{prefix}_{k}"] = matrix[:, k]

    def group(self, prefix: str) -> np.ndarray:
        names = [n for n in self.columns if n.startswith(prefix + "_") and n[len(prefix) + 1:].isdigit()]
        names.sort(key=lambda n: int(n[len(prefix) + 1:]))
        if not names:
            return np.zeros((len(self), 0))
        return np.column_stack([self.columns[n] for n in names])

    def save(self, path) -> None:
        data = np.column_stack(list(self.columns.values())) if self.columns else np.zeros((0, 0))
        np.savetxt(path, data, fmt="%.17g", header=" ".join(self.columns), comments="")

    @classmethod
    def load(cls, path) -> "SampleTable":
        with open(path) as fh:
            header = fh.readline().split()
        data = np.loadtxt(path, skiprows=1, ndmin=2)
        if data.size == 0:
            data = np.zeros((0, len(header)))
        if data.shape[1] != len(header):
            raise TableError(f"{path}: {data.shape[1]} columns but {len(header)} names")
        return cls({name: data[:, k] for k, name in enumerate(header)})


def save_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
    os.replace(tmp, path)


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")
