"""Named, ordered collections of dense float64 parameter tensors.

A :class:`ParamStore` is the value type for whole-model parameters and for
gradients (``GradStore`` is the same structure).  Entries are immutable
after construction; all arithmetic returns new stores and never mutates
inputs.  Binary operations require *congruence*: identical names, order,
and shapes.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import StructuralMismatchError


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out is arr and arr.flags.writeable:
        out = out.copy()
    out.flags.writeable = False
    return out


class ParamStore:
    """Ordered mapping name -> float64 array, immutable after construction."""

    __slots__ = ("_names", "_arrays", "total_len")

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] | Mapping[str, np.ndarray]):
        if isinstance(entries, Mapping):
            entries = entries.items()
        names: list[str] = []
        arrays: list[np.ndarray] = []
        for name, arr in entries:
            names.append(str(name))
            arrays.append(_freeze(np.asarray(arr)))
        if len(set(names)) != len(names):
            raise StructuralMismatchError("duplicate parameter names in store")
        self._names = tuple(names)
        self._arrays = tuple(arrays)
        self.total_len = int(sum(a.size for a in arrays))

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self._arrays)

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._names

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self._names, self._arrays))

    def congruent_with(self, other: "ParamStore") -> bool:
        return self._names == other._names and self.shapes() == other.shapes()

    def flat(self) -> np.ndarray:
        """Row-major concatenation of all entries, in store order."""
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1) for a in self._arrays])

    def map(self, fn) -> "ParamStore":
        return ParamStore((name, fn(arr)) for name, arr in self)

    def __repr__(self) -> str:
        return f"ParamStore({len(self._names)} entries, {self.total_len} params)"


# Gradients share the exact structure of the parameters they differentiate.
GradStore = ParamStore


def require_congruent(x: ParamStore, y: ParamStore, what: str = "stores") -> None:
    if not x.congruent_with(y):
        raise StructuralMismatchError(
            f"{what} are not congruent: names/shapes differ "
            f"({len(x)} vs {len(y)} entries)"
        )


def axpy(a: float, x: ParamStore, b: float, y: ParamStore) -> ParamStore:
    """Elementwise a*x + b*y over congruent stores."""
    require_congruent(x, y)
    a = float(a)
    b = float(b)
    return ParamStore(
        (name, a * ax + b * ay) for (name, ax), (_, ay) in zip(x, y)
    )


def scale(a: float, x: ParamStore) -> ParamStore:
    return x.map(lambda arr: float(a) * arr)


def dot(x: ParamStore, y: ParamStore) -> float:
    """Sum_i x_i * y_i over the flattened concatenation, in store order."""
    require_congruent(x, y)
    total = 0.0
    for (_, ax), (_, ay) in zip(x, y):
        total += float(np.dot(ax.reshape(-1), ay.reshape(-1)))
    return total


def l2_norm(x: ParamStore) -> float:
    return float(np.sqrt(dot(x, x)))


def zeros_like(x: ParamStore) -> ParamStore:
    return x.map(np.zeros_like)
