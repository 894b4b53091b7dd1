from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from framework.errors import ShapeError

Layer = Tuple[np.ndarray, np.ndarray]


@dataclass(eq=False)
class ParamVector:
    """Weights and biases of one MLP, stored layer by layer.

    Weight matrices are (in, out) so a forward pass is `x @ W + b`.
    `version` is bumped on every in-place update; forward caches record it
    so a backward pass against modified parameters is caught.
    """

    layers: List[Layer]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        checked: List[Layer] = []
        for i, (w, b) in enumerate(self.layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
                raise ShapeError(f"weight {w.shape} and bias {b.shape} do not form a layer", i)
            if checked and checked[-1][0].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"input width {w.shape[0]} does not chain with previous output {checked[-1][0].shape[1]}", i
                )
            checked.append((w, b))
        self.layers = checked

    @property
    def total_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    @property
    def shapes(self) -> List[Tuple[Tuple[int, int], Tuple[int]]]:
        return [(w.shape, b.shape) for w, b in self.layers]

    def arrays(self) -> Iterator[np.ndarray]:
        for w, b in self.layers:
            yield w
            yield b

    def array_names(self) -> List[str]:
        names = []
        for i in range(len(self.layers)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()]) if self.layers else np.zeros(0)

    @classmethod
    def from_flat(cls, template: "ParamVector", values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (template.total_count,):
            raise ShapeError(f"expected {template.total_count} values, got {values.shape}")
        layers, pos = [], 0
        for w, b in template.layers:
            nw = values[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            nb = values[pos : pos + b.size].copy()
            pos += b.size
            layers.append((nw.copy(), nb))
        return cls(layers)

    @classmethod
    def zeros(cls, shapes: Sequence[Tuple[int, int]]) -> "ParamVector":
        return cls([(np.zeros((n_in, n_out)), np.zeros(n_out)) for n_in, n_out in shapes])

    def zeros_like(self) -> "ParamVector":
        return ParamVector([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def copy(self) -> "ParamVector":
        return ParamVector([(w.copy(), b.copy()) for w, b in self.layers])

    def check_layout(self, other: "ParamVector") -> None:
        if len(self.layers) != len(other.layers):
            raise ShapeError(f"layer count {len(self.layers)} vs {len(other.layers)}")
        for i, ((w, b), (ow, ob)) in enumerate(zip(self.layers, other.layers)):
            if w.shape != ow.shape or b.shape != ob.shape:
                raise ShapeError(f"shapes {w.shape}/{b.shape} vs {ow.shape}/{ob.shape}", i)

    def add_scaled(self, other: "ParamVector", scale: float) -> "ParamVector":
        """Return self + scale * other as a new vector."""
        self.check_layout(other)
        return ParamVector(
            [(w + scale * ow, b + scale * ob) for (w, b), (ow, ob) in zip(self.layers, other.layers)]
        )

    def scaled(self, scale: float) -> "ParamVector":
        return ParamVector([(scale * w, scale * b) for w, b in self.layers])

    def sub(self, other: "ParamVector") -> "ParamVector":
        return self.add_scaled(other, -1.0)

    def dot(self, other: "ParamVector") -> float:
        self.check_layout(other)
        return float(sum(np.vdot(a, o) for a, o in zip(self.arrays(), other.arrays())))

    def squared_norm(self) -> float:
        return float(sum(np.vdot(a, a) for a in self.arrays()))

    def squared_distance(self, other: "ParamVector") -> float:
        self.check_layout(other)
        return float(sum(np.sum((a - o) ** 2) for a, o in zip(self.arrays(), other.arrays())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())
