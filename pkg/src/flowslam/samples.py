"""Column-labelled sample matrices."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SampleBlock:
    """Rows are draws; columns are flattened variable dimensions.

    ``layout`` lists ``(name, width)`` pairs in column order, e.g.
    ``[("X0", 3), ("L1", 2)]``.
    """

    values: np.ndarray
    layout: list[tuple[str, int]]
    circular: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        width = sum(w for _, w in self.layout)
        if self.values.shape[1] != width:
            raise ValueError(f"layout covers {width} columns, values have {self.values.shape[1]}")
        if self.circular is None:
            self.circular = np.zeros(width, dtype=bool)
        self.circular = np.asarray(self.circular, dtype=bool)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.layout]

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, width in self.layout:
            out[name] = slice(start, start + width)
            start += width
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[:, self.slices()[name]]

    def select(self, names) -> "SampleBlock":
        sl = self.slices()
        cols = np.concatenate([np.arange(sl[k].start, sl[k].stop) for k in names])
        layout = [(k, sl[k].stop - sl[k].start) for k in names]
        return SampleBlock(self.values[:, cols], layout, self.circular[cols])

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: self.values[:, s] for name, s in self.slices().items()}

    @classmethod
    def from_dict(cls, data: dict[str, np.ndarray], circular: dict[str, np.ndarray] | None = None) -> "SampleBlock":
        names = list(data)
        arrays = [np.asarray(data[k], dtype=float).reshape(len(data[k]), -1) for k in names]
        layout = [(k, a.shape[1]) for k, a in zip(names, arrays)]
        circ = None
        if circular is not None:
            circ = np.concatenate([np.asarray(circular[k], dtype=bool) for k in names])
        return cls(np.hstack(arrays), layout, circ)

    def column_names(self) -> list[str]:
        """Flattened header names such as ``X0.x X0.y X0.theta``."""
        suffix = {2: ("x", "y"), 3: ("x", "y", "theta"), 1: ("v",)}
        out = []
        for name, width in self.layout:
            parts = suffix.get(width, tuple(str(i) for i in range(width)))
            out.extend(f"{name}.{p}" for p in parts)
        return out
