"""Flat learning-variable vectors with a named, fixed layout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    shape: tuple
    length: int


class ParamLayout:
    """Ordered (name, offset, shape) descriptors over a contiguous vector."""

    def __init__(self, entries: Iterable[tuple[str, tuple]]):
        slots = []
        offset = 0
        for name, shape in entries:
            shape = tuple(int(s) for s in shape)
            if any(s.name == name for s in slots):
                raise ValueError(f"duplicate parameter name {name!r}")
            slot = Slot(name, offset, shape, int(np.prod(shape, dtype=int)))
            slots.append(slot)
            offset += slot.length
        self.slots = tuple(slots)
        self.size = offset
        self._by_name = {s.name: s for s in slots}

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Slot:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r} in layout") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamLayout) and self.slots == other.slots

    def __hash__(self):
        return hash(self.slots)

    def __repr__(self):
        return "ParamLayout(" + ", ".join(f"{s.name}{list(s.shape)}" for s in self.slots) + ")"

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.slots]

    def merge(self, other: "ParamLayout") -> "ParamLayout":
        """Union of two layouts; shared names must agree on shape."""
        entries = [(s.name, s.shape) for s in self.slots]
        for s in other.slots:
            if s.name in self:
                if self[s.name].shape != s.shape:
                    raise ValueError(f"parameter {s.name!r} declared with two shapes")
                continue
            entries.append((s.name, s.shape))
        return ParamLayout(entries)

    def flatten(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros(self.size)
        for name, val in values.items():
            slot = self[name]
            flat[slot.offset:slot.offset + slot.length] += np.asarray(val, dtype=np.float64).ravel()
        return flat

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {
            s.name: flat[s.offset:s.offset + s.length].reshape(s.shape).copy()
            for s in self.slots
        }

    def describe(self) -> list[dict]:
        return [{"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in self.slots]


class ParamVector:
    """Learning variables: a flat float64 vector plus its layout.

    Indexing by name returns a read-only reshaped view.
    """

    __slots__ = ("flat", "layout")

    def __init__(self, flat, layout: ParamLayout):
        flat = np.array(flat, dtype=np.float64).ravel()
        if flat.size != layout.size:
            raise ValueError(f"flat vector has {flat.size} entries, layout expects {layout.size}")
        flat.setflags(write=False)
        self.flat = flat
        self.layout = layout

    @classmethod
    def from_values(cls, layout: ParamLayout, values: Mapping[str, np.ndarray]) -> "ParamVector":
        missing = set(layout.names) - set(values)
        if missing:
            raise ValueError(f"missing parameter values: {sorted(missing)}")
        return cls(layout.flatten(values), layout)

    def __getitem__(self, name: str) -> np.ndarray:
        slot = self.layout[name]
        return self.flat[slot.offset:slot.offset + slot.length].reshape(slot.shape)

    def __len__(self):
        return self.flat.size

    def replace(self, flat) -> "ParamVector":
        return ParamVector(flat, self.layout)

    def to_dict(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.flat)
