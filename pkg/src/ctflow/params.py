"""Named parameter collections with a bit-exact text serialization.

A ParamMap is an ordered mapping from unique names to float64 arrays.  The
on-disk format (see ``save``) stores every value as C99 float hex, so a
save/load round trip reproduces the arrays bit for bit on any platform;
endianness never enters because no raw bytes are written.

File format, one entry per block::

    ctflow-params 1
    entry <name> <ndim> <d0> <d1> ...
    <hex float>
    ...

"""

from __future__ import annotations

import numpy as np

__all__ = ["ParamMap"]


class ParamMap:
    """Ordered name -> float64 array mapping."""

    def __init__(self, entries=None):
        self._data: dict[str, np.ndarray] = {}
        if entries:
            items = entries.items() if isinstance(entries, dict) else entries
            for name, value in items:
                self[name] = value

    def __setitem__(self, name: str, value):
        if not isinstance(name, str) or not name or any(c.isspace() for c in name):
            raise ValueError(f"parameter name must be a non-blank string, got {name!r}")
        self._data[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __contains__(self, name) -> bool:
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def items(self):
        return self._data.items()

    def names(self):
        return list(self._data)

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._data.items()}

    @property
    def count(self) -> int:
        return sum(v.size for v in self._data.values())

    def copy(self) -> "ParamMap":
        return ParamMap((k, v.copy()) for k, v in self._data.items())

    def zeros_like(self) -> "ParamMap":
        return ParamMap((k, np.zeros_like(v)) for k, v in self._data.items())

    def add_scaled(self, other: "ParamMap", scale: float) -> None:
        """In-place self += scale * other, matched by name."""
        for k, v in self._data.items():
            v += scale * other[k]

    def clip_(self, bound: float) -> None:
        """In-place clamp of every value to [-bound, bound]."""
        for v in self._data.values():
            np.clip(v, -bound, bound, out=v)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) if v.size else 0.0)
                   for v in self._data.values()) if self._data else 0.0

    def allclose(self, other: "ParamMap", rtol=1e-12, atol=0.0) -> bool:
        return self.names() == other.names() and all(
            np.allclose(v, other[k], rtol=rtol, atol=atol) for k, v in self.items())

    def __eq__(self, other):
        if not isinstance(other, ParamMap):
            return NotImplemented
        return self.names() == other.names() and all(
            np.array_equal(v, other[k]) for k, v in self.items())

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        lines = ["ctflow-params 1"]
        for name, value in self._data.items():
            dims = " ".join(str(d) for d in value.shape)
            lines.append(f"entry {name} {value.ndim}" + (f" {dims}" if dims else ""))
            lines.extend(float(x).hex() for x in value.reshape(-1))
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ParamMap":
        with open(path, "r", encoding="ascii") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != "ctflow-params 1":
            raise ValueError(f"{path}: not a ctflow-params v1 file")
        out = cls()
        i = 1
        while i < len(lines):
            head = lines[i].split()
            if head[0] != "entry":
                raise ValueError(f"{path}: expected 'entry', got {lines[i]!r}")
            name, ndim = head[1], int(head[2])
            shape = tuple(int(d) for d in head[3:3 + ndim])
            size = int(np.prod(shape)) if shape else 1
            vals = [float.fromhex(v) for v in lines[i + 1:i + 1 + size]]
            if len(vals) != size:
                raise ValueError(f"{path}: entry {name} truncated")
            out[name] = np.array(vals, dtype=np.float64).reshape(shape)
            i += 1 + size
        return out
