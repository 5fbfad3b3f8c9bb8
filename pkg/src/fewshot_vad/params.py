"""Named, ordered parameter collections with elementwise arithmetic.

A :class:`ParamSet` is the unit the meta-learner manipulates: the adapted
parameters are ``params - alpha * grads`` where both operands share the
same names, shapes and order.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping

import torch

from .errors import StructureError


class ParamSet(Mapping[str, torch.Tensor]):
    """Immutable ordered mapping ``name -> tensor`` plus free-form metadata."""

    __slots__ = ("_entries", "meta")

    def __init__(self, entries: Mapping[str, torch.Tensor] | Iterable, meta: dict | None = None):
        self._entries = OrderedDict(entries)
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {self.numel()} values, meta={self.meta.get('model_id')!r})"

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def structure(self) -> tuple:
        return tuple((k, tuple(v.shape)) for k, v in self._entries.items())

    def numel(self) -> int:
        return sum(v.numel() for v in self._entries.values())

    @property
    def dtype(self):
        return next(iter(self._entries.values())).dtype

    def check_same_structure(self, other: "ParamSet"):
        if self.names != list(other.keys()):
            missing = set(self.names) ^ set(other.keys())
            raise StructureError(f"parameter names differ: {sorted(missing) or 'order differs'}")
        for k, v in self._entries.items():
            if tuple(v.shape) != tuple(other[k].shape):
                raise StructureError(
                    f"parameter {k!r} shape {tuple(v.shape)} != {tuple(other[k].shape)}")

    # -- functional helpers -------------------------------------------------

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParamSet":
        return ParamSet(((k, fn(v)) for k, v in self._entries.items()), self.meta)

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        self.check_same_structure(other)
        return ParamSet(((k, fn(v, other[k])) for k, v in self._entries.items()), self.meta)

    def detach(self) -> "ParamSet":
        return self.map(lambda v: v.detach())

    def clone(self) -> "ParamSet":
        return self.map(lambda v: v.detach().clone())

    def requires_grad_(self) -> "ParamSet":
        """Detached copies that track gradients (leaves for autograd)."""
        return self.map(lambda v: v.detach().clone().requires_grad_(True))

    def to(self, dtype) -> "ParamSet":
        return self.map(lambda v: v.to(dtype))

    def tensors(self) -> list[torch.Tensor]:
        return list(self._entries.values())

    def norm(self) -> float:
        return float(torch.sqrt(sum((v.detach().double() ** 2).sum() for v in self._entries.values())))

    def flatten(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self._entries.values()])

    def unflatten(self, flat: torch.Tensor) -> "ParamSet":
        out, i = [], 0
        for k, v in self._entries.items():
            n = v.numel()
            out.append((k, flat[i:i + n].reshape(v.shape)))
            i += n
        if i != flat.numel():
            raise StructureError(f"flat vector has {flat.numel()} values, expected {i}")
        return ParamSet(out, self.meta)

    def allclose(self, other: "ParamSet", **kw) -> bool:
        self.check_same_structure(other)
        return all(torch.allclose(v, other[k], **kw) for k, v in self._entries.items())

    def equal(self, other: "ParamSet") -> bool:
        self.check_same_structure(other)
        return all(torch.equal(v, other[k]) for k, v in self._entries.items())

    @classmethod
    def from_grads(cls, like: "ParamSet", grads) -> "ParamSet":
        return cls(((k, torch.zeros_like(v) if g is None else g)
                    for (k, v), g in zip(like.items(), grads)), like.meta)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, ParamSet):
            return self.zip_map(other, torch.add)
        return self.map(lambda v: v + other)

    def __sub__(self, other):
        if isinstance(other, ParamSet):
            return self.zip_map(other, torch.sub)
        return self.map(lambda v: v - other)

    def __mul__(self, scalar):
        if isinstance(scalar, ParamSet):
            return self.zip_map(scalar, torch.mul)
        return self.map(lambda v: v * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(torch.neg)

    def __truediv__(self, scalar):
        return self.map(lambda v: v / scalar)
