"""Named parameter collections with per-parameter trainable flags."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable

import numpy as np

from .autodiff import Tensor


class ParamSet(OrderedDict):
    """Ordered ``name -> Tensor`` mapping; declaration order is checkpoint order."""

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=trainable, name=name)
        self[name] = t
        return t

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.items() if v.requires_grad)

    def set_trainable(self, flag: bool, prefixes: Iterable[str] = ("",)) -> None:
        prefixes = tuple(prefixes)
        for k, v in self.items():
            if k.startswith(prefixes):
                v.requires_grad = flag

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out.add(k, v.data.astype(dtype), v.requires_grad)
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            out.add(k, v.data.copy(), v.requires_grad)
        return out

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.items())

    def subset(self, prefix: str) -> "ParamSet":
        out = ParamSet()
        for k, v in self.items():
            if k.startswith(prefix):
                out[k] = v
        return out
