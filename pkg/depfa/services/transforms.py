"""
Unconstrained reparameterization for gradient-based sampling.

A `TransformSpec` is an ordered list of named parameter blocks, each with a
support. The sampler moves on z in R^n; `constrain` maps z to the model's
parameter vector x, and `pullback` turns a gradient in x into a gradient in z
including the log-Jacobian term.

Supports:
    real      identity
    positive  x = exp(z)
    unit      x = tanh(z), the open interval (-1, 1)
    prob      x = logistic(z), the open interval (0, 1)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_expit, logit

Support = Literal["real", "positive", "unit", "prob"]

_LOG4 = float(np.log(4.0))


@dataclass(frozen=True)
class ParamBlock:
    name: str
    shape: Tuple[int, ...]
    support: Support

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def column_names(self) -> List[str]:
        if not self.shape:
            return [self.name]
        return [f"{self.name}[{','.join(str(i) for i in idx)}]" for idx in np.ndindex(*self.shape)]


class TransformSpec:
    """Ordered parameter blocks and their support-preserving maps."""

    def __init__(self, blocks: Sequence[ParamBlock]):
        self.blocks = list(blocks)
        self.slices: Dict[str, slice] = {}
        offset = 0
        for b in self.blocks:
            if b.name in self.slices:
                raise ValueError(f"duplicate parameter block {b.name!r}")
            self.slices[b.name] = slice(offset, offset + b.size)
            offset += b.size
        self.size = offset
        self._kinds = {s: np.zeros(self.size, dtype=bool) for s in ("real", "positive", "unit", "prob")}
        for b in self.blocks:
            self._kinds[b.support][self.slices[b.name]] = True

    def block(self, name: str) -> ParamBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def column_names(self) -> List[str]:
        return [c for b in self.blocks for c in b.column_names()]

    def split(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        """Views of a flat vector per block, reshaped; scalars come back as 0-d arrays."""
        return {b.name: x[self.slices[b.name]].reshape(b.shape) for b in self.blocks}

    def join(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for b in self.blocks:
            out[self.slices[b.name]] = np.asarray(values[b.name], dtype=float).reshape(-1)
        return out

    def constrain(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x = z.copy()
        k = self._kinds
        x[..., k["positive"]] = np.exp(z[..., k["positive"]])
        x[..., k["unit"]] = np.tanh(z[..., k["unit"]])
        x[..., k["prob"]] = expit(z[..., k["prob"]])
        return x

    def unconstrain(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = x.copy()
        k = self._kinds
        with np.errstate(divide="ignore", invalid="ignore"):
            z[..., k["positive"]] = np.log(x[..., k["positive"]])
            z[..., k["unit"]] = np.arctanh(x[..., k["unit"]])
            z[..., k["prob"]] = logit(x[..., k["prob"]])
        return z

    def log_jacobian(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        k = self._kinds
        zu = z[k["unit"]]
        zp = z[k["prob"]]
        return float(
            np.sum(z[k["positive"]])
            # log(1 - tanh(z)^2) = log 4 - 2 log(e^z + e^-z)
            + np.sum(_LOG4 - 2.0 * np.logaddexp(zu, -zu))
            + np.sum(log_expit(zp) + log_expit(-zp))
        )

    def pullback(self, z: np.ndarray, grad_x: np.ndarray) -> np.ndarray:
        """d/dz [f(constrain(z)) + log|J(z)|] given df/dx."""
        z = np.asarray(z, dtype=float)
        g = np.array(grad_x, dtype=float, copy=True)
        k = self._kinds
        pos = k["positive"]
        g[pos] = g[pos] * np.exp(z[pos]) + 1.0
        unit = k["unit"]
        t = np.tanh(z[unit])
        g[unit] = g[unit] * (1.0 - t * t) - 2.0 * t
        prob = k["prob"]
        s = expit(z[prob])
        g[prob] = g[prob] * s * (1.0 - s) + (1.0 - 2.0 * s)
        return g
