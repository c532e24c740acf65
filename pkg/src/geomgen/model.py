"""Model hyperparameters, distance bins and the named parameter store."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

GRID_EXTENT = 4.4
GRID_STEPS = 45
D_MAX = math.sqrt(3 * (2 * GRID_EXTENT) ** 2)


class UnsupportedElementError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 64
    n_rbf: int = 300
    n_interactions: int = 9
    head_widths: tuple = (128, 256)
    n_bins: int = 300
    d_max: float = D_MAX
    elements: tuple = (1, 6, 7, 8, 9)

    def to_dict(self):
        return {
            "n_features": self.n_features,
            "n_rbf": self.n_rbf,
            "n_interactions": self.n_interactions,
            "head_widths": list(self.head_widths),
            "n_bins": self.n_bins,
            "d_max": self.d_max,
            "elements": list(self.elements),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["head_widths"] = tuple(d["head_widths"])
        d["elements"] = tuple(d["elements"])
        return cls(**d)


@dataclass(frozen=True)
class LinearBins:
    """``count`` centers linearly spaced over ``[0, d_max]``, both ends included."""

    d_max: float = D_MAX
    count: int = 300

    @property
    def centers(self):
        return np.linspace(0.0, self.d_max, self.count)

    @property
    def width(self):
        return self.d_max / (self.count - 1)

    @property
    def gamma(self):
        # reciprocal of the spacing between neighbouring centers
        return 1.0 / self.width

    def nearest(self, d):
        """Index of the nearest center; cell edges sit halfway between centers."""
        idx = np.rint(np.asarray(d, dtype=np.float64) / self.width).astype(np.intp)
        return np.clip(idx, 0, self.count - 1)


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParameterStore:
    """Ordered, named collection of trainable tensors plus the model config."""

    def __init__(self, config, tensors):
        self.config = config
        self._tensors = OrderedDict(tensors)
        self._element_index = {z: k for k, z in enumerate(config.elements)}

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def n_parameters(self):
        return sum(t.data.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def element_rows(self, charges):
        try:
            return np.array([self._element_index[int(z)] for z in np.ravel(charges)], dtype=np.intp)
        except KeyError as exc:
            raise UnsupportedElementError(f"unsupported nuclear charge {exc.args[0]}") from None

    def shadow(self):
        """Fresh leaf tensors sharing this store's arrays, with private grads."""
        return ParameterStore(
            self.config,
            [(k, ad.Tensor(t.data, requires_grad=True, dtype=t.dtype, name=k)) for k, t in self.items()],
        )

    def copy(self):
        return ParameterStore(
            self.config,
            [(k, ad.Tensor(t.data.copy(), requires_grad=True, dtype=t.dtype, name=k)) for k, t in self.items()],
        )

    def astype(self, dtype):
        return ParameterStore(
            self.config,
            [(k, ad.Tensor(t.data.astype(dtype), requires_grad=True, dtype=dtype, name=k)) for k, t in self.items()],
        )


def _dense(rng, prefix, fan_in, fan_out, bias=True):
    out = [(f"{prefix}.weight", glorot_uniform(rng, fan_in, fan_out))]
    if bias:
        out.append((f"{prefix}.bias", np.zeros(fan_out)))
    return out


def init_params(config=None, rng=None, dtype=None):
    """Random initial parameters in the order the checkpoint stores them."""
    config = config or ModelConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = dtype or ad.default_dtype()
    F, G = config.n_features, config.n_rbf
    arrays = [("embedding", rng.normal(0.0, 1.0 / math.sqrt(F), size=(len(config.elements), F)))]
    for b in range(config.n_interactions):
        p = f"block{b}"
        arrays += _dense(rng, f"{p}.filter1", G, F)
        arrays += _dense(rng, f"{p}.filter2", F, F)
        arrays += _dense(rng, f"{p}.in2f", F, F, bias=False)
        arrays += _dense(rng, f"{p}.f2out", F, F)
        arrays += _dense(rng, f"{p}.dense", F, F)
    widths = (F,) + tuple(config.head_widths) + (config.n_bins,)
    for k in range(len(widths) - 1):
        arrays += _dense(rng, f"head.{k}", widths[k], widths[k + 1])
    return ParameterStore(
        config,
        [(k, ad.Tensor(v.astype(dtype), requires_grad=True, dtype=dtype, name=k)) for k, v in arrays],
    )
