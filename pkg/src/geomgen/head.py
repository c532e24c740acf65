"""Distance head: per-atom logits over distance bins and tempered softmax."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import LinearBins


@dataclass(frozen=True)
class DistanceDistribution:
    probs: np.ndarray
    bins: LinearBins

    @property
    def bin_centers(self):
        return self.bins.centers

    def argmax_distance(self):
        return float(self.bin_centers[int(np.argmax(self.probs))])


def _n_layers(params):
    return len(params.config.head_widths) + 1


def logits(features, params):
    """Apply the same dense ramp ``F -> ... -> n_bins`` to every feature row."""
    h = features
    n = _n_layers(params)
    for k in range(n):
        h = ad.matmul(h, params[f"head.{k}.weight"]) + params[f"head.{k}.bias"]
        if k < n - 1:
            h = ad.ssp(h)
    return h


def distributions(logit_rows, temperature, bins=None):
    """Row-wise tempered softmax, one :class:`DistanceDistribution` per row."""
    data = logit_rows.data if isinstance(logit_rows, ad.Tensor) else np.asarray(logit_rows)
    probs = ad.softmax_rows(ad.Tensor(data, dtype=data.dtype), temperature).data
    bins = bins or LinearBins(count=data.shape[-1])
    return [DistanceDistribution(p, bins) for p in probs]


def log_probabilities(logit_rows, temperature):
    """Row-wise tempered log-softmax as a float64 array."""
    data = logit_rows.data if isinstance(logit_rows, ad.Tensor) else np.asarray(logit_rows)
    return ad.log_softmax_rows(ad.Tensor(data, dtype=np.float64), temperature).data
