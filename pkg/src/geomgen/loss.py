"""RBF-smoothed distance targets and the trajectory cross-entropy loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .chem import Batch, distance_matrix_array, make_batch
from .encoder import encode_packed, pack_trajectories
from .head import logits as head_logits
from .model import LinearBins

log = logging.getLogger(__name__)


def make_targets(distances, d_max, n_bins=300):
    """Normalised Gaussian bumps over the bin centers, one row per distance.

    Distances above ``d_max`` are clamped to it with a warning.
    """
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    if np.any(d > d_max):
        log.warning("clamping %d distance(s) above d_max=%.4f", int((d > d_max).sum()), d_max)
        d = np.minimum(d, d_max)
    bins = LinearBins(d_max, n_bins)
    logq = -bins.gamma * (d[..., None] - bins.centers) ** 2
    logq -= logq.max(axis=-1, keepdims=True)
    q = np.exp(logq)
    return q / q.sum(axis=-1, keepdims=True)


def make_target(d, d_max, n_bins=300):
    return make_targets(np.asarray(d, dtype=np.float64), d_max, n_bins)


def entropy(q):
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(q > 0, q * np.log(q), 0.0), axis=-1)


def cross_entropy(q, p):
    """``-sum_c q_c log p_c`` for probability vectors (last axis)."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(q > 0, q * np.log(p), 0.0), axis=-1)


def cross_entropy_logits(q, logit_rows, weights=None, temperature=1.0):
    """Summed cross-entropy computed from logits through log-softmax."""
    logp = ad.log_softmax_rows(logit_rows, temperature)
    q = np.asarray(q, dtype=logp.dtype)
    if weights is not None:
        q = q * np.asarray(weights, dtype=logp.dtype)[:, None]
    return -(logp * q).sum()


@dataclass
class TrajectoryLoss:
    """Summed loss of one or more placement trajectories.

    ``per_step[b, s]`` holds the cross-entropy summed over the ``s + 1``
    predictions made when placing atom ``s + 1`` of trajectory ``b``.
    """

    total: ad.Tensor
    per_step: np.ndarray
    n_terms: int
    entropy_floor: float

    @property
    def value(self):
        return float(self.total.data)


def _pack(molecules, mask):
    rows = []
    for b, m in enumerate(molecules):
        n = len(m)
        if n < 2:
            raise ValueError("a trajectory needs at least two atoms")
        steps = [s for s in range(1, n) if mask is None or mask[b, s - 1] != 0]
        rows.append((m.charges, distance_matrix_array(m.positions), steps))
    return pack_trajectories(rows)


def batch_loss(batch, params, temperature=1.0):
    """Teacher-forced loss of every molecule in ``batch`` from one packed pass."""
    molecules = batch.molecules
    packed = _pack(molecules, batch.mask)
    cfg = params.config
    steps = batch.mask.shape[1] if batch.mask.ndim == 2 else 0
    per_step = np.zeros((len(molecules), steps))
    if packed.n_nodes == 0:
        return TrajectoryLoss(ad.Tensor(0.0, dtype=params.dtype), per_step, 0, 0.0)
    q = make_targets(packed.target_distance, cfg.d_max, cfg.n_bins)
    y = head_logits(encode_packed(packed, params), params)
    total = cross_entropy_logits(q, y, temperature=temperature)
    logp = ad.log_softmax_rows(ad.Tensor(y.data, dtype=np.float64), temperature).data
    node_h = -(q * logp).sum(-1)
    state_of = packed.node_state
    np.add.at(
        per_step,
        (packed.state_owner[state_of], packed.state_step[state_of] - 1),
        node_h,
    )
    return TrajectoryLoss(total, per_step, packed.n_nodes, float(entropy(q).sum()))


def trajectory_loss(mol, params, mask=None):
    """Loss of placing atoms 2..n of an ordered molecule given true prefixes.

    ``mask`` optionally weights the ``n - 1`` steps; zero-weight steps are skipped.
    """
    if len(mol) < 2:
        raise ValueError("a trajectory needs at least two atoms")
    if mask is None:
        batch = make_batch([mol])
    else:
        batch = Batch((mol,), np.asarray(mask, dtype=np.float64).reshape(1, -1))
    return batch_loss(batch, params)
