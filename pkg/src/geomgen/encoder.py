"""SchNet-style feature extractor for partially placed molecules.

Placed atoms are embedded and refined by interaction blocks that see only the
distances among placed atoms.  The unplaced atom's embedding enters once, as
an element-wise product with the refined features after the last block.

All states of a batch are packed into one flat graph: every placed atom of
every state is a node and messages flow along ``(src -> dst)`` pairs inside a
state.  Filters depend only on a pair's distance, so they are evaluated once
per atom pair of a molecule and shared by every prefix that contains it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .chem import distance_matrix_array
from .model import LinearBins


def rbf_expand(d, centers, gamma):
    """Unnormalised Gaussian expansion ``exp(-gamma (d - mu_g)^2)``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    return np.exp(-gamma * (d[..., None] - np.asarray(centers)) ** 2)


@dataclass(frozen=True)
class PartialState:
    """Placed charges and their distance matrix, plus the next atom's charge."""

    charges: np.ndarray
    distances: np.ndarray
    next_charge: int
    positions: np.ndarray | None = None

    def __post_init__(self):
        charges = np.asarray(self.charges, dtype=np.int64).reshape(-1)
        distances = np.asarray(self.distances, dtype=np.float64)
        if len(charges) < 1:
            raise ValueError("a partial state needs at least one placed atom")
        if distances.shape != (len(charges), len(charges)):
            raise ValueError(f"distance matrix shape {distances.shape} does not match {len(charges)} atoms")
        object.__setattr__(self, "charges", charges)
        object.__setattr__(self, "distances", distances)
        object.__setattr__(self, "next_charge", int(self.next_charge))

    @classmethod
    def from_positions(cls, charges, positions, next_charge):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return cls(charges, distance_matrix_array(positions), next_charge, positions)

    def __len__(self):
        return len(self.charges)


@dataclass
class PackedStates:
    """Flat graph over the placed atoms of many partial states."""

    node_charge: np.ndarray  # (N,) charge of each placed atom
    node_next: np.ndarray  # (N,) charge of the atom its state is about to place
    node_state: np.ndarray  # (N,) running state index
    target_distance: np.ndarray  # (N,) distance to the next atom, nan if unknown
    pair_src: np.ndarray  # (P,) neighbour node
    pair_dst: np.ndarray  # (P,) receiving node
    pair_filter: np.ndarray  # (P,) row into filter_distance
    filter_distance: np.ndarray  # (U,) distinct pair distances
    state_step: np.ndarray  # (S,) number of placed atoms of each state
    state_owner: np.ndarray  # (S,) index of the source molecule / trajectory

    @property
    def n_nodes(self):
        return len(self.node_charge)

    @property
    def n_states(self):
        return len(self.state_step)


class _Packer:
    def __init__(self):
        self.parts = {k: [] for k in PackedStates.__dataclass_fields__}
        self.n_nodes = 0
        self.n_filters = 0
        self.n_states = 0

    def add_trajectory(self, charges, dist, steps, owner):
        """Add prefixes of one ordered molecule; ``steps`` lists prefix sizes."""
        n = len(charges)
        fbase = self.n_filters
        self.parts["filter_distance"].append(dist.ravel())
        self.n_filters += n * n
        for s in steps:
            self._add_state(charges, dist, s, charges[s] if s < n else 0, owner, fbase, n)

    def add_state(self, state, owner):
        n = len(state)
        fbase = self.n_filters
        self.parts["filter_distance"].append(state.distances.ravel())
        self.n_filters += n * n
        self._add_state(state.charges, state.distances, n, state.next_charge, owner, fbase, n)

    def _add_state(self, charges, dist, s, next_charge, owner, fbase, n):
        p = self.parts
        base = self.n_nodes
        p["node_charge"].append(charges[:s])
        p["node_next"].append(np.full(s, next_charge))
        p["node_state"].append(np.full(s, self.n_states))
        if s < len(dist):
            p["target_distance"].append(dist[s, :s])
        else:
            p["target_distance"].append(np.full(s, np.nan))
        dst, src = np.nonzero(~np.eye(s, dtype=bool))
        p["pair_src"].append(base + src)
        p["pair_dst"].append(base + dst)
        p["pair_filter"].append(fbase + dst * n + src)
        p["state_step"].append([s])
        p["state_owner"].append([owner])
        self.n_nodes += s
        self.n_states += 1

    def build(self):
        cat = {}
        for k, v in self.parts.items():
            dtype = np.float64 if k in ("target_distance", "filter_distance") else np.intp
            cat[k] = np.concatenate(v).astype(dtype) if v else np.zeros(0, dtype=dtype)
        return PackedStates(**cat)


def pack_states(states):
    packer = _Packer()
    for k, state in enumerate(states):
        packer.add_state(state, k)
    return packer.build()


def pack_trajectories(trajectories):
    """Pack teacher-forced prefixes.

    ``trajectories`` yields ``(charges, distances, steps)`` per ordered molecule,
    where ``steps`` are the prefix sizes to include (1..n-1 unless masked).
    """
    packer = _Packer()
    for k, (charges, dist, steps) in enumerate(trajectories):
        packer.add_trajectory(np.asarray(charges), np.asarray(dist), steps, k)
    return packer.build()


def _dense(x, params, prefix):
    y = ad.matmul(x, params[f"{prefix}.weight"])
    bias = f"{prefix}.bias"
    return y + params[bias] if bias in params else y


def filters(rbf, params, block):
    """Filter-generating network: two dense layers, each followed by ssp."""
    h = ad.ssp(_dense(rbf, params, f"block{block}.filter1"))
    return ad.ssp(_dense(h, params, f"block{block}.filter2"))


def _conv(x, w, src, dst, n_nodes):
    return ad.index_add(ad.gather(x, src) * w, dst, n_nodes)


def cfconv(features, distances, params, block=0):
    """Continuous-filter convolution over a single fully connected state.

    Row ``j`` of the result is ``sum_{k != j} features[k] * W(d_jk)`` where
    ``W`` is the block's filter network applied to the RBF-expanded distance.
    """
    features = features if isinstance(features, ad.Tensor) else ad.Tensor(features)
    distances = np.asarray(distances, dtype=np.float64)
    n = features.shape[0]
    dst, src = np.nonzero(~np.eye(n, dtype=bool))
    cfg = params.config
    bins = LinearBins(cfg.d_max, cfg.n_rbf)
    rbf = ad.Tensor(rbf_expand(distances[dst, src], bins.centers, bins.gamma), dtype=features.dtype)
    return _conv(features, filters(rbf, params, block), src, dst, n)


def interaction(x, rbf, packed, params, block):
    """One residual interaction block: in2f -> cfconv -> f2out -> ssp -> dense."""
    w = filters(rbf, params, block)
    w = ad.gather(w, packed.pair_filter)
    y = ad.matmul(x, params[f"block{block}.in2f.weight"])
    y = _conv(y, w, packed.pair_src, packed.pair_dst, packed.n_nodes)
    y = ad.ssp(_dense(y, params, f"block{block}.f2out"))
    return x + _dense(y, params, f"block{block}.dense")


def refine(packed, params):
    """Embed placed atoms and run every interaction block; no conditioning."""
    cfg = params.config
    bins = LinearBins(cfg.d_max, cfg.n_rbf)
    rbf = ad.Tensor(rbf_expand(packed.filter_distance, bins.centers, bins.gamma), dtype=params.dtype)
    x = ad.gather(params["embedding"], params.element_rows(packed.node_charge))
    for b in range(cfg.n_interactions):
        x = interaction(x, rbf, packed, params, b)
    return x


def encode_packed(packed, params):
    x = refine(packed, params)
    return x * ad.gather(params["embedding"], params.element_rows(packed.node_next))


def encode(state, params):
    """Per-placed-atom features ``(i, F)`` conditioned on the next atom's type."""
    params.element_rows([state.next_charge])
    return encode_packed(pack_states([state]), params)
