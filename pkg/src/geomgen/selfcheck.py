"""Independent oracles: a plain numpy forward pass and brute-force sampler field.

These deliberately avoid the tape, the packed graph and the vectorised grid
code so they can check them.  The numpy forward can carry a batch of single-entry
parameter offsets, which lets finite differences perturb many entries of
one tensor in a single call.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .chem import distance_matrix_array
from .loss import make_targets, trajectory_loss
from .model import LinearBins


def _ssp(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) - np.log(2.0)


def _rbf(d, bins):
    return np.exp(-bins.gamma * (d[..., None] - bins.centers) ** 2)


class Perturbation:
    """A batch of single-entry offsets ``steps[b]`` applied to one named parameter.

    Offsetting ``W[r, c]`` by ``h`` shifts a dense layer's output column ``c``
    by ``h * x[..., r]``, so the offset is injected into activations rather
    than materialising a batched copy of the weight.
    """

    def __init__(self, name, shape, flat_index, steps):
        self.name = name
        self.steps = np.asarray(steps, dtype=np.float64)
        idx = np.unravel_index(np.asarray(flat_index), shape)
        self.rows = idx[0] if len(shape) == 2 else None
        self.cols = idx[-1]

    def __len__(self):
        return len(self.steps)

    def shift(self, y, x, weight, bias):
        """Apply to ``y = x @ W + b`` if ``W`` or ``b`` is the perturbed tensor."""
        if self.name not in (weight, bias):
            return y
        B = len(self)
        out = np.array(np.broadcast_to(y, (B,) + y.shape[-(x.ndim):]))
        if self.name == weight:
            delta = np.moveaxis(x[..., self.rows], -1, 0) * self.steps.reshape((B,) + (1,) * (x.ndim - 1))
        else:
            delta = self.steps.reshape((B,) + (1,) * (x.ndim - 1))
        out[np.arange(B), ..., self.cols] += delta
        return out

    def embed(self, emb, rows):
        x = emb[rows]
        if self.name != "embedding":
            return x
        B = len(self)
        out = np.array(np.broadcast_to(x, (B,) + x.shape))
        hit = np.asarray(rows)[None, :] == self.rows[:, None]  # (B, atoms)
        b, a = np.nonzero(hit)
        out[b, a, self.cols[b]] += self.steps[b]
        return out


def _dense(x, arrays, prefix, pert, bias=True):
    w, b = f"{prefix}.weight", f"{prefix}.bias"
    # flatten leading axes: stacked matmul with small inner stacks is slow
    y = (x.reshape(-1, x.shape[-1]) @ arrays[w]).reshape(x.shape[:-1] + (-1,))
    if bias:
        y = y + arrays[b]
    return y if pert is None else pert.shift(y, x, w, b if bias else None)


def reference_features(charges, dist, next_charge, arrays, config, pert=None):
    """Encoder output for one state, optionally under a batch of perturbations."""
    s = len(charges)
    bins = LinearBins(config.d_max, config.n_rbf)
    rows = [config.elements.index(int(z)) for z in charges]
    nxt = [config.elements.index(int(next_charge))]
    emb = arrays["embedding"]
    x = emb[rows] if pert is None else pert.embed(emb, rows)
    rbf = _rbf(dist, bins)  # (s, s, G)
    for b in range(config.n_interactions):
        p = f"block{b}"
        w = _ssp(_dense(rbf, arrays, f"{p}.filter1", pert))
        w = _ssp(_dense(w, arrays, f"{p}.filter2", pert))
        y = _dense(x, arrays, f"{p}.in2f", pert, bias=False)
        conv = np.zeros(np.broadcast_shapes(y.shape, w.shape[:-3] + (s, w.shape[-1])))
        for j in range(s):
            for k in range(s):
                if k != j:
                    conv[..., j, :] += y[..., k, :] * w[..., j, k, :]
        v = _ssp(_dense(conv, arrays, f"{p}.f2out", pert))
        x = x + _dense(v, arrays, f"{p}.dense", pert)
    return x * (emb[nxt] if pert is None else pert.embed(emb, nxt))


def reference_logits(features, arrays, config, pert=None):
    h = features
    n = len(config.head_widths) + 1
    for k in range(n):
        h = _dense(h, arrays, f"head.{k}", pert)
        if k < n - 1:
            h = _ssp(h)
    return h


def reference_loss(charges, positions, arrays, config, pert=None):
    """Summed cross-entropy over all teacher-forced steps, plain numpy."""
    dist = distance_matrix_array(positions)
    total = 0.0
    for s in range(1, len(charges)):
        feats = reference_features(charges[:s], dist[:s, :s], charges[s], arrays, config, pert)
        y = reference_logits(feats, arrays, config, pert)
        top = y.max(axis=-1, keepdims=True)
        logp = y - top - np.log(np.exp(y - top).sum(axis=-1, keepdims=True))
        q = make_targets(dist[s, :s], config.d_max, config.n_bins)
        total = total - (q * logp).sum(axis=(-1, -2))
    return total


def finite_difference_gradients(charges, positions, params, h=1e-2, chunk=1024, names=None):
    """Fourth-order central differences of :func:`reference_loss` for every parameter entry.

    ``(8 (f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`` has truncation error of
    order ``h**4``, so a fairly large ``h`` keeps roundoff small.
    """
    config = params.config
    arrays = {k: t.data.astype(np.float64) for k, t in params.items()}
    grads = {}
    for name in names or params.names():
        shape = arrays[name].shape
        size = arrays[name].size
        g = np.empty(size)
        for start in range(0, size, chunk):
            idx = np.arange(start, min(start + chunk, size))
            k = len(idx)
            steps = np.repeat([h, -h, 2 * h, -2 * h], k)
            pert = Perturbation(name, shape, np.tile(idx, 4), steps)
            f = reference_loss(charges, positions, arrays, config, pert).reshape(4, k)
            g[idx] = (8 * (f[0] - f[1]) - (f[2] - f[3])) / (12 * h)
        grads[name] = g.reshape(shape)
    return grads


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(ordered, params, h=1e-2, floor=1e-8, chunk=1024):
    """Compare tape gradients of the trajectory loss against central differences.

    Returns ``(max relative error, worst parameter name, tape loss, reference loss)``.
    Runs in float64 regardless of the store's dtype.
    """
    with ad.precision(np.float64):
        p64 = params.astype(np.float64)
        loss = trajectory_loss(ordered, p64)
        ad.backward(loss.total)
    charges = np.asarray(ordered.charges)
    positions = np.asarray(ordered.positions)
    fd = finite_difference_gradients(charges, positions, p64, h=h, chunk=chunk)
    worst, worst_name = 0.0, None
    for name, t in p64.items():
        tape = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = relative_error(tape, fd[name], floor).max()
        if err > worst:
            worst, worst_name = float(err), name
    arrays = {k: t.data for k, t in p64.items()}
    return worst, worst_name, loss.value, float(reference_loss(charges, positions, arrays, p64.config))


def brute_force_field(placed_positions, log_probs, cells, bins):
    """Per-cell product of looked-up bin probabilities, normalised by their sum."""
    probs = np.exp(np.asarray(log_probs, dtype=np.float64))
    out = np.empty(len(cells))
    for g, cell in enumerate(cells):
        value = 1.0
        for j, r in enumerate(placed_positions):
            d = np.sqrt(sum((cell[a] - r[a]) ** 2 for a in range(3)))
            value *= probs[j, int(np.clip(round(d / bins.width), 0, bins.count - 1))]
        out[g] = value
    return out / out.sum()


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - start
