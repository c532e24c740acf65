"""Executable checks: tape gradients against finite differences, grid field against brute force."""

from __future__ import annotations

import math

import numpy as np

from .chem import Molecule, canonical_order
from .model import LinearBins, ModelConfig, init_params
from .sampler import GenerationGrid, log_field
from .selfcheck import brute_force_field, gradient_check, timed

TOY_WATER = Molecule([8, 1, 1], [[0.0, 0.0, 0.0], [0.9572, 0.0, 0.0], [-0.2400, 0.9266, 0.0]])
FAST_CONFIG = ModelConfig(n_features=8, n_rbf=24, n_interactions=2, head_widths=(12, 16), n_bins=30)

GRADIENT_RTOL = 1e-4
GRADIENT_STEP = 1e-2


def gradient_floor(loss_value, h=GRADIENT_STEP, rtol=GRADIENT_RTOL):
    """Gradient magnitude at which finite-difference roundoff reaches ``rtol``.

    Roundoff is bounded by ``10 * eps * max(1, |loss|) / h``; smaller gradients
    are compared against this floor instead of their own magnitude.
    """
    noise = 10 * np.finfo(np.float64).eps * max(1.0, abs(loss_value)) / h
    return noise / rtol


def check_gradients(config=None, seed=0):
    params = init_params(config or ModelConfig(), np.random.default_rng(seed), dtype=np.float64)
    ordered = canonical_order(TOY_WATER)
    from .loss import trajectory_loss

    floor = gradient_floor(trajectory_loss(ordered, params).value)
    (err, worst, tape_loss, ref_loss), seconds = timed(gradient_check, ordered, params, h=GRADIENT_STEP, floor=floor)
    return {
        "max_rel_error": err,
        "worst": worst,
        "floor": floor,
        "n_parameters": params.n_parameters(),
        "loss_gap": abs(tape_loss - ref_loss),
        "seconds": seconds,
    }


def check_sampler_oracle(seed=0, n_states=5):
    rng = np.random.default_rng(seed)
    grid = GenerationGrid(extent=2.0, steps=10)
    bins = LinearBins(math.sqrt(3) * 8.8, 300)
    worst = 0.0
    for _ in range(n_states):
        k = int(rng.integers(1, 4))
        placed = grid.coords[rng.choice(grid.n_cells, size=k, replace=False)]
        logits = rng.normal(size=(k, bins.count)) * 3
        lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
        fast = np.exp(log_field(placed, lp, grid, bins))
        slow = brute_force_field(placed, lp, grid.coords, bins)
        worst = max(worst, float(np.max(np.abs(fast - slow) / slow)))
    return {"max_rel_error": worst}


def run_selftest(fast=False, out=print):
    ok = True
    g = check_gradients(FAST_CONFIG if fast else None)
    passed = g["max_rel_error"] < GRADIENT_RTOL
    ok &= passed
    out(
        f"[{'PASS' if passed else 'FAIL'}] gradient check: {g['n_parameters']} parameters, "
        f"max relative error {g['max_rel_error']:.2e} (floor {g['floor']:.1e}, worst {g['worst']}), "
        f"{g['seconds']:.1f}s"
    )
    s = check_sampler_oracle()
    passed = s["max_rel_error"] < 1e-8
    ok &= passed
    out(f"[{'PASS' if passed else 'FAIL'}] sampler oracle: max relative error {s['max_rel_error']:.2e}")
    return ok
