"""Atom-by-atom generation on a cubic grid of candidate positions.

The probability of a candidate cell is the product, over already placed atoms,
of the predicted probability of the cell's distance bin to that atom,
normalised over all cells.  Everything is done in log space.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .chem import ELEMENTS, SYMBOLS, Molecule
from .encoder import PartialState, encode
from .head import log_probabilities, logits
from .model import GRID_EXTENT, GRID_STEPS, LinearBins


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationGrid:
    extent: float = GRID_EXTENT
    steps: int = GRID_STEPS

    @cached_property
    def axis(self):
        return np.linspace(-self.extent, self.extent, self.steps)

    @property
    def spacing(self):
        return 2 * self.extent / (self.steps - 1)

    @property
    def n_cells(self):
        return self.steps**3

    @property
    def max_distance(self):
        return float(np.sqrt(3 * (2 * self.extent) ** 2))

    @cached_property
    def coords(self):
        x, y, z = np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def contains(self, positions):
        return bool(np.all(np.abs(np.asarray(positions)) <= self.extent + 1e-9))

    def cell_index(self, position):
        ijk = np.rint((np.asarray(position) + self.extent) / self.spacing).astype(int)
        return int(np.ravel_multi_index(tuple(np.clip(ijk, 0, self.steps - 1)), (self.steps,) * 3))


DEFAULT_GRID = GenerationGrid()


# ------------------------------------------------------------ compositions

_FORMULA = re.compile(r"([A-Z][a-z]?)(\d*)")


def parse_composition(text):
    """``"C7O2H10"`` -> list of charges in formula order."""
    text = text.strip()
    if not text or "".join(m.group(0) for m in _FORMULA.finditer(text)) != text:
        raise ValueError(f"malformed composition {text!r}")
    charges = []
    for symbol, count in _FORMULA.findall(text):
        if symbol not in ELEMENTS:
            raise ValueError(f"unknown element {symbol!r} in composition")
        charges += [ELEMENTS[symbol]] * (int(count) if count else 1)
    return charges


@dataclass(frozen=True)
class CompositionPlan:
    """Charges in placement order; hydrogens strictly after heavy atoms."""

    charges: tuple

    def __post_init__(self):
        charges = tuple(int(z) for z in self.charges)
        if not charges:
            raise ValueError("a plan needs at least one atom")
        is_h = [z == 1 for z in charges]
        if any(is_h) and not all(is_h[is_h.index(True):]):
            raise ValueError("hydrogens must come after every heavy atom")
        object.__setattr__(self, "charges", charges)

    def __len__(self):
        return len(self.charges)

    @classmethod
    def random(cls, charges, rng):
        """Shuffle heavy atoms, then append the hydrogens."""
        charges = np.asarray(charges)
        heavy = rng.permutation(charges[charges != 1])
        return cls(tuple(heavy) + (1,) * int((charges == 1).sum()))

    def __str__(self):
        return "".join(SYMBOLS[z] for z in self.charges)


# ------------------------------------------------------------------ fields


def atom_log_probs(state, params, temperature):
    """Tempered log-distributions ``(i, n_bins)`` over distances to the new atom."""
    with ad.no_grad():
        y = logits(encode(state, params), params)
    return log_probabilities(y, temperature)


def log_field(placed_positions, log_probs, grid, bins):
    """Normalised log-probability of every grid cell given per-atom log-distributions."""
    placed_positions = np.asarray(placed_positions, dtype=np.float64).reshape(-1, 3)
    if not grid.contains(placed_positions):
        raise ValueError("placed atom lies outside the generation grid")
    cells = grid.coords
    score = np.zeros(len(cells))
    for j, r in enumerate(placed_positions):
        d = np.sqrt(((cells - r) ** 2).sum(axis=1))
        score += log_probs[j][bins.nearest(d)]
    top = score.max()
    return score - (top + np.log(np.exp(score - top).sum()))


def position_log_field(state, params, temperature, grid=None):
    if state.positions is None:
        raise ValueError("position fields need placed positions")
    grid = grid or DEFAULT_GRID
    cfg = params.config
    lp = atom_log_probs(state, params, temperature)
    return log_field(state.positions, lp, grid, LinearBins(cfg.d_max, cfg.n_bins))


def sample_cells(field, rng, size=None):
    """Categorical draws of cell indices with probabilities ``exp(field)``."""
    cdf = np.cumsum(np.exp(field - field.max()))
    u = rng.random(size) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def sample_position(field, rng, grid=None):
    grid = grid or DEFAULT_GRID
    return grid.coords[int(sample_cells(field, rng))]


def generate(plan, params, temperature, rng, grid=None, trace=None, max_redraws=10):
    """Place the plan's atoms one at a time; the first sits at the grid center.

    If ``trace`` is a list, one record per placement step is appended to it.
    """
    if not isinstance(plan, CompositionPlan):
        plan = CompositionPlan(plan)
    grid = grid or DEFAULT_GRID
    cfg = params.config
    bins = LinearBins(cfg.d_max, cfg.n_bins)
    params.element_rows(plan.charges)
    charges = np.asarray(plan.charges)
    first = grid.cell_index(np.zeros(3))
    positions = [grid.coords[first].copy()]
    occupied = {first}
    for k in range(1, len(plan)):
        state = PartialState.from_positions(charges[:k], positions, charges[k])
        lp = atom_log_probs(state, params, temperature)
        field = log_field(state.positions, lp, grid, bins)
        for _ in range(max_redraws + 1):
            cell = int(sample_cells(field, rng))
            if cell not in occupied:
                break
        else:
            raise GenerationError(f"step {k}: drew occupied cells {max_redraws + 1} times")
        occupied.add(cell)
        positions.append(grid.coords[cell].copy())
        if trace is not None:
            trace.append(
                {
                    "step": k,
                    "charge": int(charges[k]),
                    "cell": cell,
                    "position": [round(float(v), 6) for v in grid.coords[cell]],
                    "argmax_bins": [int(b) for b in lp.argmax(axis=1)],
                }
            )
    return Molecule(charges, np.array(positions))
