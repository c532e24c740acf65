"""Adam training over random mini-batches, with checkpoints and validation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .analysis import infer_bonds, valence_check, canonical_key
from .checkpoint import Checkpoint, save_checkpoint
from .chem import make_batch, randomize_order
from .loss import batch_loss
from .sampler import CompositionPlan, GenerationError, generate

log = logging.getLogger(__name__)


class ConsistencyError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, grads=None):
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``.
    """
    if grads is None:
        grads = {k: t.grad for k, t in params.items()}
    missing = [k for k in params.names() if grads.get(k) is None]
    if missing:
        raise ConsistencyError(f"missing gradients for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 20
    seed: int = 0
    val_interval: int = 1000
    val_samples: int = 50
    val_temperature: float = 0.01
    train_temperature: float = 1.0
    checkpoint_path: str | None = None
    checkpoint_interval: int = 0  # 0: only at the end
    metrics_path: str | None = None
    threads: int = 1
    lr: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.val_interval < 1:
            raise ValueError("validation interval must be >= 1")


@dataclass
class ValidationReport:
    iteration: int
    validity: float
    heldout_loss: float
    unique: int


@dataclass
class TrainResult:
    params: object
    adam: AdamState
    losses: list  # (iteration, loss, terms)
    validations: list
    iteration: int
    rng: np.random.Generator


def draw_batch(molecules, batch_size, rng):
    """Random molecules without replacement, each with a fresh hydrogen-last order."""
    chosen = rng.choice(len(molecules), size=min(batch_size, len(molecules)), replace=False)
    return make_batch(randomize_order(molecules[k], rng) for k in chosen)


def _shard_grads(batch, params, temperature):
    shadow = params.shadow()
    loss = batch_loss(batch, shadow, temperature)
    ad.backward(loss.total)
    return loss, {k: t.grad for k, t in shadow.items()}


def compute_gradients(batch, params, threads=1, temperature=1.0):
    """Summed loss and gradients; with ``threads > 1`` shards run concurrently."""
    if threads <= 1 or len(batch) < 2:
        params.zero_grad()
        loss = batch_loss(batch, params, temperature)
        ad.backward(loss.total)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
        return loss.value, loss.n_terms, grads
    shards = [make_batch(batch.molecules[k::threads]) for k in range(min(threads, len(batch)))]
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        results = list(pool.map(lambda b: _shard_grads(b, params, temperature), shards))
    grads = {k: np.zeros_like(t.data) for k, t in params.items()}
    value, terms = 0.0, 0
    for loss, g in results:
        value += loss.value
        terms += loss.n_terms
        for k, v in g.items():
            if v is not None:
                grads[k] += v
    return value, terms, grads


def heldout_loss(molecules, params, seed=0):
    """Mean per-term loss over molecules with seeded random orderings."""
    if not molecules:
        return float("nan")
    rng = np.random.default_rng(seed)
    total, terms = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(molecules), 20):
            chunk = molecules[start : start + 20]
            loss = batch_loss(make_batch(randomize_order(m, rng) for m in chunk), params)
            total += loss.value
            terms += loss.n_terms
    return total / max(terms, 1)


def validate(params, molecules, config, heldout=None, iteration=0):
    """Generate ``config.val_samples`` molecules and summarise them.

    Compositions cycle through the training molecules.  Reports the fraction
    passing the valence check, the mean held-out loss per term (training
    molecules when no held-out set is given) and the number of distinct
    canonical keys among valid samples.
    """
    rng = np.random.default_rng([config.seed, iteration, 1])
    valid, keys = 0, set()
    for k in range(config.val_samples):
        charges = molecules[k % len(molecules)].charges
        plan = CompositionPlan.random(charges, rng)
        try:
            mol = generate(plan, params, config.val_temperature, rng)
        except GenerationError:
            continue  # a sample that cannot be placed counts as invalid
        g = infer_bonds(mol)
        if valence_check(g).ok:
            valid += 1
            keys.add(canonical_key(g))
    validity = valid / config.val_samples if config.val_samples else float("nan")
    loss = heldout_loss(heldout if heldout else molecules, params, seed=config.seed)
    return ValidationReport(iteration, validity, loss, len(keys))


def train(molecules, config, params=None, adam=None, start_iteration=0, rng_state=None, heldout=None, metrics=None):
    """Run ``config.iterations`` Adam steps starting after ``start_iteration``.

    ``metrics`` may be an open text stream; lines are ``iter<TAB>loss<TAB>terms``
    and ``val<TAB>iter<TAB>validity<TAB>heldout_loss<TAB>unique``.
    """
    from .model import init_params

    if not molecules:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    if params is None:
        params = init_params(rng=np.random.default_rng([config.seed, 0]))
    adam = adam or AdamState(lr=config.lr)
    losses, validations = [], []
    iteration = start_iteration
    stream = metrics
    opened = None
    if stream is None and config.metrics_path:
        opened = stream = open(config.metrics_path, "a" if start_iteration else "w")
    try:
        for _ in range(config.iterations):
            iteration += 1
            batch = draw_batch(molecules, config.batch_size, rng)
            value, terms, grads = compute_gradients(batch, params, config.threads, config.train_temperature)
            if not math.isfinite(value):
                if config.checkpoint_path:
                    save_checkpoint(
                        config.checkpoint_path + ".nonfinite",
                        Checkpoint(params, adam, iteration - 1, rng.bit_generator.state),
                    )
                raise NonFiniteLossError(f"non-finite loss {value} at iteration {iteration}")
            adam_step(params, adam, grads)
            losses.append((iteration, value, terms))
            if stream is not None:
                stream.write(f"{iteration}\t{value:.6f}\t{terms}\n")
            if iteration % config.val_interval == 0 and config.val_samples > 0:
                report = validate(params, molecules, config, heldout, iteration)
                validations.append(report)
                log.info("validation %s", report)
                if stream is not None:
                    stream.write(
                        f"val\t{iteration}\t{report.validity:.4f}\t{report.heldout_loss:.6f}\t{report.unique}\n"
                    )
            if config.checkpoint_path and config.checkpoint_interval and iteration % config.checkpoint_interval == 0:
                save_checkpoint(config.checkpoint_path, Checkpoint(params, adam, iteration, rng.bit_generator.state))
    finally:
        if opened is not None:
            opened.close()
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, Checkpoint(params, adam, iteration, rng.bit_generator.state))
    return TrainResult(params, adam, losses, validations, iteration, rng)
