"""Bond perception, valence checks, canonical graph keys, and Kabsch RMSD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chem import SYMBOLS, distance_matrix

COVALENT_RADII = {1: 0.31, 6: 0.76, 7: 0.71, 8: 0.66, 9: 0.57}
VALENCES = {1: 1, 6: 4, 7: 3, 8: 2, 9: 1}
TOL_FACTOR = 1.2


@dataclass(frozen=True)
class BondGraph:
    charges: np.ndarray
    bonds: tuple  # sorted (i, j) pairs with i < j

    @property
    def degree(self):
        deg = np.zeros(len(self.charges), dtype=int)
        for i, j in self.bonds:
            deg[i] += 1
            deg[j] += 1
        return deg

    def neighbours(self):
        adj = [[] for _ in self.charges]
        for i, j in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def heavy_subgraph(self):
        keep = np.flatnonzero(self.charges != 1)
        remap = {int(k): n for n, k in enumerate(keep)}
        bonds = tuple((remap[i], remap[j]) for i, j in self.bonds if i in remap and j in remap)
        return BondGraph(self.charges[keep], bonds)


def infer_bonds(mol, tol_factor=TOL_FACTOR, radii=None):
    """Bond ``i-j`` iff ``d_ij < tol_factor * (r_i + r_j)``."""
    radii = {**COVALENT_RADII, **(radii or {})}
    r = np.array([radii[int(z)] for z in mol.charges])
    d = distance_matrix(mol)
    limit = tol_factor * (r[:, None] + r[None, :])
    i, j = np.nonzero(np.triu(d < limit, k=1))
    return BondGraph(mol.charges, tuple(zip(i.tolist(), j.tolist())))


@dataclass
class ValenceReport:
    ok: bool
    connected: bool
    problems: list = field(default_factory=list)  # (atom index, charge, bonds, expected)


def _connected(graph):
    n = len(graph.charges)
    if n == 0:
        return True
    adj = graph.neighbours()
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def valence_check(graph, valences=None):
    """Every atom must have exactly its valence in bonds; heavy atoms connected."""
    valences = {**VALENCES, **(valences or {})}
    problems = []
    for k, (z, deg) in enumerate(zip(graph.charges, graph.degree)):
        want = valences[int(z)]
        if deg != want:
            problems.append((k, int(z), int(deg), want))
    connected = _connected(graph.heavy_subgraph())
    return ValenceReport(not problems and connected, connected, problems)


def is_valid(mol, **kwargs):
    return valence_check(infer_bonds(mol, **kwargs)).ok


# ------------------------------------------------------------ canonical keys


def _refine(colors, adj):
    """Colour refinement to a stable partition; colours are canonical ranks."""
    while True:
        sig = [(colors[v], tuple(sorted(colors[u] for u in adj[v]))) for v in range(len(adj))]
        ranks = {s: k for k, s in enumerate(sorted(set(sig)))}
        new = [ranks[s] for s in sig]
        if len(ranks) == len(set(colors)):
            return new
        colors = new


def _certificate(order, labels, adj):
    pos = {v: k for k, v in enumerate(order)}
    edges = sorted(tuple(sorted((pos[v], pos[u]))) for v in order for u in adj[v] if pos[v] < pos[u])
    return tuple(labels[v] for v in order), tuple(edges)


def _search(colors, labels, adj):
    colors = _refine(colors, adj)
    n = len(colors)
    if len(set(colors)) == n:
        order = sorted(range(n), key=lambda v: colors[v])
        return _certificate(order, labels, adj)
    counts = {}
    for c in colors:
        counts[c] = counts.get(c, 0) + 1
    target = min(c for c, k in counts.items() if k > 1)
    best = None
    for v in range(n):
        if colors[v] != target:
            continue
        # individualise v: it keeps the class colour, the rest move just above
        trial = [2 * c + (1 if c > target or (c == target and u != v) else 0) for u, c in enumerate(colors)]
        cert = _search(trial, labels, adj)
        if best is None or cert < best:
            best = cert
    return best


def canonical_key(graph):
    """Canonical string of the heavy-atom bond graph (hydrogens ignored)."""
    heavy = graph.heavy_subgraph()
    if len(heavy.charges) == 0:
        raise ValueError("canonical keys need at least one heavy atom")
    labels = [int(z) for z in heavy.charges]
    adj = heavy.neighbours()
    initial = sorted(set(labels))
    labels_cert, edges = _search([initial.index(z) for z in labels], labels, adj)
    atoms = ".".join(SYMBOLS.get(z, str(z)) for z in labels_cert)
    return atoms + "|" + " ".join(f"{i}-{j}" for i, j in edges)


def molecule_key(mol, **kwargs):
    return canonical_key(infer_bonds(mol, **kwargs))


@dataclass
class MatchStatistics:
    generated: int = 0
    invalid: int = 0
    valid: int = 0
    unique: int = 0
    match_train: int = 0
    match_test: int = 0
    new: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def _reference_keys(molecules):
    keys = set()
    for m in molecules:
        if np.any(m.charges != 1):
            keys.add(molecule_key(m))
    return keys


def match_statistics(generated, train=(), test=()):
    """Valence-filter, deduplicate by canonical key, and match against references.

    A key found in both reference sets counts as a training match.
    """
    train_keys = _reference_keys(train)
    test_keys = _reference_keys(test)
    stats = MatchStatistics(generated=len(generated))
    unique = set()
    for m in generated:
        g = infer_bonds(m)
        if not valence_check(g).ok:
            stats.invalid += 1
            continue
        stats.valid += 1
        unique.add(canonical_key(g))
    stats.unique = len(unique)
    stats.match_train = len(unique & train_keys)
    stats.match_test = len((unique & test_keys) - train_keys)
    stats.new = stats.unique - stats.match_train - stats.match_test
    return stats


def classify(mol, train_keys, test_keys):
    """One of ``train``, ``test``, ``new`` or ``failed``."""
    g = infer_bonds(mol)
    if not valence_check(g).ok:
        return "failed"
    key = canonical_key(g)
    if key in train_keys:
        return "train"
    if key in test_keys:
        return "test"
    return "new"


# ------------------------------------------------------------------- Kabsch


def kabsch(p, q):
    """Rotation ``R`` minimising ``|p R^T - q|`` for centred ``(n, 3)`` arrays."""
    h = p.T @ q
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T


def _rmsd(p, q):
    p = p - p.mean(axis=0)
    q = q - q.mean(axis=0)
    r = kabsch(p, q)
    return float(np.sqrt(((p @ r.T - q) ** 2).sum(axis=1).mean()))


def _aligned(p, q):
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    r = kabsch(p - pc, q - qc)
    return (p - pc) @ r.T + qc


def greedy_match(a, b, rounds=2):
    """Permutation ``perm`` such that ``b`` atom ``perm[k]`` corresponds to ``a`` atom ``k``.

    Pre-aligns on heavy atoms (by index), then greedily pairs nearest atoms of
    the same element and re-aligns on the full matching, ``rounds`` times.
    """
    pa, pb = a.positions, b.positions
    heavy = np.flatnonzero(a.charges != 1)
    if len(heavy) >= 3 and np.array_equal(a.charges[heavy], b.charges[heavy]):
        pc, qc = pa[heavy].mean(0), pb[heavy].mean(0)
        pa_al = (pa - pc) @ kabsch(pa[heavy] - pc, pb[heavy] - qc).T + qc
    else:
        pa_al = pa - pa.mean(0) + pb.mean(0)
    for _ in range(rounds):
        perm = np.empty(len(a), dtype=int)
        for z in np.unique(a.charges):
            ia = np.flatnonzero(a.charges == z)
            ib = np.flatnonzero(b.charges == z)
            d = np.linalg.norm(pa_al[ia][:, None] - pb[ib][None], axis=-1)
            used_a, used_b = set(), set()
            for flat in np.argsort(d, axis=None, kind="stable"):
                x, y = np.unravel_index(flat, d.shape)
                if x in used_a or y in used_b:
                    continue
                used_a.add(x)
                used_b.add(y)
                perm[ia[x]] = ib[y]
        pa_al = _aligned(pa, pb[perm])
    return perm


def kabsch_rmsd(a, b, heavy_only=False, match="index"):
    """RMSD after optimal rigid superposition (Angstrom).

    ``match="index"`` pairs atoms by index; ``"greedy"`` uses :func:`greedy_match`.
    """
    if len(a) != len(b) or sorted(a.charges.tolist()) != sorted(b.charges.tolist()):
        raise ValueError("molecules differ in atom count or composition")
    if match == "greedy":
        perm = greedy_match(a, b)
    elif match == "index":
        if not np.array_equal(a.charges, b.charges):
            raise ValueError("index matching needs identical charge order")
        perm = np.arange(len(a))
    else:
        raise ValueError(f"unknown matching {match!r}")
    pa, pb = a.positions, b.positions[perm]
    if heavy_only:
        keep = a.charges != 1
        pa, pb = pa[keep], pb[keep]
    return _rmsd(pa, pb)


RMSD_COLUMNS = ("train", "test", "new", "all valid", "failed")


def rmsd_table(pairs, categories, match="index"):
    """Mean RMSD per category for all atoms and heavy atoms.

    Returns ``{row: {column: (mean or None, count)}}`` with rows
    ``"all atoms"`` and ``"heavy atoms"``.
    """
    values = {"all atoms": {c: [] for c in RMSD_COLUMNS}, "heavy atoms": {c: [] for c in RMSD_COLUMNS}}
    for (a, b), cat in zip(pairs, categories):
        cols = [cat] + (["all valid"] if cat in ("train", "test", "new") else [])
        full = kabsch_rmsd(a, b, heavy_only=False, match=match)
        heavy = kabsch_rmsd(a, b, heavy_only=True, match=match)
        for c in cols:
            values["all atoms"][c].append(full)
            values["heavy atoms"][c].append(heavy)
    return {
        row: {c: (float(np.mean(v)) if v else None, len(v)) for c, v in cols.items()}
        for row, cols in values.items()
    }


def format_statistics(stats):
    """Human-readable table followed by ``key<TAB>count`` lines."""
    d = stats.as_dict()
    width = max(len(k) for k in d)
    human = "\n".join(f"{k:<{width}}  {v:>8}" for k, v in d.items())
    machine = "\n".join(f"{k}\t{v}" for k, v in d.items())
    return human + "\n\n" + machine + "\n"


def format_rmsd_table(table):
    header = f"{'':<12}" + "".join(f"{c:>11}" for c in RMSD_COLUMNS)
    lines = [header]
    machine = []
    for row, cols in table.items():
        cells = []
        for c in RMSD_COLUMNS:
            mean, count = cols[c]
            cells.append(f"{mean:>11.4f}" if mean is not None else f"{'-':>11}")
            key = f"{row.replace(' ', '_')}.{c.replace(' ', '_')}"
            machine.append(f"{key}\t{'nan' if mean is None else f'{mean:.6f}'}")
            machine.append(f"{key}.count\t{count}")
        lines.append(f"{row:<12}" + "".join(cells))
    return "\n".join(lines) + "\n\n" + "\n".join(machine) + "\n"
