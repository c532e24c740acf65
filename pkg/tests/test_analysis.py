import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomgen.analysis import (
    BondGraph,
    canonical_key,
    classify,
    format_rmsd_table,
    format_statistics,
    greedy_match,
    infer_bonds,
    is_valid,
    kabsch_rmsd,
    match_statistics,
    molecule_key,
    rmsd_table,
    valence_check,
)
from geomgen.chem import Molecule

from conftest import methane, water
from oracles import DIOXANORADAMANTANE, add_hydrogens, embed_graph, random_rotation


def permuted(mol, perm):
    return Molecule(mol.charges[perm], mol.positions[perm])


def test_bond_rule_examples():
    assert infer_bonds(Molecule([1, 1], [[0, 0, 0], [0.74, 0, 0]])).bonds == ((0, 1),)
    assert infer_bonds(Molecule([6, 6], [[0, 0, 0], [3.0, 0, 0]])).bonds == ()
    g = infer_bonds(methane())
    assert len(g.bonds) == 4
    assert all(sorted((g.charges[i], g.charges[j])) == [1, 6] for i, j in g.bonds)
    assert all(i < j for i, j in g.bonds)


def test_radii_override():
    pair = Molecule([6, 6], [[0, 0, 0], [2.0, 0, 0]])
    assert infer_bonds(pair).bonds == ()
    assert infer_bonds(pair, radii={6: 0.9}).bonds == ((0, 1),)


def test_valence_examples():
    assert valence_check(infer_bonds(methane())).ok
    assert valence_check(infer_bonds(water())).ok
    report = valence_check(infer_bonds(Molecule([8, 8], [[0, 0, 0], [1.4, 0, 0]])))
    assert not report.ok
    assert [(k, z, got, want) for k, z, got, want in report.problems] == [(0, 8, 1, 2), (1, 8, 1, 2)]
    # two methanes far apart: valences fine but the heavy graph is disconnected
    two = Molecule([6, 1, 1, 1, 1] * 2, np.vstack([methane().positions, methane().positions + 6.0]))
    report = valence_check(infer_bonds(two))
    assert not report.problems and not report.connected and not report.ok


@pytest.fixture(scope="module")
def cage():
    z, b = add_hydrogens(*DIOXANORADAMANTANE)
    pos, _ = embed_graph(z, b)
    return Molecule(z, pos), b


def test_saturated_c7o2h10_cage_passes(cage):
    mol, bonds = cage
    assert sorted(mol.charges.tolist()) == [1] * 10 + [6] * 7 + [8] * 2
    g = infer_bonds(mol)
    assert set(g.bonds) == {tuple(sorted(b)) for b in bonds}
    assert valence_check(g).ok


def test_chain_keys_differ():
    cco = BondGraph(np.array([6, 6, 8]), ((0, 1), (1, 2)))
    coc = BondGraph(np.array([6, 8, 6]), ((0, 1), (1, 2)))
    assert canonical_key(cco) != canonical_key(coc)
    assert canonical_key(cco) == canonical_key(BondGraph(np.array([8, 6, 6]), ((0, 1), (1, 2))))


def test_refinement_ties_are_broken():
    # every atom has degree 2 in both graphs, so refinement alone cannot tell them apart
    ring6 = BondGraph(np.full(6, 6), tuple((k, (k + 1) % 6) if k < 5 else (0, 5) for k in range(6)))
    ring6 = BondGraph(ring6.charges, tuple(tuple(sorted(b)) for b in ring6.bonds))
    two3 = BondGraph(np.full(6, 6), ((0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)))
    assert canonical_key(ring6) != canonical_key(two3)


def test_hydrogens_ignored():
    assert molecule_key(methane()) == "C|"
    with pytest.raises(ValueError):
        canonical_key(BondGraph(np.array([1, 1]), ((0, 1),)))


def test_key_invariant_under_1000_permutations(cage):
    mol, _ = cage
    ref = molecule_key(mol)
    rng = np.random.default_rng(0)
    violations = sum(molecule_key(permuted(mol, rng.permutation(len(mol)))) != ref for _ in range(1000))
    assert violations == 0


def random_c7o2_graph(rng):
    """Connected 7 C + 2 O graph with 11 bonds, i.e. the heavy skeleton of a saturated C7O2H10."""
    charges = [6] * 7 + [8] * 2
    cap = [4] * 7 + [2] * 2
    while True:
        order = rng.permutation(9)
        bonds, deg = set(), [0] * 9
        for k in range(1, 9):
            # spanning tree first so the graph is connected
            options = [u for u in order[:k] if deg[u] < cap[u]]
            if not options:
                break
            u, v = int(rng.choice(options)), int(order[k])
            bonds.add(tuple(sorted((u, v))))
            deg[u] += 1
            deg[v] += 1
        else:
            free = [(i, j) for i in range(9) for j in range(i + 1, 9)
                    if (i, j) not in bonds and deg[i] < cap[i] and deg[j] < cap[j]]
            while len(bonds) < 11 and free:
                i, j = free[rng.integers(len(free))]
                bonds.add((i, j))
                deg[i] += 1
                deg[j] += 1
                free = [(a, b) for a, b in free if (a, b) not in bonds and deg[a] < cap[a] and deg[b] < cap[b]]
            if len(bonds) == 11:
                return BondGraph(np.array(charges), tuple(sorted(bonds)))


def to_nx(g):
    h = nx.Graph()
    h.add_nodes_from((k, {"z": int(z)}) for k, z in enumerate(g.charges))
    h.add_edges_from(g.bonds)
    return h


def permute_graph(g, perm):
    inv = np.argsort(perm)
    bonds = tuple(sorted(tuple(sorted((int(inv[i]), int(inv[j])))) for i, j in g.bonds))
    return BondGraph(g.charges[perm], bonds)


def test_twenty_isomers_have_twenty_keys():
    rng = np.random.default_rng(3)
    isomers = []
    while len(isomers) < 20:
        g = random_c7o2_graph(rng)
        match = lambda a, b: a["z"] == b["z"]  # noqa: E731
        if not any(nx.is_isomorphic(to_nx(g), to_nx(h), node_match=match) for h in isomers):
            isomers.append(g)
    keys = [canonical_key(g) for g in isomers]
    assert len(set(keys)) == 20
    for g, key in zip(isomers, keys):
        for _ in range(10):
            assert canonical_key(permute_graph(g, rng.permutation(9))) == key


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_keys_agree_with_isomorphism_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = random_c7o2_graph(rng), random_c7o2_graph(rng)
    if rng.random() < 0.5:
        b = permute_graph(a, rng.permutation(9))
    iso = nx.is_isomorphic(to_nx(a), to_nx(b), node_match=lambda x, y: x["z"] == y["z"])
    assert (canonical_key(a) == canonical_key(b)) == iso


# ------------------------------------------------------------ match statistics


def methanol():
    pos = np.vstack([[0, 0, 0], [1.43, 0, 0], [1.75, 0.9, 0], [-0.36, 1.03, 0], [-0.36, -0.51, 0.89], [-0.36, -0.51, -0.89]])
    return Molecule([6, 8, 1, 1, 1, 1], pos)


def hydrogen_peroxide_like():
    # O-O with one H each: valid, and its heavy graph differs from methanol's C-O
    return Molecule([8, 8, 1, 1], [[0, 0, 0], [1.47, 0, 0], [-0.3, 0.92, 0], [1.77, 0, 0.92]])


def o2():
    return Molecule([8, 8], [[0, 0, 0], [1.21, 0, 0]])


def test_match_statistics_hand_computed():
    train = [methane(), water()]
    test = [methanol(), water()]
    shifted = Molecule(methane().charges, methane().positions @ random_rotation(np.random.default_rng(0)).T + 2)
    generated = [methane(), shifted, methanol(), hydrogen_peroxide_like(), o2()]
    # o2 is invalid; methane twice collapses to one key; water is in both references
    stats = match_statistics(generated, train, test)
    assert stats.as_dict() == dict(generated=5, invalid=1, valid=4, unique=3, match_train=1, match_test=1, new=1)
    assert [classify(m, {molecule_key(x) for x in train}, {molecule_key(x) for x in test}) for m in generated] == [
        "train", "train", "test", "new", "failed"
    ]


def test_generated_equal_to_train():
    mols = [methane(), water(), methanol()]
    stats = match_statistics(mols, mols)
    assert stats.match_train == stats.unique == 3 and stats.new == 0


def test_empty_generated_set():
    assert set(match_statistics([], [methane()], [water()]).as_dict().values()) == {0}


def test_statistics_format():
    text = format_statistics(match_statistics([methane(), o2()], [methane()]))
    human, machine = text.split("\n\n")
    assert "match_train" in human
    assert dict(line.split("\t") for line in machine.strip().splitlines())["invalid"] == "1"


# ------------------------------------------------------------------ RMSD


def test_identical_rmsd_zero(cage):
    mol, _ = cage
    assert kabsch_rmsd(mol, mol) < 1e-10
    assert kabsch_rmsd(mol, mol, heavy_only=True) < 1e-10


def test_rigid_motion_removed(cage):
    mol, _ = cage
    rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    moved = Molecule(mol.charges, mol.positions @ rz.T + [1, 2, 3])
    assert kabsch_rmsd(mol, moved) < 1e-8
    rng = np.random.default_rng(1)
    for _ in range(20):
        other = Molecule(mol.charges, mol.positions @ random_rotation(rng).T + rng.normal(size=3) * 5)
        assert kabsch_rmsd(mol, other) < 1e-8


def unit_square(scale=1.0):
    # placed away from the origin, so centring matters
    pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    pts = (pts - 0.5) * scale + [0.5, 0.5, 0]
    return Molecule([6] * 4, pts + [3, -1, 2])


def test_scaled_square():
    expected = 0.1 * math.sqrt(2) / 2
    assert kabsch_rmsd(unit_square(), unit_square(1.1)) == pytest.approx(0.070711, abs=1e-6)
    assert kabsch_rmsd(unit_square(), unit_square(1.1)) == pytest.approx(expected, abs=1e-12)


def test_reflection_is_not_an_allowed_motion():
    # a chiral tetrahedron and its mirror image cannot be superposed
    a = Molecule([6, 7, 8, 9], [[0, 0, 0], [1.5, 0, 0], [0, 1.6, 0], [0, 0, 1.7]])
    b = Molecule(a.charges, a.positions * [1, 1, -1])
    assert kabsch_rmsd(a, b) > 0.1


def test_rmsd_symmetric_and_invariant(cage):
    mol, _ = cage
    rng = np.random.default_rng(2)
    noisy = Molecule(mol.charges, mol.positions + rng.normal(scale=0.05, size=mol.positions.shape))
    ab, ba = kabsch_rmsd(mol, noisy), kabsch_rmsd(noisy, mol)
    assert abs(ab - ba) < 1e-10
    moved = Molecule(noisy.charges, noisy.positions @ random_rotation(rng).T + 4)
    assert abs(kabsch_rmsd(mol, moved) - ab) < 1e-10


def test_rmsd_errors():
    with pytest.raises(ValueError):
        kabsch_rmsd(methane(), water())
    with pytest.raises(ValueError):
        kabsch_rmsd(methane(), permuted(methane(), [1, 0, 2, 3, 4]))
    with pytest.raises(ValueError):
        kabsch_rmsd(methane(), methane(), match="optimal")


def test_greedy_match_recovers_shuffled_hydrogens(cage):
    # heavy atoms keep their order (pre-alignment uses it); hydrogens come shuffled
    mol, _ = cage
    rng = np.random.default_rng(4)
    perm = np.concatenate([np.arange(9), 9 + rng.permutation(10)])
    shuffled = Molecule(mol.charges[perm], mol.positions[perm] @ random_rotation(rng).T + 1)
    found = greedy_match(mol, shuffled)
    assert np.array_equal(perm[found], np.arange(len(mol)))
    assert kabsch_rmsd(mol, shuffled, match="greedy") < 1e-8
    assert kabsch_rmsd(mol, shuffled) > 0.5


def test_rmsd_table():
    pairs = [(methane(), methane()), (unit_square(), unit_square(1.1))]
    table = rmsd_table(pairs, ["train", "failed"])
    assert table["all atoms"]["train"] == (0.0, 1) or table["all atoms"]["train"][0] < 1e-10
    assert table["all atoms"]["all valid"][1] == 1
    assert table["heavy atoms"]["failed"][0] == pytest.approx(0.070711, abs=1e-6)
    assert table["all atoms"]["new"] == (None, 0)
    text = format_rmsd_table(table)
    machine = dict(line.split("\t") for line in text.split("\n\n")[1].strip().splitlines())
    assert machine["all_atoms.new"] == "nan" and machine["heavy_atoms.failed.count"] == "1"


def test_is_valid_shortcut():
    assert is_valid(methane()) and not is_valid(o2())
