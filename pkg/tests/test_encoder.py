import numpy as np
import pytest

from geomgen import autodiff as ad
from geomgen.encoder import PartialState, cfconv, encode, rbf_expand, refine, pack_states
from geomgen.model import LinearBins, UnsupportedElementError, init_params

from conftest import SMALL, random_molecule
from oracles import cfconv_double_loop, random_rotation


def test_rbf_examples():
    bins = LinearBins(count=300)
    c, g = bins.centers, bins.gamma
    e = rbf_expand(c[17], c, g)
    assert e[17] == 1.0 and e.argmax() == 17
    at_zero = rbf_expand(0.0, c, g)
    # strictly decreasing until the Gaussian tail underflows to 0
    assert np.all(np.diff(at_zero[at_zero > 0]) < 0)
    assert np.all(np.diff(at_zero) <= 0)
    mid = rbf_expand(0.5 * (c[40] + c[41]), c, g)
    assert abs(mid[40] - mid[41]) < 1e-12
    with pytest.raises(ValueError):
        rbf_expand(-0.1, c, g)


def test_cfconv_single_atom_is_zero(small_params64):
    out = cfconv(ad.Tensor(np.ones((1, 16)), dtype=np.float64), np.zeros((1, 1)), small_params64)
    assert np.array_equal(out.data, np.zeros((1, 16)))


def test_cfconv_matches_double_loop(rng, small_params64):
    p = small_params64
    x = rng.normal(size=(3, 16))
    pos = rng.uniform(-2, 2, size=(3, 3))
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    out = cfconv(ad.Tensor(x, dtype=np.float64), d, p, block=1).data
    bins = LinearBins(SMALL.d_max, SMALL.n_rbf)
    a = {k: t.data for k, t in p.items()}
    ref = cfconv_double_loop(
        x, d, a["block1.filter1.weight"], a["block1.filter1.bias"], a["block1.filter2.weight"],
        a["block1.filter2.bias"], bins.centers, bins.gamma,
    )
    assert np.abs(out - ref).max() < 1e-6


def test_cfconv_permutation_equivariance(rng, small_params64):
    x = rng.normal(size=(4, 16))
    pos = rng.uniform(-2, 2, size=(4, 3))
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    perm = rng.permutation(4)
    a = cfconv(ad.Tensor(x, dtype=np.float64), d, small_params64).data
    b = cfconv(ad.Tensor(x[perm], dtype=np.float64), d[np.ix_(perm, perm)], small_params64).data
    assert np.allclose(a[perm], b, atol=1e-12)


def state_of(mol, i):
    return PartialState.from_positions(mol.charges[:i], mol.positions[:i], mol.charges[i])


@pytest.mark.parametrize("i", [1, 2, 5])
def test_encode_shape(rng, small_params, i):
    mol = random_molecule(rng, 6)
    assert encode(state_of(mol, i), small_params).shape == (i, SMALL.n_features)


def test_rigid_motion_invariance(rng, small_params, small_params64):
    mol = random_molecule(rng, 6)
    for params, tol, dtype in ((small_params, 1e-5, np.float32), (small_params64, 1e-10, np.float64)):
        with ad.precision(dtype):
            ref = encode(state_of(mol, 5), params).data
            for _ in range(20):
                pos = mol.positions @ random_rotation(rng).T + rng.uniform(-1, 1, 3)
                s = PartialState.from_positions(mol.charges[:5], pos[:5], mol.charges[5])
                assert np.abs(encode(s, params).data - ref).max() < tol


def test_placed_permutation_equivariance(rng, small_params64):
    mol = random_molecule(rng, 6)
    perm = rng.permutation(5)
    a = encode(state_of(mol, 5), small_params64).data
    s = PartialState.from_positions(mol.charges[:5][perm], mol.positions[:5][perm], mol.charges[5])
    b = encode(s, small_params64).data
    assert np.allclose(a[perm], b, rtol=0, atol=1e-12)


def test_conditioning_is_elementwise_product(rng, small_params64):
    mol = random_molecule(rng, 5)
    p = small_params64
    emb = p["embedding"].data
    base = state_of(mol, 4)
    inner = refine(pack_states([base]), p).data
    for z in (1, 6, 7, 8, 9):
        s = PartialState(base.charges, base.distances, z)
        out = encode(s, p).data
        assert np.allclose(out, inner * emb[p.element_rows([z])[0]], rtol=0, atol=1e-14)


def test_zero_filters_remove_geometry(rng):
    p = init_params(SMALL, np.random.default_rng(2), dtype=np.float64)
    for b in range(SMALL.n_interactions):
        for name in ("filter1.weight", "filter1.bias", "filter2.weight", "filter2.bias"):
            p[f"block{b}.{name}"].data[...] = 0.0
    # ssp(0) = 0, so every filter vanishes and no messages pass between atoms
    mol = random_molecule(rng, 5)
    out = encode(state_of(mol, 4), p).data
    stretched = PartialState.from_positions(mol.charges[:4], mol.positions[:4] * 1.7, mol.charges[4])
    assert np.array_equal(encode(stretched, p).data, out)
    for k in range(4):
        alone = encode(PartialState([mol.charges[k]], np.zeros((1, 1)), mol.charges[4]), p).data[0]
        assert np.allclose(out[k], alone, rtol=0, atol=1e-14)


def test_unsupported_charge(small_params):
    with pytest.raises(UnsupportedElementError):
        encode(PartialState([6], np.zeros((1, 1)), 17), small_params)
    with pytest.raises(UnsupportedElementError):
        encode(PartialState([2], np.zeros((1, 1)), 6), small_params)


def test_packed_states_match_single_states(rng, small_params64):
    mols = [random_molecule(rng, n) for n in (3, 5, 4)]
    states = [state_of(m, len(m) - 1) for m in mols]
    packed = refine(pack_states(states), small_params64).data
    start = 0
    for s in states:
        single = refine(pack_states([s]), small_params64).data
        assert np.allclose(packed[start : start + len(s)], single, atol=1e-12)
        start += len(s)
