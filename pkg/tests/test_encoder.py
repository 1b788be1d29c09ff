import numpy as np
import pytest

from iclmol import encoder as E
from iclmol import numcore as nc
from iclmol.encoder import EncoderConfig, rbf_expand
from iclmol.molgraph import Molecule
from iclmol.numcore import Tensor

from conftest import gradcheck, random_molecule


@pytest.fixture
def small_cfg():
    return EncoderConfig(n_blocks=2, dim=8, rbf_size=4)


@pytest.fixture
def params(small_cfg):
    return E.init_encoder_params(small_cfg, seed=7, precision="f64")


def permute_molecule(m, perm):
    inv = np.argsort(perm)
    atoms = tuple(m.atoms[p] for p in perm)
    bonds = tuple((min(inv[i], inv[j]), max(inv[i], inv[j]), o) for i, j, o in m.bonds)
    return Molecule(m.id + "_perm", atoms, bonds, m.label_u0)


def rigid_transform(m, R, t):
    atoms = tuple((z, tuple(R @ np.asarray(p) + t)) for z, p in m.atoms)
    return Molecule(m.id + "_rot", atoms, m.bonds, m.label_u0)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---- rbf_expand ----


def test_rbf_peak_at_center():
    K, cutoff = 8, 4.0
    mu = np.linspace(0, cutoff, K)
    row = rbf_expand(np.array([mu[2]]), K, cutoff)[0]
    env = 0.5 * (np.cos(np.pi * mu[2] / cutoff) + 1.0)
    assert row[2] == pytest.approx(env)
    assert row[2] == row.max()


def test_rbf_zero_beyond_cutoff():
    row = rbf_expand(np.array([2.0, 5.0]), 6, 2.0)
    np.testing.assert_array_equal(row, np.zeros((2, 6)))


def test_rbf_matches_scalar_reference():
    K, cutoff, d = 4, 2.0, 0.5
    mu = np.linspace(0, cutoff, K)
    gamma = (K / cutoff) ** 2
    expected = np.exp(-gamma * (d - mu) ** 2) * 0.5 * (np.cos(np.pi * d / cutoff) + 1.0)
    np.testing.assert_allclose(rbf_expand(np.array([d]), K, cutoff)[0], expected, rtol=1e-14)


def test_rbf_rejects_negative_distance():
    with pytest.raises(ValueError):
        rbf_expand(np.array([-0.1]), 4, 2.0)


# ---- encode ----


def test_single_atom_has_no_messages(small_cfg, params):
    m = Molecule("atom", ((6, (0.0, 0.0, 0.0)),), (), 0.0)
    enc = E.encode(m, params, small_cfg)
    assert enc.shape == (2, 8)
    # messages vanish, so block outputs are the embedding plus bias gates only
    h = params["embed"].data[6].copy()
    for b in range(small_cfg.n_blocks):
        bias = params[f"block{b}.update.b"].data
        sig = 1.0 / (1.0 + np.exp(-bias))
        h = h + bias * sig
        np.testing.assert_allclose(enc[b], h, rtol=1e-12)


def test_permutation_invariance(small_cfg, params, rng):
    for i in range(20):
        m = random_molecule(rng, f"m{i}", n_min=3, n_max=7)
        perm = rng.permutation(len(m.atoms))
        e1 = E.encode(m, params, small_cfg)
        e2 = E.encode(permute_molecule(m, perm), params, small_cfg)
        assert np.max(np.abs(e1 - e2)) <= 1e-6 * max(1.0, np.max(np.abs(e1)))


def test_rigid_motion_invariance(small_cfg, params, rng):
    for i in range(20):
        m = random_molecule(rng, f"m{i}", n_min=2, n_max=7)
        R = random_rotation(rng)
        t = rng.normal(size=3)
        e1 = E.encode(m, params, small_cfg)
        e2 = E.encode(rigid_transform(m, R, t), params, small_cfg)
        assert np.max(np.abs(e1 - e2)) <= 1e-5 * max(1.0, np.max(np.abs(e1)))


def test_locality_with_tiny_global_cutoff(params):
    cfg = EncoderConfig(n_blocks=2, dim=8, rbf_size=4, global_cutoff=1e-9)
    # same bond graph and bond lengths, different non-bonded distance
    straight = Molecule("s", ((8, (0.0, 0.0, 0.0)), (6, (1.5, 0.0, 0.0)), (8, (3.0, 0.0, 0.0))),
                        ((0, 1, 1), (1, 2, 1)), 0.0)
    bent = Molecule("b", ((8, (0.0, 0.0, 0.0)), (6, (1.5, 0.0, 0.0)), (8, (1.5, 1.5, 0.0))),
                    ((0, 1, 1), (1, 2, 1)), 0.0)
    e1 = E.encode(straight, params, cfg)
    e2 = E.encode(bent, params, cfg)
    np.testing.assert_allclose(e1, e2, rtol=1e-10)


def test_batch_matches_single(small_cfg, params, rng):
    mols = [random_molecule(rng, f"m{i}", n_min=2, n_max=6) for i in range(4)]
    batch = E.encode_batch(mols, params, small_cfg).data
    for i, m in enumerate(mols):
        np.testing.assert_allclose(batch[i], E.encode(m, params, small_cfg), rtol=1e-10, atol=1e-12)


# ---- pretrain readout ----


def test_readout_zero_params(small_cfg, params, rng):
    m = random_molecule(rng, "m", n_min=2, n_max=5)
    enc = E.encode(m, params, small_cfg)
    zeroed = dict(params)
    for b in range(small_cfg.n_blocks):
        zeroed[f"readout{b}.w"] = Tensor(np.zeros((8, 1)))
        zeroed[f"readout{b}.b"] = Tensor(np.zeros(1))
    assert E.pretrain_readout(enc, zeroed, small_cfg) == 0.0


def test_readout_unit_basis():
    cfg = EncoderConfig(n_blocks=1, dim=4, rbf_size=3)
    params = E.init_encoder_params(cfg, seed=0, precision="f64")
    w = np.zeros((4, 1))
    w[2, 0] = 1.0
    params["readout0.w"] = Tensor(w)
    params["readout0.b"] = Tensor(np.zeros(1))
    enc = np.array([[0.5, -1.5, 2.5, 3.5]])
    assert E.pretrain_readout(enc, params, cfg) == pytest.approx(2.5)


def test_readout_matches_manual_dot(small_cfg, params, rng):
    m = random_molecule(rng, "m", n_min=2, n_max=6)
    enc = E.encode(m, params, small_cfg)
    expected = sum(
        float(enc[b] @ params[f"readout{b}.w"].data.reshape(-1))
        + float(params[f"readout{b}.b"].data[0])
        for b in range(small_cfg.n_blocks)
    )
    assert E.pretrain_readout(enc, params, small_cfg) == pytest.approx(expected, rel=1e-12)
    batched = E.pretrain_readout_batch(
        Tensor(enc[None, ...]), params, small_cfg).data[0]
    assert batched == pytest.approx(expected, rel=1e-12)


def test_mae_gradients_pass_finite_difference(small_cfg, params, rng):
    mols = [random_molecule(rng, f"m{i}", n_min=2, n_max=5) for i in range(3)]
    y = np.array([m.label_u0 for m in mols])
    names = list(params)

    def loss(*ts):
        p = dict(zip(names, ts))
        stack = E.encode_batch(mols, p, small_cfg)
        preds = E.pretrain_readout_batch(stack, p, small_cfg)
        return nc.mean(nc.absolute(nc.sub(preds, Tensor(y))))

    inputs = [params[n] for n in names]
    _, grads = nc.forward_backward(loss, inputs)
    fd = nc.finite_diff_grad(loss, inputs)
    gradcheck(grads, fd)


# ---- config and cache ----


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(n_blocks=0)
    with pytest.raises(ValueError):
        EncoderConfig(local_cutoff=-1.0)
    assert EncoderConfig(n_blocks=6, dim=128).encoding_dim == 768


def test_encodings_cache_roundtrip(tmp_path, rng):
    encs = {f"m{i}": rng.normal(size=16) for i in range(5)}
    path = tmp_path / "cache.bin"
    E.save_encodings(path, list(encs), encs)
    loaded, dim = E.load_encodings(path)
    assert dim == 16 and set(loaded) == set(encs)
    for k in encs:
        np.testing.assert_array_equal(loaded[k], encs[k])


def test_encoder_checkpoint_roundtrip(tmp_path, small_cfg, params):
    path = tmp_path / "enc.ckpt"
    E.save_encoder_checkpoint(path, params, small_cfg)
    loaded, cfg = E.load_encoder_checkpoint(path)
    assert cfg == small_cfg
    for k in params:
        np.testing.assert_array_equal(loaded[k].data, params[k].data)


def test_graph_encoder_estimator_api(rng):
    mols = [random_molecule(rng, f"m{i}", n_min=2, n_max=5, elements=(6, 7, 8))
            for i in range(12)]
    est = E.GraphEncoder(n_blocks=1, dim=8, rbf_size=4, epochs=2, batch_size=4, seed=0)
    assert est.get_params()["n_blocks"] == 1
    est.set_params(epochs=1)
    with pytest.raises(RuntimeError):
        est.transform(mols)
    est.fit(mols)
    X = est.transform(mols)
    assert X.shape == (12, 8)
    preds = est.predict(mols)
    assert preds.shape == (12,)
    with pytest.raises(ValueError):
        est.set_params(bogus=1)
