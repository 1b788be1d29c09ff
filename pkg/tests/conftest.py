import numpy as np
import pytest

from iclmol.molgraph import Molecule


def gradcheck(analytic, numeric, rtol=1e-5, atol=1e-7):
    """|g - f| <= atol + rtol * |f| elementwise; atol absorbs the
    finite-difference roundoff floor (~1e-10 in f64)."""
    for g, f in zip(analytic, numeric):
        if g is None:
            continue
        assert np.all(np.abs(g - f) <= atol + rtol * np.abs(f)), (
            f"max violation {np.max(np.abs(g - f) - rtol * np.abs(f)):.3e}")


def sampled_fd(expr, inputs, rng, n_coords=40, h=1e-6):
    """Central differences on a random coordinate subset; returns
    [(input_idx, flat_idx, fd_value), ...]."""
    from iclmol import numcore as nc

    coords = []
    for ti, t in enumerate(inputs):
        for fi in range(t.data.size):
            coords.append((ti, fi))
    picks = [coords[i] for i in rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)]
    out = []
    for ti, fi in picks:
        flat = inputs[ti].data.reshape(-1)
        orig = flat[fi]

        def value():
            v = expr(*[nc.Tensor(t.data) for t in inputs]).data
            return float(np.asarray(v).reshape(()))

        flat[fi] = orig + h
        fp = value()
        flat[fi] = orig - h
        fm = value()
        flat[fi] = orig
        out.append((ti, fi, (fp - fm) / (2.0 * h)))
    return out


def chain_molecule(mid, elements, orders=None, label=0.0, spacing=1.5):
    """Straight-chain molecule along x with the given heavy elements."""
    orders = orders or [1] * (len(elements) - 1)
    atoms = tuple((z, (i * spacing, 0.0, 0.0)) for i, z in enumerate(elements))
    bonds = tuple((i, i + 1, o) for i, o in enumerate(orders))
    return Molecule(mid, atoms, bonds, label)


def random_molecule(rng, mid, n_min=2, n_max=8, elements=(1, 6, 6, 7, 8, 9)):
    """Random tree-shaped molecule with 3D positions."""
    n = rng.integers(n_min, n_max + 1)
    zs = [int(rng.choice(elements)) for _ in range(n)]
    pos = rng.normal(0.0, 1.2, (n, 3))
    bonds = []
    for v in range(1, n):
        u = int(rng.integers(0, v))
        bonds.append((u, v, int(rng.choice([1, 2, 3]))))
    atoms = tuple((z, tuple(p)) for z, p in zip(zs, pos))
    return Molecule(mid, atoms, tuple(bonds), float(rng.normal()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
