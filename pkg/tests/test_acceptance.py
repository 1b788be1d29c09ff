"""End-to-end acceptance checks, one per guaranteed property.

Each test prints a single PASS line with its measured margin; the desk-scale
generalization test is the long pole (a few CPU-minutes per seed) and runs
three seeded replicates of the full pipeline at reduced width.
"""

import os
import random
import time

import numpy as np
import pytest

from iclmol import baselines, icl, mining, molgraph, training
from iclmol import encoder as E
from iclmol import numcore as nc
from iclmol.encoder import EncoderConfig
from iclmol.icl import IclConfig, TokenSequence
from iclmol.mining import ContextSequence
from iclmol.molgraph import LabeledGraph, Molecule, OodClass
from iclmol.numcore import Tensor
from iclmol.training import CurriculumState, curriculum_weights

from conftest import chain_molecule, random_molecule, sampled_fd


def report(line):
    print(f"\n[acceptance] {line}")


def test_reference_values_documented():
    """Full-scale results are out of reach on a desk machine and are carried
    as documented reference rows only."""
    readme = open(os.path.join(os.path.dirname(__file__), "..", "README.md")).read()
    for v in ("5.68", "147.47", "681.98", "5.90", "21.20", "29.85", "97.36"):
        assert v in readme, f"reference value {v} missing from README"
    report("reference values: PASS (7 full-scale meV rows documented in README)")


def test_gradient_correctness():
    """Sequence model (dim 16, 2 layers, k=3) and encoder (2 blocks, dim 8)
    both pass f64 finite-difference checks on >= 20 random instances each."""
    t0 = time.time()
    worst = 0.0

    icl_cfg = IclConfig(model_dim=16, n_layers=2, n_heads=2, max_positions=8,
                        encoder_dim=10)
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        params = icl.init_icl_params(icl_cfg, seed=i, precision="f64")
        seq = TokenSequence(rng.normal(size=(3, 10)), rng.normal(size=3))
        targets = Tensor(rng.normal(size=(1, 3)))
        weights = rng.uniform(0.1, 1.0, size=(1, 3))
        names = list(params)

        def loss(*ts):
            p = dict(zip(names, ts))
            preds = icl.forward_icl_batch(
                Tensor(seq.encodings[None]), Tensor(seq.labels[None]), p, icl_cfg)
            return icl.masked_loss(preds, targets, weights)

        inputs = [params[n] for n in names]
        _, grads = nc.forward_backward(loss, inputs)
        for pi, fi, f in sampled_fd(loss, inputs, rng, n_coords=25):
            g = grads[pi].reshape(-1)[fi]
            assert abs(g - f) <= 1e-7 + 1e-5 * abs(f), (names[pi], fi, g, f)
            worst = max(worst, abs(g - f) / (1e-7 / 1e-5 + abs(f)))

    enc_cfg = EncoderConfig(n_blocks=2, dim=8, rbf_size=4)
    for i in range(20):
        rng = np.random.default_rng(2000 + i)
        params = E.init_encoder_params(enc_cfg, seed=i, precision="f64")
        mols = [random_molecule(rng, f"m{j}", n_min=2, n_max=4) for j in range(2)]
        y = np.array([m.label_u0 for m in mols])
        names = list(params)

        def loss(*ts):
            p = dict(zip(names, ts))
            stack = E.encode_batch(mols, p, enc_cfg)
            preds = E.pretrain_readout_batch(stack, p, enc_cfg)
            return nc.mean(nc.absolute(nc.sub(preds, Tensor(y))))

        inputs = [params[n] for n in names]
        _, grads = nc.forward_backward(loss, inputs)
        for pi, fi, f in sampled_fd(loss, inputs, rng, n_coords=25):
            g = grads[pi].reshape(-1)[fi]
            assert abs(g - f) <= 1e-7 + 1e-5 * abs(f), (names[pi], fi, g, f)
            worst = max(worst, abs(g - f) / (1e-7 / 1e-5 + abs(f)))

    dt = time.time() - t0
    assert dt < 60.0, f"gradient checks took {dt:.1f}s"
    report(f"gradient correctness: PASS (40 instances, worst rel err "
           f"{worst:.2e} <= 1e-5, {dt:.1f}s < 60s)")


def test_causality_and_masking():
    """Earlier predictions are bit-identical under future-token perturbation,
    and the loss gradient at label-position head outputs is exactly zero."""
    cfg = IclConfig(model_dim=16, n_layers=2, n_heads=2, max_positions=12,
                    encoder_dim=6)
    params = icl.init_icl_params(cfg, seed=0, precision="f64")
    rng = np.random.default_rng(5)
    k = 5
    encs = rng.normal(size=(k, 6))
    labels = rng.normal(size=k)
    base = icl.forward_icl(TokenSequence(encs, labels), params, cfg)
    for i in range(1, k):
        # perturb every pair strictly after prediction position 2i
        e2, l2 = encs.copy(), labels.copy()
        e2[i + 1:] += rng.normal(size=e2[i + 1:].shape)
        l2[i:] += rng.normal(size=l2[i:].shape)
        got = icl.forward_icl(TokenSequence(e2, l2), params, cfg)
        np.testing.assert_array_equal(got[:i + 1], base[:i + 1])

    tok = icl._token_embeddings(Tensor(encs[None]), Tensor(labels[None]), params, cfg)
    out = icl.forward_tokens(tok, params, cfg)
    out.requires_grad = True
    T = 2 * k
    even = np.arange(0, T, 2)
    preds = nc.transpose(nc.gather(nc.transpose(out, (1, 0)), even), (1, 0))
    loss = icl.masked_loss(preds, Tensor(rng.normal(size=(1, k))),
                           np.ones((1, k)))
    loss.backward()
    odd = out.grad[0, 1::2]
    assert np.all(odd == 0.0), "nonzero gradient at a label-position head output"
    assert np.any(out.grad[0, 0::2] != 0.0)
    report("causality & masking: PASS (bit-identical prefixes; label-position "
           "head-output gradients exactly zero)")


def test_encoder_symmetries():
    """Permutation invariance <= 1e-6 rel and rigid-motion invariance
    <= 1e-5 rel over 100 random molecules (f64)."""
    cfg = EncoderConfig(n_blocks=2, dim=8, rbf_size=4)
    params = E.init_encoder_params(cfg, seed=9, precision="f64")
    rng = np.random.default_rng(99)
    worst_perm, worst_rigid = 0.0, 0.0
    for i in range(100):
        m = random_molecule(rng, f"m{i}", n_min=2, n_max=8)
        ref = E.encode(m, params, cfg)
        scale = max(1.0, np.max(np.abs(ref)))

        perm = rng.permutation(len(m.atoms))
        inv = np.argsort(perm)
        atoms = tuple(m.atoms[p] for p in perm)
        bonds = tuple((min(inv[a], inv[b]), max(inv[a], inv[b]), o)
                      for a, b, o in m.bonds)
        got = E.encode(Molecule("p", atoms, bonds, m.label_u0), params, cfg)
        worst_perm = max(worst_perm, np.max(np.abs(got - ref)) / scale)

        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
        t = rng.normal(size=3)
        atoms = tuple((zz, tuple(R @ np.asarray(p) + t)) for zz, p in m.atoms)
        got = E.encode(Molecule("r", atoms, m.bonds, m.label_u0), params, cfg)
        worst_rigid = max(worst_rigid, np.max(np.abs(got - ref)) / scale)

    assert worst_perm <= 1e-6, worst_perm
    assert worst_rigid <= 1e-5, worst_rigid
    report(f"encoder symmetries: PASS (100 molecules, permutation "
           f"{worst_perm:.2e} <= 1e-6, rigid motion {worst_rigid:.2e} <= 1e-5)")


def test_mining_oracle_equivalence():
    """Mined pattern set equals brute-force enumeration (up to isomorphism,
    with identical supports) on 50 random corpora."""
    t0 = time.time()
    rng = random.Random(123)
    total = 0
    for _ in range(50):
        graphs = []
        for _ in range(rng.randint(2, 10)):
            n = rng.randint(2, 8)
            labels = tuple(rng.choice([6, 6, 6, 7, 8, 9]) for _ in range(n))
            edges = tuple((rng.randrange(v), v, rng.choice([1, 2, "ar"]))
                          for v in range(1, n))
            graphs.append(LabeledGraph(labels, edges))
        ms = rng.randint(2, max(2, len(graphs) // 2 + 1))
        mined = mining.mine_frequent(graphs, ms)
        oracle = mining.enumerate_frequent_bruteforce(graphs, ms, max_nodes=8)
        assert len(mined) == len(oracle)
        used = set()
        for p in mined:
            hit = next((qi for qi, q in enumerate(oracle) if qi not in used
                        and molgraph.graphs_isomorphic(p.graph, q.graph)
                        and p.support == q.support), None)
            assert hit is not None, f"unmatched pattern {p.graph}"
            used.add(hit)
        total += len(mined)
    dt = time.time() - t0
    assert dt < 120.0, f"mining oracle comparison took {dt:.1f}s"
    report(f"mining oracle equivalence: PASS (50 corpora, {total} patterns "
           f"matched exactly, {dt:.1f}s < 120s)")


def test_ood_split_correctness():
    ester = Molecule("ester", ((6, (0.0, 0.0, 0.0)), (8, (1.2, 0.0, 0.0)),
                               (8, (-1.2, 0.0, 0.0)), (6, (-2.4, 0.0, 0.0))),
                     ((0, 1, 2), (0, 2, 1), (2, 3, 1)), 0.0)
    oxime = chain_molecule("oxime", [6, 7, 8], orders=[2, 1])
    hydroxylamine = chain_molecule("ha", [6, 7, 8], orders=[1, 1])
    alkane = chain_molecule("alkane", [6, 6, 6, 6])
    got = [molgraph.classify_ood(m) for m in (ester, oxime, hydroxylamine, alkane)]
    assert got == [OodClass.ESTER, OodClass.OXIME, OodClass.OXIME, OodClass.BASE]

    rng = np.random.default_rng(7)
    mols = [random_molecule(rng, f"m{i}") for i in range(200)]
    classes = [molgraph.classify_ood(m) for m in mols]
    assert all(isinstance(c, OodClass) for c in classes)  # total
    for m, c in zip(mols, classes):
        try:
            g = molgraph.heavy_graph(m)
        except molgraph.EmptyGraphError:
            assert c is OodClass.BASE
            continue
        has_no = any({g.nodes[i], g.nodes[j]} == {7, 8} for i, j, _ in g.edges)
        has_ester = molgraph.subgraph_match(molgraph.ESTER_PATTERN, g)
        if has_no:
            assert c is OodClass.OXIME
        elif has_ester:
            assert c is OodClass.ESTER
        else:
            assert c is OodClass.BASE
    report("OOD split: PASS (4 hand-built cases + 200 random molecules, "
           "partition exact and disjoint)")


def test_curriculum_schedule():
    k = 10
    np.testing.assert_array_equal(
        curriculum_weights(CurriculumState(step=0), k), np.ones(k))
    np.testing.assert_array_equal(
        curriculum_weights(CurriculumState(step=600 * 10_000), k),
        [0.0] * (k - 1) + [1.0])
    prev = None
    for step in range(0, 600 * 15, 300):
        w = curriculum_weights(CurriculumState(step=step), k)
        assert w[k - 1] == 1.0
        if prev is not None:
            assert np.all(w <= prev + 1e-15)
        prev = w
    report("curriculum schedule: PASS (step-0 all ones, saturation "
           "[0,...,0,1], per-index non-increasing, final weight always 1)")


def test_regression_baseline_exactness():
    rng = np.random.default_rng(31)
    worst = 0.0
    for trial in range(20):
        d = int(rng.integers(2, 12))
        n = int(rng.integers(d + 2, d + 10))
        w_true = rng.normal(size=d)
        b_true = float(rng.normal())
        cache, ids = {}, []
        for j in range(n):
            x = rng.normal(size=d)
            cache[f"t{trial}_m{j}"] = (x, float(x @ w_true + b_true))
            ids.append(f"t{trial}_m{j}")
        ctx = ContextSequence("p0000", tuple(ids))
        pred = baselines.ablation_predict(ctx, baselines.RegressionMode.FULL, cache)
        err = abs(pred - cache[ids[-1]][1])
        assert err <= 1e-8, err
        worst = max(worst, err)
    report(f"regression exactness: PASS (20 affine contexts, worst "
           f"last-example error {worst:.2e} <= 1e-8)")


@pytest.mark.slow
def test_desk_scale_generalization():
    """Three seeded pipeline replicates on the synthetic corpus: the
    in-context readout beats the context-free readout by at least 2x, the
    in-context error declines along the prompt, and the per-context
    regression ablation also beats context-free."""
    from iclmol.benchmark import run_desk_scale

    cpu0 = time.process_time()
    wall0 = time.time()
    results = []
    for seed in (0, 1, 2):
        r = run_desk_scale(seed=seed)
        results.append(r)
        report(f"seed {seed}: context-free {r.context_free_mae:.4f} eV, "
               f"in-context last {r.icl_last_mae:.4f} eV "
               f"(ratio {r.icl_last_mae / r.context_free_mae:.3f}), "
               f"position-1 {r.position_mae[0]:.4f} -> position-10 "
               f"{r.position_mae[-1]:.4f}, selection+regression "
               f"{r.selection_regression_mae:.4f} eV")
    cpu_min = (time.process_time() - cpu0) / 60.0
    wall_min = (time.time() - wall0) / 60.0

    pass_a = [r.icl_last_mae <= 0.5 * r.context_free_mae for r in results]
    pass_b = [r.position_mae[-1] <= 0.7 * r.position_mae[0] for r in results]
    pass_c = [r.selection_regression_mae < r.context_free_mae for r in results]
    assert all(pass_a), f"in-context vs context-free halving failed: {pass_a}"
    assert all(pass_b), f">=30% in-context error decline failed: {pass_b}"
    assert sum(pass_c) >= 2, f"selection+regression vs context-free: {pass_c}"
    assert cpu_min < 30.0, f"{cpu_min:.1f} CPU-minutes"
    report(f"desk-scale generalization: PASS (3/3 halving, 3/3 decline, "
           f"{sum(pass_c)}/3 regression ablation, {cpu_min:.1f} CPU-min "
           f"[{wall_min:.1f} wall] < 30)")
