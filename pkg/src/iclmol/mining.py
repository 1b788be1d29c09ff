"""Constrained frequent-subgraph mining (gSpan-style DFS codes),
context-sequence construction, and a synthetic context-structured
dataset generator for desk-scale experiments."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .molgraph import (
    CARBON,
    LabeledGraph,
    Molecule,
    classify_ood,
    graphs_isomorphic,
    heavy_graph,
    subgraph_match,
)

# mining constraints on a pattern (heavy-atom graphs)
MIN_PATTERN_ATOMS = 2
MAX_PATTERN_CARBONS = 2
MAX_EXTRA_CARBONS = 6  # per context candidate, on top of the pattern


@dataclass(frozen=True)
class Pattern:
    id: str
    graph: LabeledGraph
    support: tuple  # molecule ids containing the pattern


@dataclass(frozen=True)
class ContextSequence:
    pattern_id: str
    molecule_ids: tuple


def pattern_admissible(g):
    carbons = sum(1 for z in g.nodes if z == CARBON)
    return (
        g.n_nodes() >= MIN_PATTERN_ATOMS
        and carbons <= MAX_PATTERN_CARBONS
        and carbons < g.n_nodes()  # at least one non-carbon heavy atom
    )


# ---------------------------------------------------------------------------
# gSpan: canonical DFS-code pattern growth
# ---------------------------------------------------------------------------

# edge labels must sort totally; aromatic ranks after the integer orders
_ELB_KEY = {1: 1, 2: 2, 3: 3, "ar": 4}


def _code_key(vlb1, elb, vlb2):
    return (vlb1, _ELB_KEY[elb], vlb2)


class _PDFS:
    """One projected occurrence: a db edge plus the chain of prior edges."""

    __slots__ = ("gid", "edge", "prev")

    def __init__(self, gid, edge, prev):
        self.gid = gid
        self.edge = edge  # (u, v, elb) in the db graph
        self.prev = prev


class _History:
    def __init__(self, pdfs):
        self.edges = []
        self.vertices_used = set()
        self.edges_used = set()
        while pdfs is not None:
            self.edges.append(pdfs.edge)
            u, v, _ = pdfs.edge
            self.vertices_used.update((u, v))
            self.edges_used.add(_ekey(pdfs.edge))
            pdfs = pdfs.prev
        self.edges.reverse()


def _ekey(edge):
    u, v, _ = edge
    return (min(u, v), max(u, v))


def _support(projected):
    return len({p.gid for p in projected})


def _rightmost_path(code):
    """Indices of forward edges forming the rightmost path, inner-first."""
    path = []
    old_frm = None
    for i in range(len(code) - 1, -1, -1):
        frm, to = code[i][0], code[i][1]
        if frm < to and (old_frm is None or to == old_frm):
            path.append(i)
            old_frm = frm
    return path


def _graph_from_code(code):
    n = max(max(c[0], c[1]) for c in code) + 1
    labels = [None] * n
    edges = []
    for frm, to, vlb1, elb, vlb2 in code:
        if vlb1 is not None:
            labels[frm] = vlb1
        if vlb2 is not None:
            labels[to] = vlb2
        edges.append((min(frm, to), max(frm, to), elb))
    return LabeledGraph(tuple(labels), tuple(sorted(edges, key=lambda e: (e[0], e[1], _ELB_KEY[e[2]]))))


def _adjacency_list(g):
    adj = [[] for _ in range(g.n_nodes())]
    for i, j, lab in g.edges:
        adj[i].append((j, lab))
        adj[j].append((i, lab))
    for lst in adj:
        lst.sort(key=lambda e: (e[0], _ELB_KEY[e[1]]))
    return adj


def _is_min(code):
    """True iff `code` is the minimal DFS code of the graph it denotes.

    Rebuilds the graph and grows its minimal code greedily (min extension
    over all occurrences of the current minimal prefix), comparing against
    `code` entry by entry.
    """
    if len(code) == 1:
        _, _, vlb1, elb, vlb2 = code[0]
        return vlb1 <= vlb2  # undirected edge: smaller endpoint label first
    g = _graph_from_code(code)
    adj = _adjacency_list(g)
    labels = g.nodes

    root = {}
    for u in range(len(labels)):
        for v, elb in adj[u]:
            key = _code_key(labels[u], elb, labels[v])
            root.setdefault(key, []).append(_PDFS(0, (u, v, elb), None))
    min_key = min(root)
    min_code = [(0, 1, *_unkey(min_key))]
    if _cmp_entry(min_code[0], code[0]) != 0:
        return False
    projected = root[min_key]

    while len(min_code) < len(code):
        rmpath = _rightmost_path(min_code)
        maxtoc = min_code[rmpath[0]][1]

        # backward extensions sort before any forward extension
        bwd_proj = {}
        for p in projected:
            hist = _History(p)
            rm_v = hist.edges[rmpath[0]][1]
            for i in rmpath[::-1][:-1]:  # inner rightmost-path edges, inner first
                inner_frm = hist.edges[i][0]
                for w, elb in adj[rm_v]:
                    if w == inner_frm and _ekey((rm_v, w, elb)) not in hist.edges_used:
                        key = (min_code[i][0], _ELB_KEY[elb])
                        bwd_proj.setdefault(key, []).append(_PDFS(0, (rm_v, w, elb), p))
                        break
        if bwd_proj:
            key = min(bwd_proj)
            entry = (maxtoc, key[0], None, _unelb(key[1]), None)
            if _cmp_entry(entry, code[len(min_code)]) != 0:
                return False
            min_code.append(entry)
            projected = bwd_proj[key]
            continue

        fwd_proj = {}
        for p in projected:
            hist = _History(p)
            rm_v = hist.edges[rmpath[0]][1]
            for w, elb in adj[rm_v]:
                if w not in hist.vertices_used:
                    key = (maxtoc, _ELB_KEY[elb], labels[w])
                    fwd_proj.setdefault(key, []).append(_PDFS(0, (rm_v, w, elb), p))
            for i in rmpath:
                frm_db = hist.edges[i][0]
                for w, elb in adj[frm_db]:
                    if w not in hist.vertices_used:
                        key = (min_code[i][0], _ELB_KEY[elb], labels[w])
                        fwd_proj.setdefault(key, []).append(_PDFS(0, (frm_db, w, elb), p))
        if not fwd_proj:
            return False
        # forward order: deeper rightmost-path vertex first
        key = min(fwd_proj, key=lambda k: (-k[0], k[1], k[2]))
        entry = (key[0], maxtoc + 1, None, _unelb(key[1]), key[2])
        if _cmp_entry(entry, code[len(min_code)]) != 0:
            return False
        min_code.append(entry)
        projected = fwd_proj[key]
    return True


def _unelb(key):
    for elb, k in _ELB_KEY.items():
        if k == key:
            return elb
    raise KeyError(key)


def _unkey(key):
    vlb1, elbk, vlb2 = key
    return vlb1, _unelb(elbk), vlb2


def _cmp_entry(a, b):
    """Compare DFS-code entries; labels may be None (determined earlier)."""
    ka = (a[0], a[1], -1 if a[2] is None else a[2], _ELB_KEY[a[3]], -1 if a[4] is None else a[4])
    kb = (b[0], b[1], -1 if b[2] is None else b[2], _ELB_KEY[b[3]], -1 if b[4] is None else b[4])
    return (ka > kb) - (ka < kb)


def _dfs_assignment(code):
    return None  # placeholder; db vertex -> dfs id resolved via histories


def _db_assignment(hist, code):
    return None


def mine_frequent(graphs, min_support, ids=None):
    """Frequent connected subgraphs under the pattern constraints.

    `graphs` are heavy-atom LabeledGraphs; `ids` names them (defaults to
    g0..gN). Patterns require >= 2 atoms, >= 1 non-carbon, <= 2 carbons,
    and support (distinct graphs) >= min_support. Canonical DFS codes keep
    the search duplicate-free; output order is canonical and deterministic.
    """
    if min_support < 2:
        raise ValueError("min_support must be >= 2")
    if ids is None:
        ids = [f"g{i}" for i in range(len(graphs))]
    adjs = [_adjacency_list(g) for g in graphs]
    results = []

    root = {}
    for gid, g in enumerate(graphs):
        for u in range(g.n_nodes()):
            for v, elb in adjs[gid][u]:
                key = _code_key(g.nodes[u], elb, g.nodes[v])
                root.setdefault(key, []).append(_PDFS(gid, (u, v, elb), None))

    def carbons_in_code(code):
        return sum(1 for z in _graph_from_code(code).nodes if z == CARBON)

    def emit(code, projected):
        g = _graph_from_code(code)
        if not pattern_admissible(g):
            return
        support = sorted({ids[p.gid] for p in projected})
        results.append((tuple(code), g, support))

    def grow(code, projected):
        if not _is_min(code):
            return
        emit(code, projected)
        rmpath = _rightmost_path(code)
        maxtoc = code[rmpath[0]][1]
        pat_labels = _graph_from_code(code).nodes

        bwd = {}
        fwd = {}
        for p in projected:
            gid = p.gid
            g, adj = graphs[gid], adjs[gid]
            hist = _History(p)
            rm_v = hist.edges[rmpath[0]][1]
            # backward: rightmost vertex to inner rightmost-path vertices
            for i in rmpath[::-1][:-1]:
                inner_frm = hist.edges[i][0]
                for w, elb in adj[rm_v]:
                    if w == inner_frm and _ekey((rm_v, w, elb)) not in hist.edges_used:
                        key = (code[i][0], _ELB_KEY[elb])
                        bwd.setdefault(key, []).append(_PDFS(gid, (rm_v, w, elb), p))
                        break
            # forward from rightmost vertex
            for w, elb in adj[rm_v]:
                if w not in hist.vertices_used:
                    key = (maxtoc, _ELB_KEY[elb], g.nodes[w])
                    fwd.setdefault(key, []).append(_PDFS(gid, (rm_v, w, elb), p))
            # forward from the rest of the rightmost path
            for i in rmpath:
                frm_db = hist.edges[i][0]
                for w, elb in adj[frm_db]:
                    if w not in hist.vertices_used:
                        key = (code[i][0], _ELB_KEY[elb], g.nodes[w])
                        fwd.setdefault(key, []).append(_PDFS(gid, (frm_db, w, elb), p))

        n_carbons = sum(1 for z in pat_labels if z == CARBON)

        for key in sorted(bwd):
            to_dfs, elbk = key
            if _support(bwd[key]) < min_support:
                continue
            grow(code + [(maxtoc, to_dfs, None, _unelb(elbk), None)], bwd[key])

        for key in sorted(fwd, key=lambda k: (-k[0], k[1], k[2])):
            frm_dfs, elbk, vlb2 = key
            if _support(fwd[key]) < min_support:
                continue
            if vlb2 == CARBON and n_carbons >= MAX_PATTERN_CARBONS:
                continue  # anti-monotone: carbons never decrease on growth
            grow(code + [(frm_dfs, maxtoc + 1, None, _unelb(elbk), vlb2)], fwd[key])

    for key in sorted(root):
        if _support(root[key]) < min_support:
            continue
        vlb1, elb, vlb2 = _unkey(key)
        grow([(0, 1, vlb1, elb, vlb2)], root[key])

    return [
        Pattern(id=f"p{idx:04d}", graph=g, support=tuple(sup))
        for idx, (_, g, sup) in enumerate(results)
    ]


def enumerate_frequent_bruteforce(graphs, min_support, max_nodes, ids=None):
    """Oracle: all connected labeled subgraphs up to `max_nodes`, constraint-
    filtered, deduped by isomorphism, support counted via subgraph_match."""
    if ids is None:
        ids = [f"g{i}" for i in range(len(graphs))]
    seen = []
    for g in graphs:
        adj = g.adjacency()
        n = g.n_nodes()
        # grow connected node sets
        frontier = [frozenset([i]) for i in range(n)]
        nodesets = set(frontier)
        for _ in range(max_nodes - 1):
            nxt = set()
            for s in frontier:
                for u in s:
                    for v in adj[u]:
                        if v not in s:
                            t = s | {v}
                            if t not in nodesets:
                                nodesets.add(t)
                                nxt.add(t)
            frontier = list(nxt)
        for s in nodesets:
            if len(s) < MIN_PATTERN_ATOMS or len(s) > max_nodes:
                continue
            members = sorted(s)
            remap = {m: i for i, m in enumerate(members)}
            # all connected spanning-edge subsets of the induced subgraph
            cand_edges = [
                (remap[i], remap[j], lab)
                for i, j, lab in g.edges
                if i in s and j in s
            ]
            for mask in range(1, 1 << len(cand_edges)):
                edges = tuple(cand_edges[b] for b in range(len(cand_edges)) if mask >> b & 1)
                sub = LabeledGraph(tuple(g.nodes[m] for m in members), edges)
                if not _connected(sub):
                    continue
                if not pattern_admissible(sub):
                    continue
                if any(graphs_isomorphic(sub, q) for q in seen):
                    continue
                seen.append(sub)
    out = []
    for sub in seen:
        sup = tuple(sorted(ids[i] for i, g in enumerate(graphs) if subgraph_match(sub, g)))
        if len(sup) >= min_support:
            out.append(Pattern(id="", graph=sub, support=sup))
    return out


def _connected(g):
    if g.n_nodes() == 1:
        return True
    adj = g.adjacency()
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == g.n_nodes()


# ---------------------------------------------------------------------------
# context construction
# ---------------------------------------------------------------------------


def context_candidates(pattern_graph, molecules, heavy_cache=None):
    """Molecule ids matching the pattern with <= 6 extra carbons and no
    other extra heavy atoms (any witnessing embedding suffices)."""
    out = []
    for m in molecules:
        hg = heavy_cache[m.id] if heavy_cache else heavy_graph(m)
        extra = hg.n_nodes() - pattern_graph.n_nodes()
        if extra < 0 or extra > MAX_EXTRA_CARBONS:
            continue
        # leftovers must be carbons, so non-carbon multisets must agree
        if sorted(z for z in hg.nodes if z != CARBON) != sorted(
            z for z in pattern_graph.nodes if z != CARBON
        ):
            continue
        for emb in subgraph_match(pattern_graph, hg, mode="all"):
            matched = set(emb)
            if all(hg.nodes[u] == CARBON for u in range(hg.n_nodes()) if u not in matched):
                out.append(m.id)
                break
    return out


def build_contexts(patterns, molecules, k=10, max_per_pattern=15, seed=0):
    """Sample disjoint k-element contexts per pattern, uniformly without
    replacement, never mixing OOD classes within one context."""
    if k < 2:
        raise ValueError("context length k must be >= 2")
    heavy_cache = {m.id: heavy_graph(m) for m in molecules}
    ood_of = {m.id: classify_ood(m) for m in molecules}
    rng = random.Random(seed)
    contexts = []
    for pat in patterns:
        cands = context_candidates(pat.graph, molecules, heavy_cache)
        by_class = {}
        for mid in cands:
            by_class.setdefault(ood_of[mid].value, []).append(mid)
        budget = max_per_pattern
        for cls in sorted(by_class):
            if budget <= 0:
                break
            pool = by_class[cls]
            rng.shuffle(pool)
            n = min(len(pool) // k, budget)
            for c in range(n):
                contexts.append(
                    ContextSequence(pat.id, tuple(pool[c * k:(c + 1) * k]))
                )
            budget -= n
    return contexts


# ---------------------------------------------------------------------------
# synthetic corpus generator
# ---------------------------------------------------------------------------

_NONCARBON_POOL = (7, 8, 9)  # N, O, F
_DEFAULT_ATOM_ENERGY = {6: -0.35, 7: -0.50, 8: -0.65, 9: -0.80}
_DEFAULT_BOND_ENERGY = {1: -0.10, 2: -0.22, 3: -0.31, "ar": -0.15}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    atom_energy: dict = field(default_factory=lambda: dict(_DEFAULT_ATOM_ENERGY))
    bond_energy: dict = field(default_factory=lambda: dict(_DEFAULT_BOND_ENERGY))
    offset_scale: float = 1.0  # stddev of per-pattern latent offsets, eV
    noise_scale: float = 0.01  # label noise stddev, eV
    bond_length: float = 1.5  # Å
    length_jitter: float = 0.1


def _random_pattern(rng, n_nodes):
    """Random labeled tree obeying the mining constraints."""
    max_carbons = min(MAX_PATTERN_CARBONS, n_nodes - 1)
    n_carbons = rng.randint(0, max_carbons)
    labels = [CARBON] * n_carbons + [
        rng.choice(_NONCARBON_POOL) for _ in range(n_nodes - n_carbons)
    ]
    rng.shuffle(labels)
    edges = []
    for v in range(1, n_nodes):
        u = rng.randrange(v)
        edges.append((u, v, rng.choice((1, 2))))
    return LabeledGraph(tuple(labels), tuple(edges))


def _embed_tree(nodes, edges, rng, spec):
    """Random 3D layout: children placed at bond length from their parent."""
    children = {i: [] for i in range(len(nodes))}
    for u, v, _ in edges:
        children[u].append(v)
        children[v].append(u)
    pos = [None] * len(nodes)
    pos[0] = (0.0, 0.0, 0.0)
    stack = [0]
    placed = {0}
    while stack:
        u = stack.pop()
        for v in children[u]:
            if v in placed:
                continue
            r = spec.bond_length + spec.length_jitter * rng.gauss(0.0, 1.0)
            theta = math.acos(2.0 * rng.random() - 1.0)
            phi = 2.0 * math.pi * rng.random()
            d = (
                r * math.sin(theta) * math.cos(phi),
                r * math.sin(theta) * math.sin(phi),
                r * math.cos(theta),
            )
            pos[v] = tuple(pos[u][c] + d[c] for c in range(3))
            placed.add(v)
            stack.append(v)
    return pos


def gen_synthetic(n_patterns, molecules_per_pattern, spec=None, seed=0,
                  k=10, max_per_pattern=15, n_holdout=None):
    """Generate a context-structured corpus with per-pattern latent offsets.

    Returns (molecules, contexts, holdout_pattern_ids). Molecules of a
    holdout pattern appear only in that pattern's (evaluation) contexts.
    Labels: sum of atom/bond energies + pattern offset + Gaussian noise.
    """
    if n_patterns < 2:
        raise ValueError("need at least 2 patterns")
    spec = spec or SyntheticTaskSpec()
    rng = random.Random(seed)
    if n_holdout is None:
        n_holdout = max(2, n_patterns // 8)

    patterns = []
    while len(patterns) < n_patterns:
        g = _random_pattern(rng, rng.randint(2, 4))
        if any(graphs_isomorphic(g, q) for q in patterns):
            continue
        patterns.append(g)
    offsets = [rng.gauss(0.0, spec.offset_scale) for _ in patterns]
    holdout = sorted(rng.sample(range(n_patterns), n_holdout))
    holdout_ids = [f"p{idx:04d}" for idx in holdout]

    molecules = []
    contexts = []
    for pidx, pat in enumerate(patterns):
        pat_id = f"p{pidx:04d}"
        mol_ids = []
        for midx in range(molecules_per_pattern):
            n_extra = rng.randint(0, MAX_EXTRA_CARBONS)
            nodes = list(pat.nodes)
            edges = list(pat.edges)
            for _ in range(n_extra):
                parent = rng.randrange(len(nodes))
                nodes.append(CARBON)
                edges.append((parent, len(nodes) - 1, 1))
            pos = _embed_tree(nodes, edges, rng, spec)
            label = (
                sum(spec.atom_energy[z] for z in nodes)
                + sum(spec.bond_energy[o] for _, _, o in edges)
                + offsets[pidx]
                + rng.gauss(0.0, spec.noise_scale)
            )
            mid = f"{pat_id}_m{midx:04d}"
            molecules.append(
                Molecule(
                    id=mid,
                    atoms=tuple((z, pos[i]) for i, z in enumerate(nodes)),
                    bonds=tuple((min(u, v), max(u, v), o) for u, v, o in edges),
                    label_u0=label,
                )
            )
            mol_ids.append(mid)
        rng.shuffle(mol_ids)
        n_ctx = min(len(mol_ids) // k, max_per_pattern)
        for c in range(n_ctx):
            contexts.append(ContextSequence(pat_id, tuple(mol_ids[c * k:(c + 1) * k])))

    return molecules, contexts, holdout_ids


# ---------------------------------------------------------------------------
# JSON-lines serialization of patterns and contexts
# ---------------------------------------------------------------------------


def write_patterns(path, patterns):
    import json

    with open(path, "w", encoding="utf-8") as f:
        for p in patterns:
            f.write(json.dumps({
                "pattern_id": p.id,
                "nodes": list(p.graph.nodes),
                "edges": [[i, j, o] for i, j, o in p.graph.edges],
                "support": list(p.support),
            }) + "\n")


def read_patterns(path):
    import json

    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            g = LabeledGraph(
                tuple(obj["nodes"]),
                tuple((i, j, o if o == "ar" else int(o)) for i, j, o in obj["edges"]),
            )
            out.append(Pattern(obj["pattern_id"], g, tuple(obj["support"])))
    return out


def write_contexts(path, contexts):
    import json

    with open(path, "w", encoding="utf-8") as f:
        for c in contexts:
            f.write(json.dumps({
                "pattern_id": c.pattern_id,
                "molecule_ids": list(c.molecule_ids),
            }) + "\n")


def read_contexts(path):
    import json

    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(ContextSequence(obj["pattern_id"], tuple(obj["molecule_ids"])))
    return out
