"""Molecular graph data model: dataset parsing, heavy-atom graphs,
labeled subgraph isomorphism (VF2-style), and OOD classification."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

HYDROGEN = 1
CARBON = 6
NITROGEN = 7
OXYGEN = 8

AROMATIC = "ar"
BOND_ORDERS = (1, 2, 3, AROMATIC)


class DatasetParseError(ValueError):
    """Malformed dataset line; message carries the line number."""


class ValidationError(ValueError):
    """A molecule violating its invariants; message carries the id."""


@dataclass(frozen=True)
class Molecule:
    id: str
    atoms: tuple  # ((z, (x, y, z)), ...) positions in Å
    bonds: tuple  # ((i, j, order), ...) undirected, i < j
    label_u0: float  # eV

    def __post_init__(self):
        if len(self.atoms) < 1:
            raise ValidationError(f"{self.id}: molecule has no atoms")
        seen = set()
        for i, j, order in self.bonds:
            if not (0 <= i < len(self.atoms)) or not (0 <= j < len(self.atoms)):
                raise ValidationError(f"{self.id}: bond ({i},{j}) out of range")
            if i == j:
                raise ValidationError(f"{self.id}: self-bond on atom {i}")
            if order not in BOND_ORDERS:
                raise ValidationError(f"{self.id}: bad bond order {order!r}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValidationError(f"{self.id}: duplicate bond {key}")
            seen.add(key)
        for z, pos in self.atoms:
            if len(pos) != 3 or not all(math.isfinite(c) for c in pos):
                raise ValidationError(f"{self.id}: non-finite or malformed position")
            if not isinstance(z, int) or z < 1:
                raise ValidationError(f"{self.id}: bad atomic number {z!r}")
        if not math.isfinite(self.label_u0):
            raise ValidationError(f"{self.id}: non-finite label")

    def n_heavy(self):
        return sum(1 for z, _ in self.atoms if z != HYDROGEN)


def molecule_from_dict(obj):
    try:
        atoms = tuple((int(z), tuple(float(c) for c in pos)) for z, pos in obj["atoms"])
        bonds = tuple(
            (min(int(i), int(j)), max(int(i), int(j)), o if o == AROMATIC else int(o))
            for i, j, o in obj["bonds"]
        )
        return Molecule(str(obj["id"]), atoms, bonds, float(obj["label_u0"]))
    except (KeyError, TypeError) as e:
        raise DatasetParseError(f"bad molecule object: {e}") from None


def molecule_to_dict(m):
    return {
        "id": m.id,
        "atoms": [[z, list(pos)] for z, pos in m.atoms],
        "bonds": [[i, j, o] for i, j, o in m.bonds],
        "label_u0": m.label_u0,
    }


def parse_dataset(path):
    """Read a JSON-lines molecule file; order follows the file."""
    molecules = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(f"{path}:{lineno}: {e}") from None
            try:
                molecules.append(molecule_from_dict(obj))
            except (DatasetParseError, ValidationError) as e:
                raise type(e)(f"{path}:{lineno}: {e}") from None
    return molecules


def write_dataset(path, molecules):
    with open(path, "w", encoding="utf-8") as f:
        for m in molecules:
            f.write(json.dumps(molecule_to_dict(m)) + "\n")


class EmptyGraphError(ValueError):
    """Molecule has no heavy atoms."""


@dataclass(frozen=True)
class LabeledGraph:
    """Heavy-atom view: nodes labeled by element, edges by bond order."""

    nodes: tuple  # atomic numbers
    edges: tuple  # ((i, j, label), ...) undirected, i < j

    def __post_init__(self):
        if len(self.nodes) < 1:
            raise EmptyGraphError("graph must have at least one node")

    def n_nodes(self):
        return len(self.nodes)

    def adjacency(self):
        adj = {i: {} for i in range(len(self.nodes))}
        for i, j, lab in self.edges:
            adj[i][j] = lab
            adj[j][i] = lab
        return adj

    def degree_sequence(self):
        deg = [0] * len(self.nodes)
        for i, j, _ in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


def heavy_graph(m):
    """Drop hydrogens and re-index densely; edge labels preserved."""
    keep = [idx for idx, (z, _) in enumerate(m.atoms) if z != HYDROGEN]
    if not keep:
        raise EmptyGraphError(f"{m.id}: molecule has no heavy atoms")
    remap = {old: new for new, old in enumerate(keep)}
    nodes = tuple(m.atoms[old][0] for old in keep)
    edges = tuple(
        (min(remap[i], remap[j]), max(remap[i], remap[j]), order)
        for i, j, order in m.bonds
        if i in remap and j in remap
    )
    return LabeledGraph(nodes, edges)


def subgraph_match(pattern, target, mode="exists"):
    """Label-respecting subgraph isomorphism via VF2-style backtracking.

    Returns True/False for mode "exists", an embedding count for "count",
    or the list of embeddings (tuples mapping pattern node -> target node)
    for "all". Pattern edges must all be present in the target image with
    equal labels; extra target edges between matched nodes are allowed
    (subgraph, not induced, matching).
    """
    if mode not in ("exists", "count", "all"):
        raise ValueError(f"bad mode {mode!r}")
    np_, nt = pattern.n_nodes(), target.n_nodes()
    if np_ > nt:
        return False if mode == "exists" else (0 if mode == "count" else [])

    padj = pattern.adjacency()
    tadj = target.adjacency()
    pdeg = pattern.degree_sequence()
    tdeg = target.degree_sequence()

    # order pattern nodes so each (after the first) touches a matched one
    order = []
    placed = set()
    while len(order) < np_:
        cand = [i for i in range(np_) if i not in placed and any(j in placed for j in padj[i])]
        if not cand:
            cand = [i for i in range(np_) if i not in placed]
        nxt = max(cand, key=lambda i: (pdeg[i], -i))
        order.append(nxt)
        placed.add(nxt)

    mapping = [-1] * np_
    used = [False] * nt
    results = []

    def candidates(p):
        anchored = [(q, padj[p][q]) for q in padj[p] if mapping[q] != -1]
        if anchored:
            q0, lab0 = anchored[0]
            return [t for t, lab in tadj[mapping[q0]].items() if lab == lab0 and not used[t]]
        return [t for t in range(nt) if not used[t]]

    def feasible(p, t):
        if target.nodes[t] != pattern.nodes[p]:
            return False
        if tdeg[t] < pdeg[p]:
            return False
        for q, lab in padj[p].items():
            if mapping[q] != -1 and tadj[t].get(mapping[q]) != lab:
                return False
        return True

    def backtrack(depth):
        if depth == np_:
            results.append(tuple(mapping))
            return mode == "exists"
        p = order[depth]
        for t in candidates(p):
            if feasible(p, t):
                mapping[p] = t
                used[t] = True
                if backtrack(depth + 1):
                    return True
                mapping[p] = -1
                used[t] = False
        return False

    backtrack(0)
    if mode == "exists":
        return bool(results)
    if mode == "count":
        return len(results)
    return results


def graphs_isomorphic(a, b):
    """Exact label-respecting isomorphism (same node and edge counts)."""
    if len(a.nodes) != len(b.nodes) or len(a.edges) != len(b.edges):
        return False
    if sorted(a.nodes) != sorted(b.nodes):
        return False
    # equal edge counts make subgraph embedding an isomorphism
    return subgraph_match(a, b, mode="exists")


class OodClass(Enum):
    BASE = "base"
    ESTER = "ester"
    OXIME = "oxime"


# C(=O)-O-C with exact order labels; node 0 = carbonyl carbon
ESTER_PATTERN = LabeledGraph(
    nodes=(CARBON, OXYGEN, OXYGEN, CARBON),
    edges=((0, 1, 2), (0, 2, 1), (2, 3, 1)),
)


def classify_ood(m):
    """Three-way split: any N-O bond wins (oxime side), then ester motif."""
    for i, j, _ in m.bonds:
        zi, zj = m.atoms[i][0], m.atoms[j][0]
        if {zi, zj} == {NITROGEN, OXYGEN}:
            return OodClass.OXIME
    try:
        hg = heavy_graph(m)
    except EmptyGraphError:
        return OodClass.BASE
    if hg.n_nodes() >= ESTER_PATTERN.n_nodes() and subgraph_match(ESTER_PATTERN, hg):
        return OodClass.ESTER
    return OodClass.BASE
