"""Knowledge-graph triple store and a relational graph convolution layer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ACTIVATIONS, DimensionError, Tensor, gather_rows, matmul, segment_sum

log = logging.getLogger(__name__)


class KGFormatError(ValueError):
    pass


@dataclass
class KnowledgeGraph:
    entity_names: list[str]
    relation_names: list[str]
    triples: np.ndarray  # (T, 3) int64 rows of (head, relation, tail)
    item_ids: list[int] = field(default_factory=list)
    duplicates_dropped: int = 0

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        self.entity_index = {n: i for i, n in enumerate(self.entity_names)}
        self.relation_index = {n: i for i, n in enumerate(self.relation_names)}
        if len(self.entity_index) != len(self.entity_names):
            raise KGFormatError("duplicate entity names")
        if len(self.triples):
            h, r, t = self.triples.T
            if h.min() < 0 or t.min() < 0 or max(h.max(), t.max()) >= self.num_entities:
                raise KGFormatError("triple references an unknown entity id")
            if r.min() < 0 or r.max() >= self.num_relations:
                raise KGFormatError("triple references an unknown relation id")
        self.item_ids = sorted(set(int(i) for i in self.item_ids))
        if self.item_ids and (self.item_ids[0] < 0 or self.item_ids[-1] >= self.num_entities):
            raise KGFormatError("item id outside the entity table")
        self._incoming: dict[tuple[int, int], list[int]] | None = None

    @classmethod
    def from_named_triples(cls, named, item_names=()) -> "KnowledgeGraph":
        """Build a graph assigning ids by first appearance; duplicates are dropped."""
        ents: dict[str, int] = {}
        rels: dict[str, int] = {}
        seen: set[tuple[int, int, int]] = set()
        rows = []
        dropped = 0
        for h, r, t in named:
            hid = ents.setdefault(h, len(ents))
            rid = rels.setdefault(r, len(rels))
            tid = ents.setdefault(t, len(ents))
            key = (hid, rid, tid)
            if key in seen:
                dropped += 1
                continue
            seen.add(key)
            rows.append(key)
        for name in item_names:
            ents.setdefault(name, len(ents))
        if dropped:
            log.warning("dropped %d duplicate triple(s)", dropped)
        return cls(list(ents), list(rels), np.array(rows, dtype=np.int64).reshape(-1, 3),
                   [ents[n] for n in item_names], dropped)

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    def stats(self) -> dict:
        return {"entities": self.num_entities, "relations": self.num_relations,
                "triples": self.num_triples, "items": len(self.item_ids),
                "duplicates_dropped": self.duplicates_dropped}

    def edges(self, add_inverse: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(src, relation, dst) arrays; inverse edges get relation id ``r + |R|``."""
        h, r, t = (self.triples[:, i] for i in range(3))
        if not add_inverse:
            return h.copy(), r.copy(), t.copy()
        return (np.concatenate([h, t]), np.concatenate([r, r + self.num_relations]),
                np.concatenate([t, h]))

    def num_edge_types(self, add_inverse: bool = True) -> int:
        return self.num_relations * (2 if add_inverse else 1)

    def undirected_adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.num_entities)]
        for h, _, t in self.triples:
            adj[h].add(int(t))
            adj[t].add(int(h))
        return adj


def load_kg(path, items_path=None) -> KnowledgeGraph:
    """Parse ``head<TAB>relation<TAB>tail`` lines; ``#`` comments and blanks skipped."""
    path = Path(path)
    named = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise KGFormatError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
            named.append(tuple(p.strip() for p in parts))
    if not named:
        raise KGFormatError(f"{path}: no triples found")
    item_names = []
    if items_path is not None:
        with Path(items_path).open(encoding="utf-8") as fh:
            item_names = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    return KnowledgeGraph.from_named_triples(named, item_names)


def save_kg(g: KnowledgeGraph, path, items_path=None) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in g.triples:
            fh.write(f"{g.entity_names[h]}\t{g.relation_names[r]}\t{g.entity_names[t]}\n")
    if items_path is not None:
        with Path(items_path).open("w", encoding="utf-8", newline="\n") as fh:
            for i in g.item_ids:
                fh.write(g.entity_names[i] + "\n")


def neighbors(g: KnowledgeGraph, n: int, r: int, add_inverse: bool = False) -> list[int]:
    """Sorted in-neighbours j of ``n`` with an edge (j, r, n)."""
    if not 0 <= n < g.num_entities:
        raise KeyError(f"unknown entity id {n}")
    if not 0 <= r < g.num_edge_types(add_inverse):
        raise KeyError(f"unknown relation id {r}")
    if g._incoming is None or getattr(g, "_incoming_inverse", None) != add_inverse:
        src, rel, dst = g.edges(add_inverse)
        table: dict[tuple[int, int], set[int]] = {}
        for s, rr, d in zip(src.tolist(), rel.tolist(), dst.tolist()):
            table.setdefault((d, rr), set()).add(s)
        g._incoming = {k: sorted(v) for k, v in table.items()}
        g._incoming_inverse = add_inverse
    return list(g._incoming.get((n, r), []))


@dataclass
class RelationalEdges:
    """Edge lists with the per-edge 1/c_{n,r} factor, c = relation-specific in-degree."""
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    norm: np.ndarray
    num_nodes: int
    num_relations: int

    @classmethod
    def from_graph(cls, g: KnowledgeGraph, add_inverse: bool = True) -> "RelationalEdges":
        src, rel, dst = g.edges(add_inverse)
        n_rel = g.num_edge_types(add_inverse)
        # self-inverse duplicates (h r t and t r' h both present) are distinct edges of distinct types
        keys = np.stack([src, rel, dst], axis=1)
        if len(keys):
            keys = np.unique(keys, axis=0)
        src, rel, dst = keys[:, 0], keys[:, 1], keys[:, 2]
        deg = np.zeros((g.num_entities, n_rel), dtype=np.int64)
        np.add.at(deg, (dst, rel), 1)
        norm = 1.0 / deg[dst, rel] if len(dst) else np.zeros(0)
        return cls(src, rel, dst, norm, g.num_entities, n_rel)


class RgcnLayer:
    """One relational convolution: per-relation weights plus a self-loop weight.

    Weights act on row vectors: ``h_out = phi(sum_r mean_{j in N_r(n)} h_j W_r + h_n W_0)``.
    """

    def __init__(self, num_relations: int, d_in: int, d_out: int, activation: str = "relu",
                 rng: np.random.Generator | None = None, dtype=np.float32, init_std: float | None = None,
                 init: str = "gaussian"):
        if init not in ("gaussian", "identity"):
            raise ValueError(f"unknown rgcn init {init!r}")
        if init == "identity" and d_in != d_out:
            raise DimensionError("identity init needs d_in == d_out")
        rng = rng or np.random.default_rng(0)
        std = init_std if init_std is not None else 1.0 / np.sqrt(d_in)
        self.num_relations = num_relations
        self.d_in, self.d_out = d_in, d_out
        self.activation = activation
        w_rel = rng.normal(0.0, std, size=(num_relations, d_in, d_out))
        w_self = rng.normal(0.0, std, size=(d_in, d_out))
        if init == "identity":
            # near-identity start: each layer begins as "self + neighbour means"
            eye = np.eye(d_in)
            w_rel, w_self = eye[None] + 0.1 * w_rel, eye + 0.1 * w_self
        self.w_rel = Tensor(w_rel.astype(dtype), requires_grad=True, name="rgcn.w_rel")
        self.w_self = Tensor(w_self.astype(dtype), requires_grad=True, name="rgcn.w_self")

    def parameters(self) -> dict[str, Tensor]:
        return {"rgcn.w_rel": self.w_rel, "rgcn.w_self": self.w_self}


def rgcn_forward(layer: RgcnLayer, edges: RelationalEdges, h_in: Tensor) -> Tensor:
    if h_in.ndim != 2 or h_in.shape[0] != edges.num_nodes:
        raise DimensionError(f"embedding table {h_in.shape} does not match {edges.num_nodes} entities")
    if h_in.shape[1] != layer.d_in:
        raise DimensionError(f"embedding width {h_in.shape[1]} != layer input width {layer.d_in}")
    if layer.num_relations != edges.num_relations:
        raise DimensionError(f"layer has {layer.num_relations} relation weights, graph has {edges.num_relations}")
    out = matmul(h_in, layer.w_self)
    if len(edges.src):
        per_rel = matmul(h_in.reshape(1, *h_in.shape), layer.w_rel)  # (R, n, D_out)
        messages = per_rel[(edges.rel, edges.src)] * edges.norm.astype(h_in.dtype)[:, None]
        out = out + segment_sum(messages, edges.dst, edges.num_nodes)
    return ACTIVATIONS[layer.activation](out)


def item_embedding(h: Tensor, ids) -> Tensor:
    return gather_rows(h, ids)


# ---------------------------------------------------------------------------
# synthetic graphs

_ONSETS = ["b", "br", "c", "d", "dr", "f", "g", "gr", "k", "l", "m", "n", "p", "r", "s", "st", "t", "tr", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "l", "s", "x", "m"]

RELATION_NAMES = ["has_genre", "starring", "directed_by", "set_in", "based_on", "scored_by", "produced_by", "themed"]


def _pseudo_words(n: int, rng: np.random.Generator, taken: set[str], syllables: tuple[int, int]) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))] for _ in range(k))
        if w not in taken and len(w) > 3:
            taken.add(w)
            out.append(w)
    return out


def generate_synthetic_kg(n_entities: int = 200, n_relations: int = 4, n_items: int = 64,
                          seed: int = 0, attrs_per_item: tuple[int, int] = (2, 4)) -> KnowledgeGraph:
    """Items linked to attribute entities; attribute ``a`` uses relation ``a % R``.

    Every attribute receives at least one edge so the TSV round-trip keeps it.
    """
    if n_items < 1 or n_entities <= n_items:
        raise ValueError("need at least one item and one attribute entity")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    items = [w.capitalize() for w in _pseudo_words(n_items, rng, taken, (2, 3))]
    attrs = _pseudo_words(n_entities - n_items, rng, taken, (2, 2))
    rel_names = [RELATION_NAMES[i % len(RELATION_NAMES)] + ("" if i < len(RELATION_NAMES) else f"_{i}")
                 for i in range(n_relations)]
    links: list[set[int]] = [set() for _ in range(n_items)]
    order = rng.permutation(len(attrs))
    for k, a in enumerate(order):
        links[k % n_items].add(int(a))
    for i in range(n_items):
        target = int(rng.integers(attrs_per_item[0], attrs_per_item[1] + 1))
        while len(links[i]) < target:
            links[i].add(int(rng.integers(len(attrs))))
    named = []
    for i in range(n_items):
        for a in sorted(links[i]):
            named.append((items[i], rel_names[a % n_relations], attrs[a]))
    return KnowledgeGraph.from_named_triples(named, items)
