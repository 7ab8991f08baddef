"""AU relationship graph built from label co-occurrence statistics.

For AUs i and j the lift ``P(y_i=1 | y_j=1) - P(y_i=1)`` decides the edge:
above ``p_pos`` gives a positive edge, below ``p_neg`` a negative one.
Supplementary prior edges can be added on top, and the two binary matrices
are assembled into the signed C×4C adjacency consumed by the GGNN.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, ParseError, ValidationError

logger = logging.getLogger(__name__)

STATISTICAL = "statistical"
PRIOR = "prior"
ONE_WAY = "one_way"
TWO_WAY = "two_way"


@dataclass
class LabelTable:
    """Binary multi-label annotations, one row per sample."""

    au_ids: list[int]
    rows: np.ndarray
    subjects: list[str] | None = None
    frames: list[str] | None = None

    def __post_init__(self):
        self.au_ids = [int(a) for a in self.au_ids]
        self.rows = np.asarray(self.rows)
        if self.rows.ndim == 1:
            self.rows = self.rows.reshape(-1, len(self.au_ids))
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.au_ids):
            raise ValidationError(
                f"label rows {self.rows.shape} do not match {len(self.au_ids)} AU columns")
        if self.rows.shape[0] < 1:
            raise InputError("label table has no rows")
        if len(set(self.au_ids)) != len(self.au_ids) or self.au_ids != sorted(self.au_ids):
            raise ValidationError(f"AU ids must be unique and ascending: {self.au_ids}")
        if not np.isin(self.rows, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")
        self.rows = self.rows.astype(np.int8)
        for meta in (self.subjects, self.frames):
            if meta is not None and len(meta) != self.rows.shape[0]:
                raise ValidationError("metadata length does not match row count")

    @property
    def num_samples(self) -> int:
        return self.rows.shape[0]

    @property
    def num_aus(self) -> int:
        return len(self.au_ids)

    def subset(self, index) -> "LabelTable":
        index = np.asarray(index, dtype=int)
        pick = lambda xs: None if xs is None else [xs[i] for i in index]  # noqa: E731
        return LabelTable(list(self.au_ids), self.rows[index], pick(self.subjects), pick(self.frames))

    def index_of(self, au: int) -> int:
        try:
            return self.au_ids.index(int(au))
        except ValueError:
            raise ValidationError(f"AU{au} is not among {self.au_ids}") from None


@dataclass
class EdgeStats:
    marginal: np.ndarray          # C, P(y_i = 1)
    conditional: np.ndarray       # C×C, P(y_i = 1 | y_j = 1); NaN where undefined
    defined: np.ndarray           # C×C bool, False where count(y_j = 1) == 0
    cooccurrence_counts: np.ndarray  # C×C int, count(y_i = 1 and y_j = 1)
    num_samples: int


def compute_edge_stats(labels: LabelTable) -> EdgeStats:
    y = labels.rows.astype(np.int64)
    m = y.shape[0]
    if m < 1:
        raise InputError("cannot compute statistics of an empty label table")
    counts = y.T @ y
    positives = np.diag(counts).copy()
    defined = np.broadcast_to(positives[None, :] > 0, counts.shape).copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        conditional = np.where(defined, counts / np.where(positives > 0, positives, 1)[None, :],
                               np.nan)
    never = [labels.au_ids[j] for j in np.flatnonzero(positives == 0)]
    if never:
        logger.warning("AUs never positive, their conditionals are undefined: %s", never)
    return EdgeStats(marginal=positives / m, conditional=conditional, defined=defined,
                     cooccurrence_counts=counts, num_samples=m)


def threshold_edges(stats: EdgeStats, p_pos: float = 0.2,
                    p_neg: float = -0.03) -> tuple[np.ndarray, np.ndarray]:
    """Binary positive and negative edge matrices from the lift ``cond - marginal``."""
    if not p_pos > 0 > p_neg:
        raise ValidationError(f"need p_pos > 0 > p_neg, got {p_pos}, {p_neg}")
    lift = np.where(stats.defined, stats.conditional - stats.marginal[:, None], 0.0)
    a_pos = (stats.defined & (lift > p_pos)).astype(np.int8)
    a_neg = (stats.defined & (lift < p_neg)).astype(np.int8)
    return a_pos, a_neg


@dataclass(frozen=True)
class PriorEdge:
    src: int
    dst: int
    direction: str = TWO_WAY


@dataclass
class PriorEdgeList:
    """Supplementary edges keyed by AU id.

    A one-way pair ``(a, b)`` sets entry ``[a][b]``, i.e. the lift of AU a
    given AU b; two-way also sets ``[b][a]``.
    """

    positive: list[PriorEdge] = field(default_factory=list)
    negative: list[PriorEdge] = field(default_factory=list)

    @classmethod
    def from_obj(cls, obj) -> "PriorEdgeList":
        if not isinstance(obj, dict):
            raise ParseError("prior list must be an object with 'positive'/'negative'", "$")
        unknown = set(obj) - {"positive", "negative"}
        if unknown:
            raise ParseError(f"unknown keys {sorted(unknown)}", "$")
        lists = {}
        for kind in ("positive", "negative"):
            edges = []
            for k, item in enumerate(obj.get(kind, [])):
                where = f"$.{kind}[{k}]"
                if isinstance(item, dict):
                    pair, direction = item.get("pair"), item.get("direction", TWO_WAY)
                elif isinstance(item, list) and len(item) in (2, 3):
                    pair, direction = item[:2], (item[2] if len(item) == 3 else TWO_WAY)
                else:
                    raise ParseError("expected [a, b], [a, b, direction] or {pair, direction}", where)
                if (not isinstance(pair, list) or len(pair) != 2
                        or not all(isinstance(a, int) for a in pair)):
                    raise ParseError("pair must be two integer AU ids", where)
                if direction not in (ONE_WAY, TWO_WAY):
                    raise ParseError(f"direction must be {ONE_WAY!r} or {TWO_WAY!r}", where)
                edges.append(PriorEdge(pair[0], pair[1], direction))
            lists[kind] = edges
        return cls(**lists)

    @classmethod
    def from_json(cls, text: str) -> "PriorEdgeList":
        return cls.from_obj(_loads(text))

    def to_obj(self) -> dict:
        return {kind: [{"pair": [e.src, e.dst], "direction": e.direction}
                       for e in getattr(self, kind)]
                for kind in ("positive", "negative")}

    def referenced(self) -> set[int]:
        return {a for e in self.positive + self.negative for a in (e.src, e.dst)}


def bp4d_priors() -> PriorEdgeList:
    """Supplementary BP4D edges: positive (4,7), (15,24); negative (2,6), (12,15), (12,17)."""
    return PriorEdgeList(
        positive=[PriorEdge(4, 7), PriorEdge(15, 24)],
        negative=[PriorEdge(2, 6), PriorEdge(12, 15), PriorEdge(12, 17)],
    )


def _expand(edges: Sequence[PriorEdge], index: dict[int, int]) -> set[tuple[int, int]]:
    cells = set()
    for e in edges:
        if e.src == e.dst:
            raise ValidationError(f"prior edge AU{e.src} -> AU{e.dst} is a self-loop")
        for au in (e.src, e.dst):
            if au not in index:
                raise ValidationError(f"prior edge references AU{au}, not among {sorted(index)}")
        i, j = index[e.src], index[e.dst]
        cells.add((i, j))
        if e.direction == TWO_WAY:
            cells.add((j, i))
    return cells


def apply_priors(a_pos: np.ndarray, a_neg: np.ndarray, priors: PriorEdgeList,
                 au_ids: Sequence[int], provenance: dict | None = None):
    """Set prior edges on copies of the matrices.

    Returns ``(a_pos, a_neg, provenance)``.  Statistical edges are never
    removed; a prior that coincides with an existing edge keeps its
    statistical tag.
    """
    index = {int(a): k for k, a in enumerate(au_ids)}
    pos_cells = _expand(priors.positive, index)
    neg_cells = _expand(priors.negative, index)
    clash = pos_cells & neg_cells
    if clash:
        raise ValidationError(f"pairs listed as both positive and negative priors: {sorted(clash)}")
    a_pos = np.array(a_pos, dtype=np.int8, copy=True)
    a_neg = np.array(a_neg, dtype=np.int8, copy=True)
    provenance = dict(provenance) if provenance is not None else _stat_provenance(a_pos, a_neg)
    for cells, target, other in ((pos_cells, a_pos, a_neg), (neg_cells, a_neg, a_pos)):
        for i, j in sorted(cells):
            if other[i, j]:
                raise ValidationError(
                    f"prior on (AU{au_ids[i]}, AU{au_ids[j]}) conflicts with an existing edge "
                    "of the opposite sign")
            if not target[i, j]:
                target[i, j] = 1
                provenance[(i, j)] = PRIOR
    return a_pos, a_neg, provenance


def _stat_provenance(a_pos, a_neg) -> dict:
    prov = {}
    for m in (a_pos, a_neg):
        for i, j in zip(*np.nonzero(m)):
            if i != j:
                prov[(int(i), int(j))] = STATISTICAL
    return prov


@dataclass
class AUGraph:
    au_ids: list[int]
    a_pos: np.ndarray
    a_neg: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.au_ids)

    @property
    def A(self) -> np.ndarray:
        """Signed C×4C adjacency ``[A_pos, -A_neg, A_posᵀ, -A_negᵀ]`` (diagonal already cleared)."""
        p = self.a_pos.astype(np.float64)
        n = self.a_neg.astype(np.float64)
        return np.concatenate([p, -n, p.T, -n.T], axis=1)

    def edges(self, kind: str = "positive") -> set[tuple[int, int]]:
        m = self.a_pos if kind == "positive" else self.a_neg
        return {(self.au_ids[i], self.au_ids[j]) for i, j in zip(*np.nonzero(m))}

    def permuted(self, order: Sequence[int]) -> "AUGraph":
        """Graph with nodes reordered so that new node k is old node ``order[k]``."""
        order = list(order)
        inv = {old: new for new, old in enumerate(order)}
        return AUGraph([self.au_ids[k] for k in order],
                       self.a_pos[np.ix_(order, order)], self.a_neg[np.ix_(order, order)],
                       {(inv[i], inv[j]): tag for (i, j), tag in self.provenance.items()})


def assemble_adjacency(a_pos: np.ndarray, a_neg: np.ndarray, au_ids: Sequence[int],
                       provenance: dict | None = None) -> AUGraph:
    a_pos = np.asarray(a_pos)
    a_neg = np.asarray(a_neg)
    c = len(au_ids)
    for name, m in (("a_pos", a_pos), ("a_neg", a_neg)):
        if m.shape != (c, c):
            raise ValidationError(f"{name} must be {c}×{c}, got {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValidationError(f"{name} must be binary")
    if np.diag(a_neg).any():
        raise ValidationError("a_neg has self-loops")
    a_pos = a_pos.astype(np.int8)
    # Self-loops carry no relation; the statistical diagonal may be 0 or 1,
    # so it is cleared rather than subtracted (which could leave -1).
    np.fill_diagonal(a_pos, 0)
    if provenance is None:
        provenance = _stat_provenance(a_pos, a_neg)
    provenance = {k: v for k, v in provenance.items() if k[0] != k[1]}
    return AUGraph(list(au_ids), a_pos, a_neg.astype(np.int8), provenance)


def build_graph(labels: LabelTable, p_pos: float = 0.2, p_neg: float = -0.03,
                priors: PriorEdgeList | None = None) -> AUGraph:
    stats = compute_edge_stats(labels)
    a_pos, a_neg = threshold_edges(stats, p_pos, p_neg)
    prov = None
    if priors is not None:
        a_pos, a_neg, prov = apply_priors(a_pos, a_neg, priors, labels.au_ids)
    return assemble_adjacency(a_pos, a_neg, labels.au_ids, prov)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _loads(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, location=f"line {exc.lineno} column {exc.colno}") from None


def graph_to_json(g: AUGraph) -> str:
    obj = {
        "au_ids": list(g.au_ids),
        "a_pos": g.a_pos.astype(int).tolist(),
        "a_neg": g.a_neg.astype(int).tolist(),
        "provenance": {f"{i},{j}": tag for (i, j), tag in sorted(g.provenance.items())},
    }
    return json.dumps(obj, indent=1) + "\n"


def _matrix(obj, key, c):
    m = obj.get(key)
    if not isinstance(m, list) or len(m) != c:
        raise ParseError(f"expected {c} rows", location=f"$.{key}")
    for r, row in enumerate(m):
        if not isinstance(row, list) or len(row) != c or any(v not in (0, 1) for v in row):
            raise ParseError(f"expected {c} binary entries", location=f"$.{key}[{r}]")
    return np.array(m, dtype=np.int8).reshape(c, c)


def graph_from_json(text: str) -> AUGraph:
    obj = _loads(text)
    if not isinstance(obj, dict):
        raise ParseError("expected an object", location="$")
    au_ids = obj.get("au_ids")
    if not isinstance(au_ids, list) or not all(isinstance(a, int) for a in au_ids):
        raise ParseError("expected a list of integer AU ids", location="$.au_ids")
    c = len(au_ids)
    a_pos, a_neg = _matrix(obj, "a_pos", c), _matrix(obj, "a_neg", c)
    prov = {}
    for key, tag in (obj.get("provenance") or {}).items():
        try:
            i, j = (int(s) for s in key.split(","))
        except ValueError:
            raise ParseError(f"bad edge key {key!r}", location="$.provenance") from None
        if tag not in (STATISTICAL, PRIOR) or not (0 <= i < c and 0 <= j < c):
            raise ParseError(f"bad provenance entry {key!r}: {tag!r}", location="$.provenance")
        prov[(i, j)] = tag
    try:
        return assemble_adjacency(a_pos, a_neg, au_ids, prov)
    except ValidationError as exc:
        raise ParseError(str(exc), location="$") from None
