"""Pairwise Markov random field over categorical features.

Structure learning thresholds empirical normalized mutual information per
feature pair; edge potentials are smoothed negative log odds ratios, so a
smaller entry means affinity between the two values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import MISSING, Dataset

# Pair-evaluation budget for very wide schemas; pairs are ranked by the sum
# of the two features' empirical entropies before truncation.
DEFAULT_MAX_PAIRS = 10**6


@dataclass(frozen=True)
class MrfGraph:
    """Feature-pair graph with per-edge penalty matrices.

    Edges are keyed (j, k) with j < k; ``edges[(j, k)]`` has shape
    (cardinality_j, cardinality_k).
    """

    cardinalities: tuple[int, ...]
    edges: dict[tuple[int, int], np.ndarray] = field(repr=False)
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        for (j, k), theta in self.edges.items():
            if j == k:
                raise ValueError(f"self edge ({j},{k})")
            if not j < k:
                raise ValueError(f"edge ({j},{k}) not in canonical j < k order")
            expect = (self.cardinalities[j], self.cardinalities[k])
            if theta.shape != expect:
                raise ValueError(f"edge ({j},{k}): shape {theta.shape} != {expect}")
            if not np.all(np.isfinite(theta)):
                raise ValueError(f"edge ({j},{k}): non-finite entries")
            theta.setflags(write=False)

    @property
    def num_features(self) -> int:
        return len(self.cardinalities)

    def edge_list(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def neighbors(self, j: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == j:
                out.append(b)
            elif b == j:
                out.append(a)
        return sorted(out)

    def theta_for(self, j: int, k: int) -> np.ndarray:
        """Penalty matrix oriented (value of j, value of k)."""
        if j < k:
            return self.edges[(j, k)]
        return self.edges[(k, j)].T


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _joint_counts(col_j, col_k, m_j, m_k) -> np.ndarray:
    mask = (col_j != MISSING) & (col_k != MISSING)
    a = col_j[mask].astype(np.int64) - 1
    b = col_k[mask].astype(np.int64) - 1
    return np.bincount(a * m_k + b, minlength=m_j * m_k).reshape(m_j, m_k).astype(float)


def pair_nmi(col_j: np.ndarray, col_k: np.ndarray, m_j: int, m_k: int) -> float:
    """Empirical mutual information normalized by the smaller marginal entropy."""
    joint = _joint_counts(col_j, col_k, m_j, m_k)
    n = joint.sum()
    if n == 0:
        return 0.0
    p = joint / n
    pj = p.sum(axis=1)
    pk = p.sum(axis=0)
    outer = np.outer(pj, pk)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / outer[nz])).sum())
    denom = min(_entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0)))
    if denom <= 0:
        return 0.0
    return max(mi, 0.0) / denom


def _edge_theta(col_j, col_k, m_j, m_k) -> np.ndarray:
    joint = _joint_counts(col_j, col_k, m_j, m_k) + 1.0  # add-one keeps logs finite
    p = joint / joint.sum()
    pj = p.sum(axis=1)
    pk = p.sum(axis=0)
    return -np.log(p / np.outer(pj, pk))


def learn_structure(
    dataset: Dataset,
    mi_threshold: float,
    max_pairs: int = DEFAULT_MAX_PAIRS,
) -> MrfGraph:
    """Threshold pairwise NMI to pick edges; fit smoothed log-odds penalties.

    Deterministic given the dataset.  When the number of feature pairs
    exceeds ``max_pairs``, only the pairs with the highest combined marginal
    entropy are evaluated.
    """
    n = dataset.num_rows
    if n == 0:
        raise ValueError("cannot learn from an empty dataset")
    if n < 100:
        raise ValueError(f"need at least 100 rows for stable estimates, got {n}")
    cards = dataset.schema.cardinalities
    max_threshold = float(np.log(min(cards)))
    if not 0.0 <= mi_threshold <= max_threshold:
        raise ValueError(
            f"mi_threshold must lie in [0, ln(min cardinality)] = [0, {max_threshold:.4f}]"
        )
    k = dataset.schema.num_features
    pairs = [(j, kk) for j in range(k) for kk in range(j + 1, k)]
    if len(pairs) > max_pairs:
        ent = [
            _entropy(np.bincount(dataset.column(j), minlength=cards[j] + 1)[1:])
            for j in range(k)
        ]
        pairs.sort(key=lambda jk: (-(ent[jk[0]] + ent[jk[1]]), jk))
        pairs = sorted(pairs[:max_pairs])
    edges: dict[tuple[int, int], np.ndarray] = {}
    for j, kk in pairs:
        nmi = pair_nmi(dataset.column(j), dataset.column(kk), cards[j], cards[kk])
        if nmi > mi_threshold:
            edges[(j, kk)] = _edge_theta(
                dataset.column(j), dataset.column(kk), cards[j], cards[kk]
            )
    return MrfGraph(tuple(cards), edges, tuple(dataset.schema.names))


def conditional_distribution(
    graph: MrfGraph, j: int, assignment: Sequence[int]
) -> np.ndarray:
    """Distribution of feature j given the other features' values.

    ``assignment`` is a full-length value vector; position j is ignored and
    missing (0) neighbor values contribute no energy.  Features that are not
    neighbors of j never affect the result.
    """
    m_j = graph.cardinalities[j]
    if len(assignment) != graph.num_features:
        raise ValueError("assignment must cover every feature")
    for i, v in enumerate(assignment):
        if i != j and v != MISSING and not 1 <= v <= graph.cardinalities[i]:
            raise ValueError(f"feature {i}: value {v} out of range")
    energy = np.zeros(m_j)
    for k in graph.neighbors(j):
        v = assignment[k]
        if v == MISSING:
            continue
        energy += graph.theta_for(j, k)[:, v - 1]
    logits = -energy
    logits -= logits.max()
    probs = np.exp(logits)
    return probs / probs.sum()


def edge_summaries(graph: MrfGraph) -> dict[tuple[int, int], float]:
    """Mean absolute penalty per edge; compact stand-in for full matrices."""
    return {edge: float(np.abs(theta).mean()) for edge, theta in graph.edges.items()}


def save_graph(graph: MrfGraph, path: str) -> None:
    obj = {
        "cardinalities": list(graph.cardinalities),
        "names": list(graph.names) if graph.names else None,
        "edges": [
            {
                "j": j,
                "k": k,
                "theta": graph.edges[(j, k)].tolist(),
                "summary": float(np.abs(graph.edges[(j, k)]).mean()),
            }
            for j, k in graph.edge_list()
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)


def load_graph(path: str) -> MrfGraph:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    edges = {
        (e["j"], e["k"]): np.array(e["theta"], dtype=float) for e in obj["edges"]
    }
    names = tuple(obj["names"]) if obj.get("names") else None
    return MrfGraph(tuple(obj["cardinalities"]), edges, names)
