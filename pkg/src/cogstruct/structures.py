"""Graph containers for cognitive structures.

A cognitive structure over ``L`` concepts has one state per concept (node) and
one state per unordered concept pair (edge). Edges are stored as a full
symmetric ``L x L`` matrix with a zero diagonal; only the upper triangle
carries information.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNCONSTRUCTED = 0
CONSTRUCTED = 1


def upper_indices(L: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the strict upper triangle, row-major order."""
    return np.triu_indices(L, k=1)


def n_pairs(L: int) -> int:
    return L * (L - 1) // 2


def symmetrize_upper(upper: np.ndarray, L: int, diag=0) -> np.ndarray:
    """Build a symmetric ``L x L`` (or ``... x L x L``) matrix from upper-triangle values."""
    upper = np.asarray(upper)
    lead = upper.shape[:-1]
    out = np.full(lead + (L, L), diag, dtype=upper.dtype)
    iu, ju = upper_indices(L)
    out[..., iu, ju] = upper
    out[..., ju, iu] = upper
    return out


@dataclass
class DiscreteStructure:
    """Hard construction states: ``0`` unconstructed, ``1`` constructed (or ``< c`` generally)."""

    node_states: np.ndarray
    edge_states: np.ndarray

    def __post_init__(self):
        self.node_states = np.asarray(self.node_states, dtype=np.int64)
        self.edge_states = np.asarray(self.edge_states, dtype=np.int64)
        L = self.node_states.shape[0]
        if self.node_states.ndim != 1 or self.edge_states.shape != (L, L):
            raise ValueError(
                f"shape mismatch: nodes {self.node_states.shape}, edges {self.edge_states.shape}"
            )

    @property
    def n_concepts(self) -> int:
        return self.node_states.shape[0]

    @classmethod
    def from_upper(cls, nodes, edges_upper) -> "DiscreteStructure":
        nodes = np.asarray(nodes, dtype=np.int64)
        return cls(nodes, symmetrize_upper(np.asarray(edges_upper, dtype=np.int64), len(nodes)))

    @classmethod
    def empty(cls, L: int) -> "DiscreteStructure":
        return cls(np.zeros(L, dtype=np.int64), np.zeros((L, L), dtype=np.int64))

    @classmethod
    def complete(cls, L: int) -> "DiscreteStructure":
        edges = np.ones((L, L), dtype=np.int64)
        np.fill_diagonal(edges, 0)
        return cls(np.ones(L, dtype=np.int64), edges)

    def edges_upper(self) -> np.ndarray:
        return self.edge_states[upper_indices(self.n_concepts)]

    def validate(self, c: int = 2) -> None:
        e = self.edge_states
        if not np.array_equal(e, e.T):
            raise ValueError("edge states are not symmetric")
        if np.any(np.diag(e) != 0):
            raise ValueError("edge diagonal must be zero")
        if self.node_states.min(initial=0) < 0 or self.node_states.max(initial=0) >= c:
            raise ValueError(f"node states outside [0, {c})")
        if e.min(initial=0) < 0 or e.max(initial=0) >= c:
            raise ValueError(f"edge states outside [0, {c})")

    def permute(self, perm) -> "DiscreteStructure":
        """Relabel concepts: new concept ``i`` is old concept ``perm[i]``."""
        perm = np.asarray(perm)
        return DiscreteStructure(self.node_states[perm], self.edge_states[np.ix_(perm, perm)])

    def __eq__(self, other):
        if not isinstance(other, DiscreteStructure):
            return NotImplemented
        return np.array_equal(self.node_states, other.node_states) and np.array_equal(
            self.edge_states, other.edge_states
        )

    def key(self) -> tuple:
        return tuple(self.node_states.tolist()) + tuple(self.edges_upper().tolist())


@dataclass
class CognitiveStructure:
    """Soft construction marginals, ``P(constructed)`` per concept and per relation.

    ``node_tested``/``edge_tested`` mark entries backed by evidence; untested
    entries hold 0.5.
    """

    node_marginals: np.ndarray
    edge_marginals: np.ndarray
    node_tested: np.ndarray = field(default=None)
    edge_tested: np.ndarray = field(default=None)

    def __post_init__(self):
        self.node_marginals = np.asarray(self.node_marginals, dtype=np.float64)
        self.edge_marginals = np.asarray(self.edge_marginals, dtype=np.float64)
        L = self.node_marginals.shape[0]
        if self.edge_marginals.shape != (L, L):
            raise ValueError("edge_marginals must be L x L")
        if self.node_tested is None:
            self.node_tested = np.ones(L, dtype=bool)
        if self.edge_tested is None:
            self.edge_tested = ~np.eye(L, dtype=bool)
        self.node_tested = np.asarray(self.node_tested, dtype=bool)
        self.edge_tested = np.asarray(self.edge_tested, dtype=bool)

    @property
    def n_concepts(self) -> int:
        return self.node_marginals.shape[0]

    @classmethod
    def from_discrete(cls, g: DiscreteStructure) -> "CognitiveStructure":
        """One-hot structures seen as degenerate marginals (state ``>= 1`` counts as constructed)."""
        return cls((g.node_states > 0).astype(float), (g.edge_states > 0).astype(float))

    def edges_upper(self) -> np.ndarray:
        return self.edge_marginals[upper_indices(self.n_concepts)]
