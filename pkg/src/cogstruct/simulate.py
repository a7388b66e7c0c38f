"""Rule-based cognitive structures computed from interaction histories.

Node evidence for concept ``l`` is the weight-averaged correctness over the
answered questions that test ``l``; relation evidence for ``(a, b)`` averages
correctness over questions testing both, weighted by ``w_a + w_b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import InteractionDataset, InteractionEvent, QMatrix
from .structures import CognitiveStructure, DiscreteStructure, upper_indices

UNTESTED_MARGINAL = 0.5


def _arrays(history: Sequence[InteractionEvent]):
    q = np.fromiter((e.question_id for e in history), dtype=np.int64, count=len(history))
    r = np.fromiter((e.response for e in history), dtype=np.float64, count=len(history))
    return q, r


def uoc(concept: int, history: Sequence[InteractionEvent], qm: QMatrix) -> float | None:
    """Construction evidence for one concept; ``None`` if no answered question tests it."""
    q, r = _arrays(history)
    w = qm.weights[q, concept]
    den = w.sum()
    if den <= 0:
        return None
    return float((w * r).sum() / den)


def uor(a: int, b: int, history: Sequence[InteractionEvent], qm: QMatrix) -> float | None:
    """Construction evidence for the relation ``a - b``; ``None`` if never co-tested."""
    if a == b:
        raise ValueError("self-relations are excluded (a == b)")
    q, r = _arrays(history)
    wa, wb = qm.weights[q, a], qm.weights[q, b]
    w = np.where((wa > 0) & (wb > 0), wa + wb, 0.0)
    den = w.sum()
    if den <= 0:
        return None
    return float((w * r).sum() / den)


def simulate_structure(history: Sequence[InteractionEvent], qm: QMatrix) -> CognitiveStructure:
    if len(history) == 0:
        raise ValueError("history prefix must be non-empty")
    q, r = _arrays(history)
    W = qm.weights[q]  # (n, L)
    L = W.shape[1]

    node_den = W.sum(axis=0)
    node_num = W.T @ r
    node_tested = node_den > 0
    nodes = np.full(L, UNTESTED_MARGINAL)
    nodes[node_tested] = node_num[node_tested] / node_den[node_tested]

    # sum_j 1{w_aj>0, w_bj>0} (w_aj + w_bj) [r_j]
    M = (W > 0).astype(np.float64)
    A = W * M
    Ar = A * r[:, None]
    Mr = M * r[:, None]
    edge_num = Ar.T @ M + Mr.T @ A
    edge_den = A.T @ M + M.T @ A
    co = M.T @ M > 0
    np.fill_diagonal(co, False)
    edges = np.full((L, L), UNTESTED_MARGINAL)
    edges[co] = edge_num[co] / edge_den[co]
    np.fill_diagonal(edges, 0.0)
    return CognitiveStructure(nodes, edges, node_tested, co)


def discretize(
    cs: CognitiveStructure, threshold: float = 0.5, mode: str = "deterministic", rng=None
) -> DiscreteStructure:
    """Map marginals to hard states; untested entries become unconstructed."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    L = cs.n_concepts
    iu, ju = upper_indices(L)
    node_p = cs.node_marginals
    edge_p = cs.edge_marginals[iu, ju]
    if mode == "deterministic":
        nodes = node_p >= threshold
        edges = edge_p >= threshold
    elif mode == "bernoulli":
        rng = np.random.default_rng(rng)
        nodes = rng.random(L) < node_p
        edges = rng.random(len(iu)) < edge_p
    else:
        raise ValueError(f"unknown discretization mode {mode!r}")
    nodes = nodes & cs.node_tested
    edges = edges & cs.edge_tested[iu, ju]
    return DiscreteStructure.from_upper(nodes.astype(np.int64), edges.astype(np.int64))


@dataclass
class CorpusRecord:
    student_id: str
    prefix_len: int
    structure: DiscreteStructure
    history: list[InteractionEvent]


class SimulatedCorpus(list):
    """List of :class:`CorpusRecord`; the pretraining set."""

    def structures(self) -> list[DiscreteStructure]:
        return [rec.structure for rec in self]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self:
                fh.write(
                    json.dumps(
                        {
                            "student_id": rec.student_id,
                            "prefix_len": rec.prefix_len,
                            "nodes": rec.structure.node_states.tolist(),
                            "edges_upper": rec.structure.edges_upper().tolist(),
                        }
                    )
                    + "\n"
                )

    @classmethod
    def from_jsonl(cls, path, ds: InteractionDataset | None = None) -> "SimulatedCorpus":
        """Load records; histories are re-attached from ``ds`` when given."""
        out = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            hist = []
            if ds is not None:
                hist = ds.students[d["student_id"]][: d["prefix_len"]]
            g = DiscreteStructure.from_upper(d["nodes"], d["edges_upper"])
            out.append(CorpusRecord(d["student_id"], int(d["prefix_len"]), g, hist))
        return out


def prefix_lengths(n_events: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    lengths = list(range(stride, n_events + 1, stride))
    if not lengths or lengths[-1] != n_events:
        lengths.append(n_events)
    return lengths


def build_pretrain_corpus(
    ds: InteractionDataset,
    qm: QMatrix | None = None,
    stride: int = 5,
    threshold: float = 0.5,
    mode: str = "deterministic",
    seed: int | None = None,
) -> SimulatedCorpus:
    qm = qm if qm is not None else ds.qmatrix
    if qm is None:
        raise ValueError("a Q-matrix is required")
    rng = np.random.default_rng(seed)
    corpus = SimulatedCorpus()
    for sid, events in ds.students.items():
        for k in prefix_lengths(len(events), stride):
            hist = events[:k]
            g = discretize(simulate_structure(hist, qm), threshold, mode, rng)
            corpus.append(CorpusRecord(sid, k, g, hist))
    return corpus
