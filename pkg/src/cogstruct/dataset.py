"""Interaction logs, Q-matrices, splitting and the planted-structure generator."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .structures import DiscreteStructure, symmetrize_upper, upper_indices

logger = logging.getLogger(__name__)

INTERACTION_HEADER = ["student_id", "question_id", "response", "position"]
QMATRIX_HEADER = ["question_id", "concept_id", "weight"]


class DatasetError(ValueError):
    """Raised for malformed interaction or Q-matrix files; carries every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class InteractionEvent:
    student_id: str
    question_id: int
    response: int
    position: int


@dataclass
class QMatrix:
    """Dense ``M x L`` question-concept weights, rows normalized to sum 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise DatasetError("Q-matrix must be two-dimensional")
        if np.any(w < 0):
            raise DatasetError("Q-matrix weights must be nonnegative")
        empty = np.flatnonzero(w.sum(axis=1) <= 0)
        if empty.size:
            raise DatasetError([f"question {j} has no concepts" for j in empty])
        self.weights = w / w.sum(axis=1, keepdims=True)

    @property
    def n_questions(self) -> int:
        return self.weights.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.weights.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean tested-concept matrix (``weight > 0``)."""
        return self.weights > 0

    def tested_concepts(self, question: int) -> np.ndarray:
        return np.flatnonzero(self.weights[question] > 0)

    @classmethod
    def from_tags(cls, tags, n_concepts: int) -> "QMatrix":
        """Uniform split over the tagged concepts of each question."""
        w = np.zeros((len(tags), n_concepts))
        for j, concepts in enumerate(tags):
            for l in concepts:
                w[j, l] = 1.0
        return cls(w)


@dataclass
class InteractionDataset:
    """Per-student, position-ordered interaction sequences."""

    students: dict[str, list[InteractionEvent]]
    qmatrix: QMatrix | None = None
    n_questions_hint: int = 0

    def __post_init__(self):
        problems = []
        for sid, events in self.students.items():
            if not events:
                problems.append(f"student {sid!r} has no interactions")
            events.sort(key=lambda e: e.position)
        if self.qmatrix is not None:
            M = self.qmatrix.n_questions
            bad = {e.question_id for ev in self.students.values() for e in ev if e.question_id >= M}
            if bad:
                problems.append(f"question ids {sorted(bad)} exceed Q-matrix size {M}")
        if problems:
            raise DatasetError(problems)

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def n_questions(self) -> int:
        if self.qmatrix is not None:
            return self.qmatrix.n_questions
        top = max((e.question_id for e in self.events()), default=-1)
        return max(top + 1, self.n_questions_hint)

    @property
    def n_concepts(self) -> int:
        return self.qmatrix.n_concepts if self.qmatrix is not None else 0

    def events(self):
        for events in self.students.values():
            yield from events

    def __len__(self) -> int:
        return sum(len(e) for e in self.students.values())

    def history(self, student_id: str, before: int | None = None) -> list[InteractionEvent]:
        """Events of ``student_id`` with position strictly below ``before`` (all if None)."""
        events = self.students.get(student_id, [])
        if before is None:
            return list(events)
        return [e for e in events if e.position < before]

    def with_qmatrix(self, qm: QMatrix) -> "InteractionDataset":
        return InteractionDataset(
            {k: list(v) for k, v in self.students.items()}, qm, self.n_questions_hint
        )

    def subset(self, keep) -> "InteractionDataset":
        """Dataset restricted to events for which ``keep(event)`` is true; empty students dropped."""
        students = {}
        for sid, events in self.students.items():
            kept = [e for e in events if keep(e)]
            if kept:
                students[sid] = kept
        return InteractionDataset(students, self.qmatrix, self.n_questions)

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        if self.students != other.students:
            return False
        if (self.qmatrix is None) != (other.qmatrix is None):
            return False
        return self.qmatrix is None or np.array_equal(self.qmatrix.weights, other.qmatrix.weights)


def _parse_int(value: str, what: str, lineno: int, problems: list) -> int | None:
    try:
        return int(value)
    except (TypeError, ValueError):
        problems.append(f"line {lineno}: {what} {value!r} is not an integer")
        return None


def load_interactions(path, qmatrix: QMatrix | None = None) -> InteractionDataset:
    """Read ``student_id,question_id,response,position`` rows."""
    problems = []
    students: dict[str, list[InteractionEvent]] = {}
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError("no interactions")
        if [h.strip() for h in header] != INTERACTION_HEADER:
            raise DatasetError(f"line 1: expected header {','.join(INTERACTION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                problems.append(f"line {lineno}: expected 4 fields, got {len(row)}")
                continue
            sid = row[0].strip()
            q = _parse_int(row[1], "question_id", lineno, problems)
            r = _parse_int(row[2], "response", lineno, problems)
            p = _parse_int(row[3], "position", lineno, problems)
            if None in (q, r, p):
                continue
            if r not in (0, 1):
                problems.append(f"line {lineno}: response {r} not in {{0,1}}")
                continue
            if q < 0 or p < 0:
                problems.append(f"line {lineno}: negative question_id or position")
                continue
            if (sid, p) in seen:
                problems.append(f"line {lineno}: duplicate position {p} for student {sid!r}")
                continue
            seen.add((sid, p))
            students.setdefault(sid, []).append(InteractionEvent(sid, q, r, p))
    if not problems and not students:
        raise DatasetError("no interactions")
    for sid, events in students.items():
        positions = sorted(e.position for e in events)
        if positions != list(range(len(positions))):
            problems.append(f"student {sid!r}: positions must run 0..{len(positions) - 1} without gaps")
    if problems:
        raise DatasetError(problems)
    return InteractionDataset(students, qmatrix)


def write_interactions(ds: InteractionDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTION_HEADER)
        for e in ds.events():
            w.writerow([e.student_id, e.question_id, e.response, e.position])


def load_qmatrix(path, n_concepts: int | None = None, n_questions: int | None = None) -> QMatrix:
    """Read ``question_id,concept_id,weight`` rows into a dense normalized matrix."""
    problems = []
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != QMATRIX_HEADER:
            raise DatasetError(f"line 1: expected header {','.join(QMATRIX_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                problems.append(f"line {lineno}: expected 3 fields, got {len(row)}")
                continue
            q = _parse_int(row[0], "question_id", lineno, problems)
            l = _parse_int(row[1], "concept_id", lineno, problems)
            try:
                wt = float(row[2])
            except ValueError:
                problems.append(f"line {lineno}: weight {row[2]!r} is not a number")
                continue
            if q is None or l is None:
                continue
            if q < 0 or l < 0:
                problems.append(f"line {lineno}: negative id")
            elif wt < 0 or not math.isfinite(wt):
                problems.append(f"line {lineno}: negative weight {wt}")
            elif n_concepts is not None and l >= n_concepts:
                problems.append(f"line {lineno}: concept_id {l} >= L={n_concepts}")
            else:
                entries.append((q, l, wt))
    if problems:
        raise DatasetError(problems)
    if not entries:
        raise DatasetError("no Q-matrix entries")
    M = max(q for q, _, _ in entries) + 1
    if n_questions is not None:
        M = max(M, n_questions)
    L = n_concepts if n_concepts is not None else max(l for _, l, _ in entries) + 1
    w = np.zeros((M, L))
    for q, l, wt in entries:
        w[q, l] += wt
    empty = [f"question {j} has no concepts" for j in np.flatnonzero(w.sum(axis=1) <= 0)]
    if empty:
        raise DatasetError(empty)
    return QMatrix(w)


def write_qmatrix(qm: QMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QMATRIX_HEADER)
        for j, l in zip(*np.nonzero(qm.weights)):
            w.writerow([int(j), int(l), repr(float(qm.weights[j, l]))])


def split_dataset(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Event-level train/val/test split.

    Events keep their original positions, so a split's history for any
    position can be recovered with :meth:`InteractionDataset.history`.
    Students with fewer than three events stay entirely in train.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ValueError(f"ratios must be three nonnegative reals summing to 1, got {ratios.tolist()}")
    rng = np.random.default_rng(seed)
    eligible, short = [], []
    for sid, events in ds.students.items():
        (eligible if len(events) >= 3 else short).extend(events)
    if short:
        logger.warning(
            "%d students have fewer than 3 events; their events stay in train",
            len({e.student_id for e in short}),
        )
    order = rng.permutation(len(eligible))
    n = len(eligible)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    assign = {}
    for rank, idx in enumerate(order):
        assign[eligible[idx]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    for e in short:
        assign[e] = 0
    return tuple(ds.subset(lambda e, k=k: assign[e] == k) for k in range(3))


@dataclass
class SynthConfig:
    n_students: int = 200
    n_questions: int = 30
    n_concepts: int = 6
    seq_len: int = 40
    noise: float = 0.1
    max_concepts_per_question: int = 3
    growth: str = "staged"  # staged | complete | empty
    # staged growth, in units of seq_len / speed
    speed_range: tuple = (0.25, 4.0)
    onset_range: tuple = (-0.5, 1.5)
    max_lag: float = 0.3

    def validate(self):
        for name in ("n_students", "n_questions", "n_concepts", "seq_len", "max_concepts_per_question"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")
        if self.growth not in ("staged", "complete", "empty"):
            raise ValueError(f"unknown growth {self.growth!r}")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError("speed_range must satisfy 0 < low <= high")
        if self.onset_range[0] > self.onset_range[1] or self.max_lag < 0:
            raise ValueError("onset_range must be ordered and max_lag >= 0")


@dataclass
class PlantedStructures:
    """Ground-truth construction times; an element is constructed at position ``p`` iff its time ``<= p``."""

    student_ids: list[str]
    node_times: np.ndarray  # (N, L), inf = never
    edge_times: np.ndarray  # (N, L, L), symmetric, diagonal inf
    noise: float = 0.0
    seq_len: int = 0

    @property
    def n_concepts(self) -> int:
        return self.node_times.shape[1]

    def index(self, student_id: str) -> int:
        return self.student_ids.index(student_id)

    def structure_at(self, i: int, position: int) -> DiscreteStructure:
        nodes = (self.node_times[i] <= position).astype(np.int64)
        edges = (self.edge_times[i] <= position).astype(np.int64)
        np.fill_diagonal(edges, 0)
        return DiscreteStructure(nodes, edges)

    def final(self, i: int) -> DiscreteStructure:
        return self.structure_at(i, self.seq_len - 1)

    @property
    def structures(self) -> list[DiscreteStructure]:
        return [self.final(i) for i in range(len(self.student_ids))]


def mastery_level(g: DiscreteStructure, tested: np.ndarray) -> float:
    """``1`` when every tested concept and relation is constructed, else the constructed fraction."""
    tested = np.asarray(tested)
    built = int(g.node_states[tested].astype(bool).sum())
    total = len(tested)
    if len(tested) > 1:
        a, b = np.triu_indices(len(tested), k=1)
        pairs = g.edge_states[tested[a], tested[b]].astype(bool)
        built += int(pairs.sum())
        total += len(pairs)
    return 1.0 if built == total else built / total


def response_probability(level: float, noise: float) -> float:
    return (1.0 - noise) * level + noise * (1.0 - level)


def planted_probability(planted: PlantedStructures, qm: QMatrix, student_id: str, event) -> float:
    """Generator's true ``P(correct)`` for ``event``; the oracle upper bound for any predictor."""
    g = planted.structure_at(planted.index(student_id), event.position)
    return response_probability(mastery_level(g, qm.tested_concepts(event.question_id)), planted.noise)


def _synth_qmatrix(cfg: SynthConfig, rng) -> QMatrix:
    L = cfg.n_concepts
    tags = []
    for j in range(cfg.n_questions):
        k = int(rng.integers(1, min(cfg.max_concepts_per_question, L) + 1))
        concepts = set(rng.choice(L, size=k, replace=False).tolist())
        if j < L:
            concepts.add(j)  # every concept tested somewhere
        tags.append(sorted(concepts))
    return QMatrix.from_tags(tags, L)


def _synth_times(cfg: SynthConfig, rng):
    N, L, S = cfg.n_students, cfg.n_concepts, cfg.seq_len
    if cfg.growth == "complete":
        node = np.full((N, L), -np.inf)
        edge = np.full((N, L, L), -np.inf)
    elif cfg.growth == "empty":
        node = np.full((N, L), np.inf)
        edge = np.full((N, L, L), np.inf)
    else:
        speed = rng.uniform(*cfg.speed_range, size=(N, 1))
        node = rng.uniform(*cfg.onset_range, size=(N, L)) * S / speed
        iu, ju = upper_indices(L)
        lag = rng.uniform(0.0, cfg.max_lag, size=(N, len(iu))) * S / speed
        edge_upper = np.maximum(node[:, iu], node[:, ju]) + lag
        edge = symmetrize_upper(edge_upper, L, diag=np.inf)
    idx = np.arange(L)
    edge[:, idx, idx] = np.inf
    return node, edge


def synth_generate(cfg: SynthConfig, seed: int = 0):
    """Sample a Q-matrix, staged planted structures and noisy responses.

    Response rule: ``P(correct) = (1 - noise) * g + noise * (1 - g)`` with
    ``g`` the mastery level of the tested concepts and relations at the
    current position.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    qm = _synth_qmatrix(cfg, rng)
    node_t, edge_t = _synth_times(cfg, rng)
    width = len(str(cfg.n_students - 1))
    ids = [f"s{i:0{width}d}" for i in range(cfg.n_students)]
    planted = PlantedStructures(ids, node_t, edge_t, cfg.noise, cfg.seq_len)
    students = {}
    for i, sid in enumerate(ids):
        questions = rng.integers(0, cfg.n_questions, size=cfg.seq_len)
        draws = rng.random(cfg.seq_len)
        events = []
        for p in range(cfg.seq_len):
            g = planted.structure_at(i, p)
            level = mastery_level(g, qm.tested_concepts(int(questions[p])))
            r = int(draws[p] < response_probability(level, cfg.noise))
            events.append(InteractionEvent(sid, int(questions[p]), r, p))
        students[sid] = events
    return InteractionDataset(students, qm), planted


def write_planted(planted: PlantedStructures, path) -> None:
    records = []
    for i, sid in enumerate(planted.student_ids):
        g = planted.final(i)
        records.append(
            {
                "student_id": sid,
                "nodes": g.node_states.tolist(),
                "adjacency": g.edge_states.tolist(),
                "node_times": [_time_json(x) for x in planted.node_times[i]],
                "edge_times": [[_time_json(x) for x in row] for row in planted.edge_times[i]],
                "noise": planted.noise,
                "seq_len": planted.seq_len,
            }
        )
    Path(path).write_text(json.dumps(records, indent=1))


def _time_json(x):
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)


def _time_load(x):
    return float(x)


def load_planted(path) -> PlantedStructures:
    records = json.loads(Path(path).read_text())
    if not records:
        raise DatasetError("planted file is empty")
    ids = [r["student_id"] for r in records]
    node = np.array([[_time_load(x) for x in r["node_times"]] for r in records])
    edge = np.array([[[_time_load(x) for x in row] for row in r["edge_times"]] for r in records])
    return PlantedStructures(ids, node, edge, float(records[0]["noise"]), int(records[0]["seq_len"]))
