"""Prediction heads on top of generated cognitive structures: knowledge tracing and cognitive diagnosis."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import roc_auc_score
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import check_structure_matrix, n_concepts_from_width
from .dataset import InteractionDataset
from .structures import CognitiveStructure, n_pairs, symmetrize_upper

logger = logging.getLogger(__name__)

DTYPE = torch.float64


# -- metrics -----------------------------------------------------------------


def metric_auc(preds, labels) -> float:
    """Area under the ROC curve; ties count one half."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("AUC needs both classes in labels")
    return float(roc_auc_score(labels, np.asarray(preds, dtype=np.float64)))


def metric_acc(preds, labels, threshold: float = 0.5) -> float:
    preds, labels = np.asarray(preds, dtype=np.float64), np.asarray(labels)
    if preds.size == 0:
        raise ValueError("empty predictions")
    return float(np.mean((preds >= threshold) == (labels == 1)))


def metric_rmse(preds, labels) -> float:
    preds, labels = np.asarray(preds, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("empty predictions")
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


@dataclass
class EvalReport:
    auc: float
    acc: float
    rmse: float
    n: int
    config: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, preds, labels, config=None) -> "EvalReport":
        try:
            auc = metric_auc(preds, labels)
        except ValueError:
            auc = float("nan")
        return cls(auc, metric_acc(preds, labels), metric_rmse(preds, labels), int(len(labels)), dict(config or {}))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def dump(self, path) -> None:
        Path(path).write_text(self.to_json())


# -- pooling -----------------------------------------------------------------


def concept_readout(node_marginals, edges_full) -> np.ndarray:
    """Per-concept ``(node marginal, mean incident-edge marginal)`` pairs, shape ``(..., L, 2)``."""
    nodes = np.asarray(node_marginals, dtype=np.float64)
    edges = np.asarray(edges_full, dtype=np.float64)
    L = nodes.shape[-1]
    if L > 1:
        off = edges.sum(axis=-1) - np.diagonal(edges, axis1=-2, axis2=-1)
        incident = off / (L - 1)
    else:
        incident = np.zeros_like(nodes)
    return np.stack([nodes, incident], axis=-1)


def structure_row(cs: CognitiveStructure) -> np.ndarray:
    """Flatten marginals into the feature layout ``[nodes (L), upper edges (P)]``."""
    return np.concatenate([cs.node_marginals, cs.edges_upper()])


def split_features(X, n_concepts: int | None = None):
    """Split a feature matrix into ``(node marginals, full edge marginals, question ids)``."""
    X = check_structure_matrix(X)
    L = n_concepts if n_concepts is not None else n_concepts_from_width(X.shape[1] - 1)
    P = n_pairs(L)
    if X.shape[1] != L + P + 1:
        raise ValueError(f"expected {L + P + 1} columns for {L} concepts, got {X.shape[1]}")
    nodes = X[:, :L]
    edges = symmetrize_upper(X[:, L : L + P], L)
    q = X[:, -1]
    if np.any(q != np.round(q)) or np.any(q < 0):
        raise ValueError("last column must hold non-negative integer question ids")
    return nodes, edges, q.astype(np.int64)


def pool(cs: CognitiveStructure, proj: np.ndarray | None = None, bias=None, mode: str = "kt", coef=None) -> np.ndarray:
    """Pool marginals into a state vector.

    ``mode="kt"`` flattens the readout to ``2L`` and applies ``proj`` (``d x 2L``)
    plus ``bias``; ``mode="cd"`` returns ``sigmoid(a*u1 + b*u2 + c0)`` per concept
    with ``coef = (a, b, c0)``.
    """
    u = concept_readout(cs.node_marginals, cs.edge_marginals)
    if mode == "kt":
        flat = u.reshape(-1)
        if proj is None:
            return flat
        out = np.asarray(proj) @ flat
        return out if bias is None else out + np.asarray(bias)
    if mode == "cd":
        a, b, c0 = (np.broadcast_to(np.asarray(v, dtype=np.float64), (cs.n_concepts,)) for v in coef)
        return 1.0 / (1.0 + np.exp(-(a * u[:, 0] + b * u[:, 1] + c0)))
    raise ValueError(f"unknown pooling mode {mode!r}")


# -- heads -------------------------------------------------------------------


def _xavier(p: torch.Tensor, gen: torch.Generator):
    fan_out, fan_in = p.shape[0], p.shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)


class KTHead(nn.Module):
    """``sigmoid(FC(proj(u) ++ emb(q)))``; the output layer starts at zero (prediction 0.5)."""

    def __init__(self, n_concepts: int, n_questions: int, d_pool: int = 16, seed: int = 0):
        super().__init__()
        self.proj = nn.Linear(2 * n_concepts, d_pool)
        self.question_emb = nn.Embedding(n_questions, d_pool)
        self.out = nn.Linear(2 * d_pool, 1)
        self.to(DTYPE)
        gen = torch.Generator().manual_seed(int(seed))
        _xavier(self.proj.weight, gen)
        _xavier(self.question_emb.weight, gen)
        with torch.no_grad():
            self.proj.bias.zero_()
            self.out.weight.zero_()
            self.out.bias.zero_()

    def pooled(self, u: torch.Tensor) -> torch.Tensor:
        return self.proj(u.reshape(u.shape[0], -1))

    def forward(self, u: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        z = torch.cat([self.pooled(u), self.question_emb(q)], dim=1)
        return torch.sigmoid(self.out(z).squeeze(-1))


class CDHead(nn.Module):
    """Monotone diagnosis head: ``sigmoid(FC+(K_q * (s - diff_q) * disc_q))``.

    ``s`` is the per-concept proficiency from :func:`pool` in ``"cd"`` mode.
    Weights of the ``FC+`` layers are clamped non-negative by :meth:`clamp`.
    """

    def __init__(self, qmask: np.ndarray, hidden: tuple = (), disc_scale: float = 10.0, seed: int = 0):
        super().__init__()
        qmask = np.asarray(qmask, dtype=np.float64)
        M, L = qmask.shape
        self.register_buffer("qmask", torch.as_tensor(qmask, dtype=DTYPE))
        self.a = nn.Parameter(torch.ones(L, dtype=DTYPE))
        self.b = nn.Parameter(torch.ones(L, dtype=DTYPE))
        self.c0 = nn.Parameter(torch.full((L,), -1.0, dtype=DTYPE))
        self.diff_emb = nn.Embedding(M, L)
        self.disc_emb = nn.Embedding(M, 1)
        self.disc_scale = disc_scale
        dims = [L, *hidden, 1]
        self.fc = nn.ModuleList(nn.Linear(i, o) for i, o in zip(dims, dims[1:]))
        self.to(DTYPE)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            self.diff_emb.weight.normal_(0.0, 0.1, generator=gen)
            self.disc_emb.weight.zero_()
            for k, layer in enumerate(self.fc):
                if k == len(self.fc) - 1:
                    layer.weight.zero_()
                else:
                    layer.weight.uniform_(0.0, 2.0 / layer.in_features, generator=gen)
                layer.bias.zero_()

    def proficiency(self, u: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.a * u[..., 0] + self.b * u[..., 1] + self.c0)

    def from_proficiency(self, s: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        diff = torch.sigmoid(self.diff_emb(q))
        disc = torch.sigmoid(self.disc_emb(q)) * self.disc_scale
        x = self.qmask[q] * (s - diff) * disc
        for k, layer in enumerate(self.fc):
            x = layer(x)
            if k < len(self.fc) - 1:
                x = torch.sigmoid(x)
        return torch.sigmoid(x.squeeze(-1))

    def forward(self, u: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        return self.from_proficiency(self.proficiency(u), q)

    def clamp(self) -> None:
        with torch.no_grad():
            for layer in self.fc:
                layer.weight.clamp_(min=0.0)


def kt_predict(pooled, question: int, head: KTHead) -> float:
    """Probability of a correct answer given an already pooled state vector."""
    with torch.no_grad():
        z = torch.cat([torch.as_tensor(pooled, dtype=DTYPE), head.question_emb.weight[question]])
        return float(torch.sigmoid(head.out(z)).squeeze())


def cd_predict(proficiency, question: int, head: CDHead) -> float:
    with torch.no_grad():
        s = torch.as_tensor(proficiency, dtype=DTYPE)[None]
        return float(head.from_proficiency(s, torch.tensor([question]))[0])


# -- estimators --------------------------------------------------------------


class _StructureHeadClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict loop. ``X`` rows are ``[node marginals, upper edge marginals, question id]``."""

    def _build(self, L: int, M: int) -> nn.Module:
        raise NotImplementedError

    def _after_step(self, head) -> None:
        pass

    def _tensors(self, X):
        nodes, edges, q = split_features(X, getattr(self, "n_concepts_", None))
        u = torch.as_tensor(concept_readout(nodes, edges), dtype=DTYPE)
        return u, torch.as_tensor(q)

    def fit(self, X, y, eval_set=None):
        X = check_structure_matrix(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.n_concepts_ = n_concepts_from_width(X.shape[1] - 1)
        self.classes_ = np.array([0, 1])
        u, q = self._tensors(X)
        M = self._n_questions(q)
        if q.numel() and int(q.max()) >= M:
            raise ValueError(f"question id {int(q.max())} >= n_questions {M}")
        head = self._build(self.n_concepts_, M)
        yt = torch.as_tensor(y, dtype=DTYPE)
        opt = torch.optim.Adam(head.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        rng = np.random.default_rng(self.seed)
        val = None
        if eval_set is not None:
            Xv, yv = eval_set
            val = (*self._tensors(check_structure_matrix(Xv)), torch.as_tensor(np.asarray(yv), dtype=DTYPE))
        best = (np.inf, {k: v.clone() for k, v in head.state_dict().items()}, 0)
        self.history_ = []
        n = len(y)
        for epoch in range(1, self.epochs + 1):
            head.train()
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = torch.as_tensor(order[start : start + self.batch_size])
                p = head(u[idx], q[idx])
                loss = nn.functional.binary_cross_entropy(p, yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                self._after_step(head)
                total += float(loss.detach()) * len(idx)
            record = {"epoch": epoch, "train_loss": total / n}
            if val is not None:
                with torch.no_grad():
                    vloss = float(nn.functional.binary_cross_entropy(head(val[0], val[1]), val[2]))
                record["val_loss"] = vloss
                if vloss < best[0]:
                    best = (vloss, {k: v.clone() for k, v in head.state_dict().items()}, epoch)
            self.history_.append(record)
        if val is not None and self.epochs > 0:
            head.load_state_dict(best[1])
            self.best_epoch_ = best[2]
        else:
            self.best_epoch_ = self.epochs
        self.head_ = head
        return self

    def _n_questions(self, q) -> int:
        if self.n_questions is not None:
            return int(self.n_questions)
        return int(q.max()) + 1 if q.numel() else 1

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        u, q = self._tensors(X)
        with torch.no_grad():
            p = self.head_(u, q).numpy()
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def evaluate(self, X, y, config=None) -> EvalReport:
        return EvalReport.from_predictions(self.predict_proba(X)[:, 1], y, config)


class StructureKTClassifier(_StructureHeadClassifier):
    def __init__(self, d_pool=16, n_questions=None, lr=0.01, epochs=30, batch_size=256, weight_decay=0.0, seed=0):
        self.d_pool = d_pool
        self.n_questions = n_questions
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def _build(self, L, M):
        return KTHead(L, M, self.d_pool, self.seed)


class StructureCDClassifier(_StructureHeadClassifier):
    """Diagnosis head; ``qmatrix`` is an ``(M, L)`` weight array (only its support is used)."""

    def __init__(self, qmatrix=None, hidden=(), disc_scale=10.0, lr=0.01, epochs=30, batch_size=256, weight_decay=0.0, seed=0):
        self.qmatrix = qmatrix
        self.hidden = hidden
        self.disc_scale = disc_scale
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    @property
    def n_questions(self):
        return None if self.qmatrix is None else np.asarray(self.qmatrix).shape[0]

    def _build(self, L, M):
        if self.qmatrix is None:
            raise ValueError("StructureCDClassifier needs a qmatrix")
        qm = np.asarray(self.qmatrix)
        if qm.shape[1] != L:
            raise ValueError(f"qmatrix has {qm.shape[1]} concepts, features have {L}")
        return CDHead(qm > 0, tuple(self.hidden), self.disc_scale, self.seed)

    def _after_step(self, head):
        head.clamp()

    def proficiency(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        u, _ = self._tensors(X)
        with torch.no_grad():
            return self.head_.proficiency(u).numpy()


# -- examples from splits ----------------------------------------------------


class MissingStructureError(KeyError):
    pass


class StructureCache:
    """Marginal structures keyed by ``(student_id, prefix_len)``; optionally mirrored to disk.

    On disk each entry is one JSON file under ``directory`` named from the
    checkpoint hash, student, prefix length and seed.
    """

    def __init__(self, directory=None, tag: str = "sim", seed: int = 0):
        self.directory = Path(directory) if directory else None
        self.tag = tag
        self.seed = seed
        self._mem: dict[tuple, CognitiveStructure] = {}
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, sid: str, k: int) -> Path:
        return self.directory / f"{self.tag}__{sid}__{k}__{self.seed}.json"

    def __contains__(self, key) -> bool:
        if key in self._mem:
            return True
        return bool(self.directory) and self._path(*key).exists()

    def __len__(self) -> int:
        return len(self._mem)

    def keys(self):
        return self._mem.keys()

    def put(self, sid: str, k: int, cs: CognitiveStructure) -> None:
        self._mem[(sid, k)] = cs
        if self.directory:
            rec = {"nodes": cs.node_marginals.tolist(), "edges_upper": cs.edges_upper().tolist()}
            self._path(sid, k).write_text(json.dumps(rec))

    def get(self, sid: str, k: int) -> CognitiveStructure:
        key = (sid, k)
        if key not in self._mem:
            if self.directory and self._path(sid, k).exists():
                rec = json.loads(self._path(sid, k).read_text())
                nodes = np.asarray(rec["nodes"])
                L = len(nodes)
                self._mem[key] = CognitiveStructure(nodes, symmetrize_upper(np.asarray(rec["edges_upper"]), L))
            else:
                raise MissingStructureError(f"no cached structure for student {sid!r} prefix {k}")
        return self._mem[key]


@dataclass(frozen=True)
class Target:
    """One prediction: condition on the first ``prefix_len`` train events, predict ``event``."""

    student_id: str
    prefix_len: int
    question_id: int
    response: int
    position: int = -1


def prediction_targets(train: InteractionDataset, split: InteractionDataset) -> list[Target]:
    """Targets in ``split`` conditioned on earlier train events; targets with no history are skipped.

    Only the train split is read for conditioning, so responses of ``split``
    serve purely as labels.
    """
    out = []
    for sid, events in split.students.items():
        hist_pos = np.array([e.position for e in train.students.get(sid, [])], dtype=np.int64)
        for ev in events:
            k = int(np.searchsorted(hist_pos, ev.position))
            if k > 0:
                out.append(Target(sid, k, ev.question_id, ev.response, ev.position))
    return out


def required_contexts(targets) -> list[tuple[str, int]]:
    return sorted({(t.student_id, t.prefix_len) for t in targets})


def build_examples(targets, cache: StructureCache) -> tuple[np.ndarray, np.ndarray]:
    if not targets:
        raise ValueError("no prediction targets")
    rows = [np.append(structure_row(cache.get(t.student_id, t.prefix_len)), t.question_id) for t in targets]
    return np.vstack(rows), np.array([t.response for t in targets], dtype=np.int64)


@dataclass
class HeadConfig:
    d_pool: int = 16
    hidden: tuple = ()
    disc_scale: float = 10.0
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 256
    weight_decay: float = 0.0
    seed: int = 0


def _train(est, splits, cache, config):
    train, val, test = splits
    Xtr, ytr = build_examples(prediction_targets(train, train), cache)
    val_targets = prediction_targets(train, val)
    eval_set = build_examples(val_targets, cache) if val_targets else None
    est.fit(Xtr, ytr, eval_set=eval_set)
    Xte, yte = build_examples(prediction_targets(train, test), cache)
    return est, est.evaluate(Xte, yte, config)


def train_kt(splits, cache: StructureCache, cfg: HeadConfig | None = None, n_questions: int | None = None):
    """Fit the KT head on the train split (best validation epoch) and report on the test split."""
    cfg = cfg or HeadConfig()
    M = n_questions if n_questions is not None else splits[0].n_questions
    est = StructureKTClassifier(cfg.d_pool, M, cfg.lr, cfg.epochs, cfg.batch_size, cfg.weight_decay, cfg.seed)
    return _train(est, splits, cache, {"task": "kt", **asdict(cfg)})


def train_cd(splits, cache: StructureCache, cfg: HeadConfig | None = None, qmatrix=None):
    cfg = cfg or HeadConfig()
    qm = qmatrix if qmatrix is not None else splits[0].qmatrix.weights
    est = StructureCDClassifier(qm, cfg.hidden, cfg.disc_scale, cfg.lr, cfg.epochs, cfg.batch_size, cfg.weight_decay, cfg.seed)
    return _train(est, splits, cache, {"task": "cd", **asdict(cfg)})
