"""Pretraining the denoiser on simulated structures (maximum likelihood of ``G_0`` given ``G_t``)."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import (
    AdamWHyper,
    Denoiser,
    DenoiserConfig,
    EncodedHistories,
    OptimizerState,
    encode_histories,
    loss_arrays,
    save_checkpoint,
)
from .diffusion import DiffusionConfig, forward_sample_arrays, make_schedule
from .simulate import SimulatedCorpus

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``model`` holds the last good parameters."""

    def __init__(self, message: str, model=None, step: int = 0):
        super().__init__(message)
        self.model = model
        self.step = step


@dataclass
class PretrainConfig:
    batch_size: int = 64
    max_steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.0
    lambda_ve: float | None = None
    eval_every: int = 100
    seed: int = 0
    patience: int | None = None
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    out_dir: str | None = None

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (step, loss, node_loss, edge_loss, grad_norm)
    val: list = field(default_factory=list)  # (step, val_loss)
    best_step: int = 0

    HEADER = ("step", "loss", "node_loss", "edge_loss", "grad_norm")

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for row in self.rows:
                w.writerow([row[0]] + [format(v, ".10g") for v in row[1:]])


class _CorpusArrays:
    """Corpus stacked into arrays with pre-encoded guidance histories."""

    def __init__(self, corpus: SimulatedCorpus, recency: float):
        structs = corpus.structures()
        self.nodes = np.stack([g.node_states for g in structs])
        self.edges = np.stack([g.edges_upper() for g in structs])
        enc = encode_histories([rec.history for rec in corpus], recency)
        self.hq, self.hr, self.hw = enc.questions, enc.responses, enc.weights

    def __len__(self):
        return len(self.nodes)


def _infer_questions(corpus: SimulatedCorpus) -> int:
    top = max((e.question_id for rec in corpus for e in rec.history), default=0)
    return top + 1


def _batch_loss(model, data: _CorpusArrays, idx, t, nt, et, lam):
    enc = EncodedHistories(data.hq[idx], data.hr[idx], data.hw[idx])
    h = model.guidance(enc)
    return loss_arrays(
        model,
        torch.from_numpy(data.nodes[idx]),
        torch.from_numpy(data.edges[idx]),
        torch.from_numpy(nt),
        torch.from_numpy(et),
        torch.from_numpy(t),
        h,
        lam,
    )


def validation_split(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted ``(val_idx, train_idx)`` from a seeded permutation of ``range(n)``."""
    perm = rng.permutation(n)
    n_val = int(fraction * n)
    return np.sort(perm[:n_val]), np.sort(perm[n_val:])


def pretrain(
    corpus: SimulatedCorpus,
    dcfg: DiffusionConfig,
    ncfg: DenoiserConfig,
    pcfg: PretrainConfig,
    n_questions: int | None = None,
    model: Denoiser | None = None,
):
    """Fit ``model`` (fresh if None) on ``corpus``; returns best-validation parameters and the log.

    Each step draws a batch with replacement, an independent ``t ~ U[1, T]``
    per item, corrupts with the forward kernel and takes one AdamW step on the
    cross-entropy to the clean structure.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    pcfg.validate()
    dcfg.validate()
    sched = make_schedule(dcfg)
    L = corpus[0].structure.n_concepts
    if model is None:
        M = n_questions if n_questions is not None else _infer_questions(corpus)
        model = Denoiser(ncfg, L, M, dcfg.c, dcfg.T, seed=pcfg.seed)
    lam = pcfg.lambda_ve if pcfg.lambda_ve is not None else model.cfg.lambda_ve
    log = TrainingLog()
    if pcfg.max_steps == 0:
        return model, log

    rng = np.random.default_rng(pcfg.seed)
    data = _CorpusArrays(corpus, model.cfg.recency)
    val_idx, train_idx = validation_split(len(data), pcfg.val_fraction, rng)
    n_val = len(val_idx)

    if n_val:
        vrng = np.random.default_rng([pcfg.seed, 1])
        val_t = vrng.integers(1, dcfg.T + 1, size=n_val)
        val_nt, val_et = forward_sample_arrays(data.nodes[val_idx], data.edges[val_idx], val_t, sched, vrng, dcfg.c)

    opt = OptimizerState(model, AdamWHyper(lr=pcfg.lr, weight_decay=pcfg.weight_decay))
    out_dir = Path(pcfg.out_dir) if pcfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    best_val = np.inf
    best_state = copy.deepcopy(model.state_dict())
    last_good = best_state
    evals_since_best = 0

    for step in range(1, pcfg.max_steps + 1):
        idx = train_idx[rng.integers(0, len(train_idx), size=pcfg.batch_size)]
        t = rng.integers(1, dcfg.T + 1, size=pcfg.batch_size)
        nt, et = forward_sample_arrays(data.nodes[idx], data.edges[idx], t, sched, rng, dcfg.c)
        total, node_l, edge_l = _batch_loss(model, data, idx, t, nt, et, lam)
        if not torch.isfinite(total):
            model.load_state_dict(last_good)
            if out_dir:
                save_checkpoint(model, out_dir / "ckpt_last_good.json")
            raise DivergenceError(f"non-finite loss at step {step}", model, step)
        opt.optimizer.zero_grad(set_to_none=True)
        total.backward()
        gnorm = float(torch.sqrt(sum((p.grad ** 2).sum() for p in model.parameters() if p.grad is not None)))
        opt.optimizer.step()
        log.rows.append((step, float(total.detach()), float(node_l.detach()), float(edge_l.detach()), gnorm))
        if step % max(pcfg.eval_every, 1) == 0:
            last_good = copy.deepcopy(model.state_dict())
        if n_val and (step % pcfg.eval_every == 0 or step == pcfg.max_steps):
            with torch.no_grad():
                vloss = float(_batch_loss(model, data, val_idx, val_t, val_nt, val_et, lam)[0])
            log.val.append((step, vloss))
            if vloss < best_val:
                best_val, log.best_step = vloss, step
                best_state = copy.deepcopy(model.state_dict())
                evals_since_best = 0
            else:
                evals_since_best += 1
                if pcfg.patience is not None and evals_since_best >= pcfg.patience:
                    logger.info("early stop at step %d (best %d)", step, log.best_step)
                    break
        if out_dir and pcfg.checkpoint_every and step % pcfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"ckpt_{step}.json", opt)

    if n_val:
        model.load_state_dict(best_state)
    else:
        log.best_step = log.rows[-1][0]
    return model, log
