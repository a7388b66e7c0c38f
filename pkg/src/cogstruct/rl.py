"""Reward-driven fine-tuning of the denoiser with SOLO-level rewards."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import InteractionDataset, InteractionEvent, QMatrix
from .denoiser import (
    AdamWHyper,
    Denoiser,
    OptimizerState,
    adamw_step,
    encode_histories,
    log_prob_arrays,
)
from .diffusion import DiffusionConfig, Trajectory, make_schedule, sample_batch
from .pretrain import DivergenceError
from .structures import CONSTRUCTED, DiscreteStructure

logger = logging.getLogger(__name__)

SOLO_DEFAULT = (0.0, 2.0, 12.0, 32.0, 36.0)
EMPTY_EDGE_RULES = ("node", "one", "zero")


@dataclass
class RewardConfig:
    values: tuple = SOLO_DEFAULT
    mode: str = "solo"
    empty_edge: str = "node"  # m_e for single-concept questions: copy m_v, 1.0 or 0.0

    def validate(self):
        v = tuple(float(x) for x in self.values)
        if len(v) != 5 or any(a >= b for a, b in zip(v, v[1:])):
            raise ValueError("reward values must be five strictly increasing numbers")
        if self.mode not in ("solo", "generic"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.empty_edge not in EMPTY_EDGE_RULES:
            raise ValueError(f"empty_edge must be one of {EMPTY_EDGE_RULES}")


@dataclass
class RLConfig:
    n_trajectories: int = 64
    n_timesteps: int = 8
    n_updates: int = 100
    lr: float = 1e-4
    seed: int = 0
    std_floor: float = 1e-8
    optimizer: str = "adam"  # "adam" or "sgd"

    def validate(self, T: int | None = None):
        if self.n_trajectories < 2:
            raise ValueError("n_trajectories must be >= 2")
        if self.n_timesteps < 1 or (T is not None and self.n_timesteps > T):
            raise ValueError(f"n_timesteps must lie in [1, {T}]")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class MatchScores:
    m_v: float
    m_e: float
    edge_set_empty: bool = False

    def __post_init__(self):
        if not (0.0 <= self.m_v <= 1.0 and 0.0 <= self.m_e <= 1.0):
            raise ValueError(f"match scores out of range: {self.m_v}, {self.m_e}")


def _tested(question: int, qm: QMatrix) -> np.ndarray:
    tested = qm.tested_concepts(question)
    if len(tested) == 0:
        raise ValueError(f"question {question} tests no concept")
    return np.asarray(tested)


def match_nodes(g0: DiscreteStructure, question: int, response: int, qm: QMatrix) -> float:
    """Fraction of tested concepts whose construction state agrees with the response."""
    tested = _tested(question, qm)
    built = g0.node_states[tested] == CONSTRUCTED
    return float(np.mean(built == bool(response)))


def match_edges(g0: DiscreteStructure, question: int, qm: QMatrix, response: int) -> tuple[float, bool]:
    """Agreement over all pairs of tested concepts; ``(0.0, True)`` when there is no pair."""
    tested = _tested(question, qm)
    pairs = list(combinations(tested.tolist(), 2))
    if not pairs:
        return 0.0, True
    a, b = np.array(pairs).T
    built = g0.edge_states[a, b] == CONSTRUCTED
    return float(np.mean(built == bool(response))), False


def match_scores(g0: DiscreteStructure, event: InteractionEvent, qm: QMatrix, empty_edge: str = "node") -> MatchScores:
    m_v = match_nodes(g0, event.question_id, event.response, qm)
    m_e, empty = match_edges(g0, event.question_id, qm, event.response)
    if empty:
        m_e = {"node": m_v, "one": 1.0, "zero": 0.0}[empty_edge]
    return MatchScores(m_v, m_e, empty)


def solo_level(scores: MatchScores) -> int:
    """SOLO level 1-5, first matching case wins."""
    mv, me = scores.m_v, scores.m_e
    if mv == 0:
        return 1
    if mv < 0.5:
        return 2
    if me < 0.5:
        return 3
    if mv < 1 and me < 1:
        return 4
    return 5


def reward_solo(scores: MatchScores, rcfg: RewardConfig | None = None) -> float:
    values = (rcfg or RewardConfig()).values
    return float(values[solo_level(scores) - 1])


def reward_generic(scores: MatchScores) -> float:
    return scores.m_v + scores.m_e


def reward(scores: MatchScores, rcfg: RewardConfig) -> float:
    return reward_solo(scores, rcfg) if rcfg.mode == "solo" else reward_generic(scores)


def log_prob_g0_given_gt(model: Denoiser, g0: DiscreteStructure, gt: DiscreteStructure, t: int, history) -> float:
    h = model.guidance(encode_histories([history], model.cfg.recency))
    with torch.no_grad():
        lp = log_prob_arrays(
            model,
            g0.node_states[None],
            g0.edges_upper()[None],
            gt.node_states[None],
            gt.edges_upper()[None],
            np.array([t]),
            h,
        )
    return float(lp[0])


def standardize(rewards, floor: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Advantages ``(r - mean) / std`` with the unbiased std; all zero (and ``False``) when std < floor."""
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("need at least two rewards")
    std = r.std(ddof=1)
    if not std >= floor:
        return np.zeros_like(r), False
    return (r - r.mean()) / std, True


@dataclass
class GradientInfo:
    advantages: np.ndarray
    applied: bool
    grad_norm: float


def eager_policy_gradient(
    model: Denoiser,
    batch: Sequence[tuple[Trajectory, float]],
    T: int | None = None,
    eps: float = 1e-8,
) -> tuple[dict[str, torch.Tensor], GradientInfo]:
    """Ascent direction for the expected standardized reward.

    Each trajectory contributes ``A_d * T / |T_d|`` times the sum of
    ``grad log p(G_0 | G_t)`` over its stored steps; contributions are
    averaged over the batch. The trajectory's ``guidance`` is its history.
    """
    if len(batch) < 2:
        raise ValueError("batch needs at least two trajectories")
    T = model.T if T is None else T
    for traj, _ in batch:
        if not traj.stored_steps:
            raise ValueError("trajectory has no stored timesteps")
    adv, applied = standardize([r for _, r in batch], eps)
    params = dict(model.named_parameters())
    if not applied:
        zeros = {name: torch.zeros_like(p) for name, p in params.items()}
        return zeros, GradientInfo(adv, False, 0.0)

    n0, e0, nt, et, ts, hist, coef = [], [], [], [], [], [], []
    D = len(batch)
    for (traj, _), a in zip(batch, adv):
        scale = a * T / len(traj.stored_steps) / D
        for t, gt in sorted(traj.stored_steps.items()):
            n0.append(traj.final.node_states)
            e0.append(traj.final.edges_upper())
            nt.append(gt.node_states)
            et.append(gt.edges_upper())
            ts.append(t)
            hist.append(traj.guidance)
            coef.append(scale)
    enc = encode_histories(hist, model.cfg.recency)
    h = model.guidance(enc)
    lp = log_prob_arrays(model, np.stack(n0), np.stack(e0), np.stack(nt), np.stack(et), np.array(ts), h)
    objective = (torch.as_tensor(coef, dtype=lp.dtype) * lp).sum()
    grads = torch.autograd.grad(objective, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), gr in zip(params.items(), grads):
        gr = torch.zeros_like(p) if gr is None else gr
        if not torch.isfinite(gr).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = gr
    norm = float(torch.sqrt(sum((g ** 2).sum() for g in out.values())))
    return out, GradientInfo(adv, True, norm)


@dataclass
class RewardLog:
    rows: list = field(default_factory=list)  # (update, mean, std, frac_r5, grad_norm)

    HEADER = ("update", "mean_reward", "std_reward", "frac_r5", "grad_norm")

    def mean_rewards(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for row in self.rows:
                w.writerow([row[0]] + [format(v, ".10g") for v in row[1:]])


@dataclass(frozen=True)
class Context:
    """Prediction context: the first ``prefix_len`` events of a student and the event that follows."""

    student_id: str
    prefix_len: int
    history: tuple
    target: InteractionEvent


def contexts(ds: InteractionDataset) -> list[Context]:
    out = []
    for sid, events in ds.students.items():
        for k in range(1, len(events)):
            out.append(Context(sid, k, tuple(events[:k]), events[k]))
    return out


# reward_fn(g0, context) -> (reward, level or None)
RewardFn = Callable[[DiscreteStructure, Context], tuple]


def _default_reward_fn(qm: QMatrix, rcfg: RewardConfig) -> RewardFn:
    def fn(g0, ctx):
        s = match_scores(g0, ctx.target, qm, rcfg.empty_edge)
        return reward(s, rcfg), solo_level(s)

    return fn


def sample_contexts(model: Denoiser, ctxs: Sequence[Context], dcfg: DiffusionConfig, seeds, store_steps=None):
    sched = make_schedule(dcfg)
    return sample_batch(model.sampler(), [list(c.history) for c in ctxs], model.n_concepts, sched, seeds, store_steps, dcfg.c)


def finetune(
    model: Denoiser,
    ds: InteractionDataset,
    dcfg: DiffusionConfig,
    rlcfg: RLConfig,
    rcfg: RewardConfig | None = None,
    reward_fn: RewardFn | None = None,
):
    """Policy-gradient fine-tuning on next-response agreement; returns the model and a reward log.

    ``reward_fn`` replaces the SOLO/generic scoring when given; it must return
    ``(reward, solo level or None)``.
    """
    rcfg = rcfg or RewardConfig()
    rcfg.validate()
    rlcfg.validate(dcfg.T)
    if reward_fn is None:
        if ds.qmatrix is None:
            raise ValueError("dataset needs a Q-matrix for match scoring")
        reward_fn = _default_reward_fn(ds.qmatrix, rcfg)
    pool = contexts(ds)
    if not pool:
        raise ValueError("no student has a next interaction to score against")

    rng = np.random.default_rng(rlcfg.seed)
    opt = OptimizerState(model, AdamWHyper(lr=rlcfg.lr)) if rlcfg.optimizer == "adam" else None
    log = RewardLog()
    r5 = max(rcfg.values)
    for update in range(rlcfg.n_updates):
        pick = rng.integers(0, len(pool), size=rlcfg.n_trajectories)
        ctxs = [pool[i] for i in pick]
        seeds = rng.integers(0, 2**63 - 1, size=len(ctxs)).tolist()
        steps = [(rng.choice(dcfg.T, size=rlcfg.n_timesteps, replace=False) + 1).tolist() for _ in ctxs]
        good = copy.deepcopy(model.state_dict())
        try:
            trajs = sample_contexts(model, ctxs, dcfg, seeds, steps)
            scored = [reward_fn(tr.final, ctx) for tr, ctx in zip(trajs, ctxs)]
            rewards = np.array([s[0] for s in scored], dtype=np.float64)
            grads, info = eager_policy_gradient(model, list(zip(trajs, rewards)), dcfg.T, rlcfg.std_floor)
            if info.applied and rlcfg.lr > 0:
                if opt is not None:
                    adamw_step(model, grads, opt, sign=-1.0)
                else:
                    with torch.no_grad():
                        for name, p in model.named_parameters():
                            p.add_(grads[name], alpha=rlcfg.lr)
            bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
            if bad:
                raise FloatingPointError(f"non-finite parameters after update: {bad[0]}")
        except FloatingPointError as exc:
            model.load_state_dict(good)
            raise DivergenceError(str(exc), model, update) from exc
        levels = [s[1] for s in scored]
        frac5 = float(np.mean([lv == 5 for lv in levels])) if levels[0] is not None else float(np.mean(rewards >= r5))
        log.rows.append((update, float(rewards.mean()), float(rewards.std()), frac5, info.grad_norm))
        logger.debug("update %d mean reward %.4f", update, rewards.mean())
    return model, log


def evaluate_reward(
    model: Denoiser,
    ctxs: Sequence[Context],
    dcfg: DiffusionConfig,
    reward_fn: RewardFn,
    seed: int = 0,
) -> float:
    """Mean reward of one fresh sample per context."""
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=len(ctxs)).tolist()
    trajs = sample_contexts(model, ctxs, dcfg, seeds)
    return float(np.mean([reward_fn(tr.final, c)[0] for tr, c in zip(trajs, ctxs)]))
