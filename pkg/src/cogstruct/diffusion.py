"""Uniform-kernel discrete diffusion over node and edge construction states.

Step ``t`` (1-based) corrupts every node and every upper-triangle edge with
``Q_t = a_t I + (1 - a_t) 11^T / c``. Kernels of this family compose in closed
form, so ``Q_1 ... Q_t`` equals the single kernel with ``abar_t = prod a_s``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .structures import DiscreteStructure, n_pairs


@dataclass
class DiffusionConfig:
    T: int = 500
    c: int = 2
    schedule_kind: str = "cosine"

    def validate(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.c < 2:
            raise ValueError("c must be >= 2")
        if self.schedule_kind not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule_kind {self.schedule_kind!r}")


@dataclass
class NoiseSchedule:
    """``alpha[t-1]`` and ``alpha_bar[t-1]`` hold the values for step ``t``."""

    alpha: np.ndarray
    alpha_bar: np.ndarray = None

    def __post_init__(self):
        self.alpha = np.clip(np.asarray(self.alpha, dtype=np.float64), 0.0, 1.0)
        if self.alpha_bar is None:
            self.alpha_bar = np.cumprod(self.alpha)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)

    @property
    def T(self) -> int:
        return len(self.alpha)

    def alpha_at(self, t):
        return np.asarray(self.alpha[np.asarray(t) - 1])

    def alpha_bar_at(self, t):
        """``abar_t`` with ``abar_0 = 1``; vectorized over ``t``."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return np.asarray(padded[t])


COSINE_OFFSET = 0.008


def make_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    cfg.validate()
    T = cfg.T
    steps = np.arange(0, T + 1, dtype=np.float64)
    if cfg.schedule_kind == "cosine":
        s = COSINE_OFFSET
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        alpha = abar[1:] / abar[:-1]
    else:
        alpha = 1.0 - steps[1:] / T
    return NoiseSchedule(alpha)


def transition_matrix(alpha_t: float, c: int) -> np.ndarray:
    if not 0.0 <= alpha_t <= 1.0:
        raise ValueError(f"alpha_t must lie in [0, 1], got {alpha_t}")
    return alpha_t * np.eye(c) + (1.0 - alpha_t) * np.full((c, c), 1.0 / c)


def cumulative_matrix(sched: NoiseSchedule, t: int, c: int) -> np.ndarray:
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must lie in [1, {sched.T}], got {t}")
    return transition_matrix(float(sched.alpha_bar_at(t)), c)


def _kernel_rows(abar, states, c):
    """Rows ``x0`` of the uniform kernel with parameter ``abar`` (broadcast), shape ``(..., c)``."""
    abar = np.asarray(abar, dtype=np.float64)[..., None]
    onehot = np.eye(c)[states]
    return abar * onehot + (1.0 - abar) / c


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis using uniforms ``u`` (shape ``probs.shape[:-1]``)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] >= cdf[..., :-1]).sum(axis=-1)
    return idx.astype(np.int64)


def forward_sample_arrays(nodes, edges_upper, t, sched: NoiseSchedule, rng, c: int = 2):
    """Batched forward corruption ``q(G_t | G_0)``.

    ``nodes`` is ``(B, L)``, ``edges_upper`` ``(B, P)``, ``t`` ``(B,)``.
    """
    rng = np.random.default_rng(rng)
    abar = sched.alpha_bar_at(np.asarray(t))[:, None]
    node_p = _kernel_rows(abar, nodes, c)
    edge_p = _kernel_rows(abar, edges_upper, c)
    vt = sample_categorical(node_p, rng.random(nodes.shape))
    et = sample_categorical(edge_p, rng.random(edges_upper.shape))
    return vt, et


def forward_sample(g0: DiscreteStructure, t: int, sched: NoiseSchedule, rng=None, c: int = 2):
    if not 0 <= t <= sched.T:
        raise ValueError(f"t must lie in [0, {sched.T}]")
    vt, et = forward_sample_arrays(
        g0.node_states[None], g0.edges_upper()[None], np.array([t]), sched, rng, c
    )
    return DiscreteStructure.from_upper(vt[0], et[0])


def posterior_probs(x_t, t, sched: NoiseSchedule, c: int) -> np.ndarray:
    """``q(x_{t-1} | x_t, x_0)`` for every ``x_0``: shape ``(..., c_x0, c_prev)``.

    Entries are ``Q_t[x_prev, x_t] * Qbar_{t-1}[x_0, x_prev] / Qbar_t[x_0, x_t]``.
    """
    x_t = np.asarray(x_t)
    t = np.asarray(t)
    a = sched.alpha_at(t)[..., None]
    abar_prev = sched.alpha_bar_at(t - 1)[..., None, None]
    abar = sched.alpha_bar_at(t)[..., None]
    # column x_t of Q_t, indexed by x_prev
    col = a * np.eye(c)[x_t] + (1.0 - a) / c  # (..., c_prev)
    prev_rows = abar_prev * np.eye(c) + (1.0 - abar_prev) / c  # (..., c_x0, c_prev)
    num = col[..., None, :] * prev_rows
    den = abar * np.eye(c)[x_t] + (1.0 - abar) / c  # Qbar_t[x0, x_t] indexed by x0
    if np.any(den <= 0):
        raise ZeroDivisionError("posterior normalizer is zero")
    return num / den[..., :, None]


def posterior(x_t: int, x_0: int, t: int, sched: NoiseSchedule, c: int = 2) -> np.ndarray:
    if not 2 <= t <= sched.T:
        raise ValueError(f"posterior defined for t in [2, {sched.T}], got {t}")
    return posterior_probs(np.array(x_t), np.array(t), sched, c)[x_0]


def reverse_mix(x_t, p0, t: int, sched: NoiseSchedule, c: int) -> np.ndarray:
    """``p(x_{t-1} | G_t) = sum_x0 q(x_{t-1} | x_t, x_0) p(x_0 | G_t)``, shape ``(..., c)``."""
    if t == 1:
        return np.asarray(p0, dtype=np.float64)
    post = posterior_probs(x_t, np.full(np.shape(x_t), t), sched, c)
    return np.einsum("...k,...kj->...j", p0, post)


def reverse_step(
    gt: DiscreteStructure, t: int, node_probs, edge_probs_upper, sched: NoiseSchedule, rng=None, c: int = 2
) -> DiscreteStructure:
    rng = np.random.default_rng(rng)
    nodes = reverse_mix(gt.node_states, np.asarray(node_probs), t, sched, c)
    edges = reverse_mix(gt.edges_upper(), np.asarray(edge_probs_upper), t, sched, c)
    vt = sample_categorical(nodes, rng.random(nodes.shape[:-1]))
    et = sample_categorical(edges, rng.random(edges.shape[:-1]))
    return DiscreteStructure.from_upper(vt, et)


@dataclass
class Trajectory:
    """One reverse-denoising run. ``stored_steps`` maps ``t`` to ``G_t``."""

    final: DiscreteStructure
    stored_steps: dict[int, DiscreteStructure] = field(default_factory=dict)
    guidance: object = None
    seed: int | None = None
    final_node_probs: np.ndarray | None = None
    final_edge_probs: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "guidance": self.guidance if isinstance(self.guidance, (str, int, list, dict)) else None,
            "stored_timesteps": sorted(self.stored_steps),
            "final": {
                "nodes": self.final.node_states.tolist(),
                "edges_upper": self.final.edges_upper().tolist(),
            },
            "steps": {
                str(t): {"nodes": g.node_states.tolist(), "edges_upper": g.edges_upper().tolist()}
                for t, g in sorted(self.stored_steps.items())
            },
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        final = DiscreteStructure.from_upper(d["final"]["nodes"], d["final"]["edges_upper"])
        steps = {
            int(t): DiscreteStructure.from_upper(g["nodes"], g["edges_upper"])
            for t, g in d["steps"].items()
        }
        return cls(final, steps, d.get("guidance"), d.get("seed"))

    @classmethod
    def load(cls, path) -> "Trajectory":
        return cls.from_dict(json.loads(Path(path).read_text()))


# denoiser(nodes (B, L), edges_upper (B, P), t (B,), guidance list) -> (node_probs, edge_probs)
DenoiserFn = Callable[[np.ndarray, np.ndarray, np.ndarray, list], tuple]


def _resolve_steps(which, T: int) -> set[int]:
    if which is None:
        return set()
    if isinstance(which, str):
        if which == "all":
            return set(range(1, T + 1))
        raise ValueError(f"unknown store_steps value {which!r}")
    steps = {int(t) for t in which}
    if any(not 1 <= t <= T for t in steps):
        raise ValueError(f"stored timesteps must lie in [1, {T}]")
    return steps


def sample_batch(
    denoiser: DenoiserFn,
    guidances: list,
    L: int,
    sched: NoiseSchedule,
    seeds,
    store_steps=None,
    c: int = 2,
) -> list[Trajectory]:
    """Run the reverse chain for a batch; trajectory ``i`` draws only from ``seeds[i]``.

    ``store_steps`` is ``None``, ``"all"``, an iterable of steps shared by the
    batch, or a list with one such value per trajectory.
    """
    B = len(guidances)
    T = sched.T
    P = n_pairs(L)
    if isinstance(store_steps, list) and len(store_steps) == B and B and not np.isscalar(store_steps[0]):
        per_item = [_resolve_steps(s, T) for s in store_steps]
    else:
        shared = _resolve_steps(store_steps, T)
        per_item = [shared] * B
    rngs = [np.random.default_rng(s) for s in seeds]
    # uniforms[i, k] drives step T - k + 1 (k = 0 is the prior draw)
    U = np.stack([r.random((T + 1, L + P)) for r in rngs]) if B else np.zeros((0, T + 1, L + P))

    uniform = np.full(c, 1.0 / c)
    v = sample_categorical(np.broadcast_to(uniform, (B, L, c)), U[:, 0, :L])
    e = sample_categorical(np.broadcast_to(uniform, (B, P, c)), U[:, 0, L:])
    stored = [dict() for _ in range(B)]
    last_node_p = last_edge_p = None
    for k, t in enumerate(range(T, 0, -1), start=1):
        for i in range(B):
            if t in per_item[i]:
                stored[i][t] = DiscreteStructure.from_upper(v[i], e[i])
        node_p, edge_p = denoiser(v, e, np.full(B, t), guidances)
        nv = reverse_mix(v, node_p, t, sched, c)
        ne = reverse_mix(e, edge_p, t, sched, c)
        v = sample_categorical(nv, U[:, k, :L])
        e = sample_categorical(ne, U[:, k, L:])
        if t == 1:
            last_node_p, last_edge_p = node_p, edge_p
    out = []
    for i in range(B):
        out.append(
            Trajectory(
                DiscreteStructure.from_upper(v[i], e[i]),
                stored[i],
                guidances[i],
                seeds[i],
                None if last_node_p is None else np.asarray(last_node_p[i]),
                None if last_edge_p is None else np.asarray(last_edge_p[i]),
            )
        )
    return out


def sample(denoiser: DenoiserFn, guidance, L: int, sched: NoiseSchedule, seed=0, store_steps=None, c: int = 2):
    return sample_batch(denoiser, [guidance], L, sched, [seed], store_steps, c)[0]


def uniform_structure(L: int, c: int, rng) -> DiscreteStructure:
    rng = np.random.default_rng(rng)
    return DiscreteStructure.from_upper(rng.integers(0, c, L), rng.integers(0, c, n_pairs(L)))

