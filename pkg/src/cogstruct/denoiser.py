"""Graph-attention denoiser ``p(G_0 | G_t, history)`` with history guidance.

All computation is float64 torch on CPU. Gradients come from autograd; the
test suite checks them against central finite differences.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .structures import DiscreteStructure, upper_indices

logger = logging.getLogger(__name__)

DTYPE = torch.float64
PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    hidden_dim: int = 64
    n_layers: int = 3
    guidance_dim: int = 32
    recency: float = 0.95
    lambda_ve: float = 0.5

    def validate(self):
        if min(self.hidden_dim, self.n_layers, self.guidance_dim) < 1:
            raise ValueError("dimensions must be >= 1")
        if not 0.0 < self.recency <= 1.0:
            raise ValueError("recency must lie in (0, 1]")
        if not 0.0 < self.lambda_ve <= 1.0:
            raise ValueError("lambda_ve must lie in (0, 1]")


def graph_features(nodes: torch.Tensor, edges: torch.Tensor, t: torch.Tensor, T: int) -> torch.Tensor:
    """Structural summary per graph: node fraction, edge fraction, mean degree / (L-1), t / T.

    ``nodes`` ``(B, L)`` and ``edges`` ``(B, L, L)`` hold states; nonzero counts as constructed.
    """
    B, L = nodes.shape
    built_nodes = (nodes > 0).to(DTYPE)
    built_edges = (edges > 0).to(DTYPE)
    iu, ju = upper_indices(L)
    node_frac = built_nodes.mean(dim=1)
    if L > 1:
        edge_frac = built_edges[:, iu, ju].mean(dim=1)
        degree = built_edges.sum(dim=2).mean(dim=1) / (L - 1)
    else:
        edge_frac = degree = torch.zeros(B, dtype=DTYPE)
    return torch.stack([node_frac, edge_frac, degree, t.to(DTYPE) / T], dim=1)


def structure_features(g: DiscreteStructure, t: int, T: int) -> np.ndarray:
    f = graph_features(
        torch.as_tensor(g.node_states)[None], torch.as_tensor(g.edge_states)[None], torch.tensor([t]), T
    )
    return f[0].numpy()


@dataclass
class EncodedHistories:
    """Padded ``(B, H)`` question ids, responses and normalized recency weights."""

    questions: torch.Tensor
    responses: torch.Tensor
    weights: torch.Tensor


def encode_histories(histories: Sequence[Sequence], recency: float) -> EncodedHistories:
    """Recency weights ``recency ** (n - 1 - k)`` for event ``k`` of ``n``, normalized per history."""
    B = len(histories)
    H = max((len(h) for h in histories), default=0)
    H = max(H, 1)
    q = np.zeros((B, H), dtype=np.int64)
    r = np.zeros((B, H), dtype=np.int64)
    w = np.zeros((B, H))
    for i, hist in enumerate(histories):
        n = len(hist)
        if n == 0:
            logger.warning("empty interaction history; guidance set to zero")
            continue
        q[i, :n] = [e.question_id for e in hist]
        r[i, :n] = [e.response for e in hist]
        wi = recency ** np.arange(n - 1, -1, -1, dtype=np.float64)
        w[i, :n] = wi / wi.sum()
    return EncodedHistories(torch.from_numpy(q), torch.from_numpy(r), torch.from_numpy(w))


class _AttentionLayer(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.edge_bias = nn.Linear(d, 1, bias=False)
        self.node_update = nn.Linear(2 * d, d)
        self.node_global = nn.Linear(d, d, bias=False)
        self.edge_sum = nn.Linear(d, d)
        self.edge_prod = nn.Linear(d, d, bias=False)
        self.edge_self = nn.Linear(d, d, bias=False)
        self.edge_global = nn.Linear(d, d, bias=False)
        self.edge_out = nn.Linear(d, d)
        self.scale = 1.0 / math.sqrt(d)

    def forward(self, x, e, g, iu, ju):
        # x (B, L, d); e (B, P, d) upper-triangle pairs (iu[k], ju[k]); g (B, d)
        B, L, _ = x.shape
        q, k, v = self.query(x), self.key(x), self.value(x)
        bias_upper = self.edge_bias(e).squeeze(-1)
        bias = x.new_zeros((B, L, L))
        bias[:, iu, ju] = bias_upper
        bias[:, ju, iu] = bias_upper
        logits = torch.einsum("bid,bjd->bij", q, k) * self.scale + bias
        attn = torch.softmax(logits, dim=-1)
        msg = torch.einsum("bij,bjd->bid", attn, v)
        x = x + nn.functional.silu(self.node_update(torch.cat([x, msg], dim=-1)) + self.node_global(g)[:, None])
        # every term is symmetric in (i, j)
        xs = nn.functional.linear(x, self.edge_sum.weight)
        xi, xj = x[:, iu], x[:, ju]
        hidden = nn.functional.silu(
            xs[:, iu] + xs[:, ju] + self.edge_sum.bias
            + self.edge_prod(xi * xj) + self.edge_self(e) + self.edge_global(g)[:, None]
        )
        e = e + self.edge_out(hidden)
        return x, e


class Denoiser(nn.Module):
    """Predicts clean node/edge state distributions from a noisy structure.

    Parameters are initialized Xavier-uniform with zero biases from ``seed``.
    """

    def __init__(self, cfg: DenoiserConfig, n_concepts: int, n_questions: int, c: int = 2, T: int = 500, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.n_concepts = n_concepts
        self.n_questions = n_questions
        self.c = c
        self.T = T
        d, dg = cfg.hidden_dim, cfg.guidance_dim
        self.node_in = nn.Linear(c, d)
        self.edge_in = nn.Linear(c, d)
        self.question_emb = nn.Embedding(n_questions, dg)
        self.response_emb = nn.Embedding(2, dg)
        self.global_proj = nn.Linear(4 + dg, d)
        self.layers = nn.ModuleList(_AttentionLayer(d) for _ in range(cfg.n_layers))
        self.node_head = nn.Linear(d, c)
        self.edge_head = nn.Linear(d, c)
        self.to(DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim >= 2:
                    fan_out, fan_in = p.shape[0], p.shape[1]
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                else:
                    p.zero_()

    def no_decay(self, name: str) -> bool:
        return name.endswith("bias") or name.endswith("_emb.weight")

    def guidance(self, hist: EncodedHistories) -> torch.Tensor:
        vecs = self.question_emb(hist.questions) + self.response_emb(hist.responses)
        return (hist.weights[..., None] * vecs).sum(dim=1)

    def forward(self, nodes: torch.Tensor, edges: torch.Tensor, t: torch.Tensor, h: torch.Tensor):
        """Return ``(node_probs (B, L, c), edge_probs (B, P, c))``.

        ``edges`` is the full symmetric ``(B, L, L)`` state tensor.
        """
        B, L = nodes.shape
        c = self.c
        z = graph_features(nodes, edges, t, self.T)
        g = self.global_proj(torch.cat([z, h], dim=1))
        iu, ju = (torch.as_tensor(a) for a in upper_indices(L))
        x = self.node_in(nn.functional.one_hot(nodes, c).to(DTYPE))
        e = self.edge_in(nn.functional.one_hot(edges[:, iu, ju], c).to(DTYPE))
        for k, layer in enumerate(self.layers):
            x, e = layer(x, e, g, iu, ju)
            if not (torch.isfinite(x).all() and torch.isfinite(e).all()):
                raise FloatingPointError(f"non-finite activation in layer {k}")
        node_probs = torch.softmax(self.node_head(x), dim=-1)
        edge_probs = torch.softmax(self.edge_head(e), dim=-1)
        return node_probs, edge_probs

    def predict_batch(self, nodes, edges_upper, t, histories=None, h=None):
        """Numpy-in, numpy-out forward pass without gradients."""
        nodes = torch.as_tensor(np.asarray(nodes), dtype=torch.int64)
        edges = _full_edges(torch.as_tensor(np.asarray(edges_upper), dtype=torch.int64), nodes.shape[1])
        if h is None:
            h = self.guidance(encode_histories(histories, self.cfg.recency))
        with torch.no_grad():
            npb, epb = self(nodes, edges, torch.as_tensor(np.asarray(t), dtype=torch.int64), h)
        return npb.numpy(), epb.numpy()

    def sampler(self):
        """Adapter for :func:`cogstruct.diffusion.sample_batch`; caches guidance per batch."""
        cache = {}

        def fn(nodes, edges_upper, t, guidances):
            key = id(guidances)
            if key not in cache:
                cache.clear()
                with torch.no_grad():
                    cache[key] = (guidances, self.guidance(encode_histories(guidances, self.cfg.recency)))
            return self.predict_batch(nodes, edges_upper, t, h=cache[key][1])

        return fn


def _full_edges(edges_upper: torch.Tensor, L: int) -> torch.Tensor:
    B = edges_upper.shape[0]
    iu, ju = upper_indices(L)
    full = torch.zeros((B, L, L), dtype=edges_upper.dtype)
    full[:, iu, ju] = edges_upper
    full[:, ju, iu] = edges_upper
    return full


def init_params(cfg: DenoiserConfig, n_concepts: int, n_questions: int, c: int = 2, T: int = 500, seed: int = 0) -> Denoiser:
    return Denoiser(cfg, n_concepts, n_questions, c, T, seed)


@dataclass
class DenoiserOutput:
    node_probs: np.ndarray  # (L, c)
    edge_probs_upper: np.ndarray  # (P, c)


def denoise(model: Denoiser, gt: DiscreteStructure, t: int, history) -> DenoiserOutput:
    npb, epb = model.predict_batch(gt.node_states[None], gt.edges_upper()[None], [t], [history])
    return DenoiserOutput(npb[0], epb[0])


def cross_entropy(node_probs, edge_probs, nodes0, edges0_upper, lambda_ve: float):
    """Per-item ``(total, node, edge)`` mean negative log-likelihoods, probabilities floored at 1e-12."""
    node_nll = -node_probs.gather(-1, nodes0[..., None]).squeeze(-1).clamp_min(PROB_FLOOR).log()
    node_loss = node_nll.mean(dim=-1)
    if edge_probs.shape[-2] > 0:
        edge_nll = -edge_probs.gather(-1, edges0_upper[..., None]).squeeze(-1).clamp_min(PROB_FLOOR).log()
        edge_loss = edge_nll.mean(dim=-1)
    else:
        edge_loss = torch.zeros_like(node_loss)
    return node_loss + lambda_ve * edge_loss, node_loss, edge_loss


def loss(out: DenoiserOutput, g0: DiscreteStructure, lambda_ve: float) -> float:
    total, _, _ = cross_entropy(
        torch.as_tensor(out.node_probs),
        torch.as_tensor(out.edge_probs_upper),
        torch.as_tensor(g0.node_states),
        torch.as_tensor(g0.edges_upper()),
        lambda_ve,
    )
    return float(total)


@dataclass
class TrainingItem:
    g0: DiscreteStructure
    gt: DiscreteStructure
    t: int
    history: Sequence


def stack_structures(structs: Sequence[DiscreteStructure]):
    nodes = torch.as_tensor(np.stack([g.node_states for g in structs]))
    edges = torch.as_tensor(np.stack([g.edge_states for g in structs]))
    upper = torch.as_tensor(np.stack([g.edges_upper() for g in structs]))
    return nodes, edges, upper


def log_prob_arrays(model: Denoiser, n0, e0_upper, nt, et_upper, t, h) -> torch.Tensor:
    """Per-item ``log p(G_0 | G_t)`` summed over nodes and upper-triangle edges, shape ``(B,)``."""
    edges_t = _full_edges(torch.as_tensor(et_upper), nt.shape[1])
    npb, epb = model(torch.as_tensor(nt), edges_t, torch.as_tensor(t), h)
    lp = npb.gather(-1, torch.as_tensor(n0)[..., None]).clamp_min(PROB_FLOOR).log().sum(dim=(1, 2))
    if epb.shape[1] > 0:
        lp = lp + epb.gather(-1, torch.as_tensor(e0_upper)[..., None]).clamp_min(PROB_FLOOR).log().sum(dim=(1, 2))
    return lp


def loss_arrays(model: Denoiser, n0, e0_upper, nt, et_upper, t, h, lambda_ve: float):
    """Mean ``(total, node, edge)`` cross-entropy for array batches (differentiable)."""
    edges_t = _full_edges(torch.as_tensor(et_upper), nt.shape[1])
    npb, epb = model(torch.as_tensor(nt), edges_t, torch.as_tensor(t), h)
    total, node_l, edge_l = cross_entropy(npb, epb, torch.as_tensor(n0), torch.as_tensor(e0_upper), lambda_ve)
    return total.mean(), node_l.mean(), edge_l.mean()


def batch_loss(model: Denoiser, items: Sequence[TrainingItem], lambda_ve: float | None = None):
    """Mean loss over ``items`` plus the node/edge components (tensors, differentiable)."""
    lam = model.cfg.lambda_ve if lambda_ve is None else lambda_ve
    n0, _, e0 = stack_structures([it.g0 for it in items])
    nt, _, et = stack_structures([it.gt for it in items])
    t = torch.tensor([it.t for it in items], dtype=torch.int64)
    h = model.guidance(encode_histories([it.history for it in items], model.cfg.recency))
    return loss_arrays(model, n0, e0, nt, et, t, h, lam)


def grad(model: Denoiser, items: Sequence[TrainingItem], lambda_ve: float | None = None) -> dict[str, torch.Tensor]:
    """Exact gradients of the mean batch loss, keyed by parameter name."""
    if not items:
        raise ValueError("batch must be non-empty")
    model.zero_grad(set_to_none=True)
    total, _, _ = batch_loss(model, items, lambda_ve)
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), gr in zip(params.items(), grads):
        gr = torch.zeros_like(p) if gr is None else gr
        if not torch.isfinite(gr).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = gr
    return out


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0


class OptimizerState:
    """AdamW moments and step counter; biases and embedding tables are not decayed."""

    def __init__(self, model: nn.Module, hyper: AdamWHyper | None = None):
        self.hyper = hyper or AdamWHyper()
        decay, plain = [], []
        no_decay = getattr(model, "no_decay", lambda name: name.endswith("bias"))
        for name, p in model.named_parameters():
            (plain if no_decay(name) else decay).append(p)
        h = self.hyper
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": h.weight_decay}, {"params": plain, "weight_decay": 0.0}],
            lr=h.lr,
            betas=tuple(h.betas),
            eps=h.eps,
        )
        self.model = model

    @property
    def step_count(self) -> int:
        steps = [float(s["step"]) for s in self.optimizer.state.values() if "step" in s]
        return int(max(steps, default=0))

    def moments(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        out = {}
        for name, p in self.model.named_parameters():
            s = self.optimizer.state.get(p, {})
            if "exp_avg" in s:
                out[name] = (s["exp_avg"], s["exp_avg_sq"])
        return out


def adamw_step(model: nn.Module, grads: dict[str, torch.Tensor], state: OptimizerState, sign: float = 1.0) -> None:
    """One decoupled-weight-decay Adam update minimizing along ``grads`` (``sign=-1`` ascends)."""
    for name, p in model.named_parameters():
        gr = grads.get(name)
        p.grad = None if gr is None else (sign * gr).detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)


# -- checkpoints -------------------------------------------------------------


def _array_text(t: torch.Tensor) -> str:
    vals = t.detach().reshape(-1).tolist()
    return "[" + ",".join(format(v, ".17g") for v in vals) + "]"


def save_checkpoint(model: Denoiser, path, opt_state: OptimizerState | None = None, extra: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "n_concepts": model.n_concepts,
        "n_questions": model.n_questions,
        "c": model.c,
        "T": model.T,
        "extra": extra or {},
    }
    parts = ['{"header": ' + json.dumps(header, sort_keys=True) + ', "arrays": {']
    arrays = [
        f'"{name}": {{"shape": {json.dumps(list(p.shape))}, "data": {_array_text(p)}}}'
        for name, p in model.named_parameters()
    ]
    parts.append(",\n".join(arrays))
    parts.append("}")
    if opt_state is not None:
        moments = opt_state.moments()
        rows = [
            f'"{name}": {{"shape": {json.dumps(list(m.shape))}, "m": {_array_text(m)}, "v": {_array_text(v)}}}'
            for name, (m, v) in moments.items()
        ]
        parts.append(', "optimizer": {"step": %d, "hyper": %s, "moments": {%s}}' % (
            opt_state.step_count, json.dumps(asdict(opt_state.hyper)), ",\n".join(rows)))
    parts.append("}\n")
    Path(path).write_text("".join(parts))


def _read_array(name: str, entry: dict, key: str, expected) -> torch.Tensor:
    shape = entry.get("shape")
    if not isinstance(shape, list) or tuple(shape) != tuple(expected):
        raise CheckpointError(f"array {name!r}: shape {shape} does not match expected {list(expected)}")
    data = entry.get(key)
    if not isinstance(data, list) or len(data) != int(np.prod(expected, dtype=np.int64)):
        raise CheckpointError(f"array {name!r}: data length does not match shape {list(expected)}")
    return torch.tensor(data, dtype=DTYPE).reshape(tuple(expected))


def load_checkpoint(path, n_concepts: int | None = None, n_questions: int | None = None, with_optimizer: bool = False):
    """Rebuild a :class:`Denoiser` (and optionally its optimizer state) from ``path``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    header = doc.get("header", {})
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
    L, M = header["n_concepts"], header["n_questions"]
    if n_concepts is not None and n_concepts != L:
        raise CheckpointError(f"checkpoint was built for L={L} concepts, not {n_concepts}")
    if n_questions is not None and n_questions != M:
        raise CheckpointError(f"checkpoint was built for M={M} questions, not {n_questions}")
    cfg = DenoiserConfig(**header["config"])
    model = Denoiser(cfg, L, M, header["c"], header["T"])
    arrays = doc.get("arrays", {})
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays:
                raise CheckpointError(f"array {name!r} missing from checkpoint")
            p.copy_(_read_array(name, arrays[name], "data", p.shape))
    if not with_optimizer:
        return model
    opt = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        hyper = AdamWHyper(**{**o["hyper"], "betas": tuple(o["hyper"]["betas"])})
        opt = OptimizerState(model, hyper)
        params = dict(model.named_parameters())
        for name, entry in o["moments"].items():
            p = params[name]
            opt.optimizer.state[p] = {
                "step": torch.tensor(float(o["step"])),
                "exp_avg": _read_array(name, entry, "m", p.shape),
                "exp_avg_sq": _read_array(name, entry, "v", p.shape),
            }
    return model, opt


def checkpoint_hash(model: Denoiser) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()[:16]
