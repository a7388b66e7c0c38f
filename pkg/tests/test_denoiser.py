import math

import numpy as np
import pytest
import torch

from cogstruct.dataset import InteractionEvent
from cogstruct.denoiser import (
    AdamWHyper,
    CheckpointError,
    Denoiser,
    DenoiserConfig,
    OptimizerState,
    TrainingItem,
    adamw_step,
    batch_loss,
    checkpoint_hash,
    cross_entropy,
    denoise,
    encode_histories,
    grad,
    graph_features,
    load_checkpoint,
    loss,
    save_checkpoint,
    structure_features,
)
from cogstruct.diffusion import DiffusionConfig, forward_sample, make_schedule
from cogstruct.structures import DiscreteStructure

from conftest import events

SMALL = DenoiserConfig(hidden_dim=8, n_layers=2, guidance_dim=4)


def random_items(L, M, n, seed=0, T=20):
    rng = np.random.default_rng(seed)
    sched = make_schedule(DiffusionConfig(T=T))
    items = []
    for i in range(n):
        g0 = DiscreteStructure.from_upper(rng.integers(0, 2, L), rng.integers(0, 2, L * (L - 1) // 2))
        t = int(rng.integers(1, T + 1))
        hist = events("s", [(int(rng.integers(0, M)), int(rng.integers(0, 2))) for _ in range(3 + i)])
        items.append(TrainingItem(g0, forward_sample(g0, t, sched, rng), t, hist))
    return items


def test_finite_difference_gradients():
    model = Denoiser(SMALL, 4, 6, T=20, seed=1)
    items = random_items(4, 6, 3)
    analytic = grad(model, items)
    rng = np.random.default_rng(0)
    h = 1e-6
    for name, p in model.named_parameters():
        for _ in range(2):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = batch_loss(model, items)[0].item()
                p[idx] = orig - h
                down = batch_loss(model, items)[0].item()
                p[idx] = orig
            num = (up - down) / (2 * h)
            ana = analytic[name][idx].item()
            assert abs(num - ana) <= 1e-5 * max(1.0, abs(num)), name


def test_xavier_init_and_zero_biases():
    model = Denoiser(DenoiserConfig(hidden_dim=256, guidance_dim=64, n_layers=1), 3, 40)
    w = model.layers[0].query.weight.detach()
    assert abs(w.std().item() - math.sqrt(2.0 / 512)) / math.sqrt(2.0 / 512) < 0.05
    for name, p in model.named_parameters():
        if p.ndim == 1:
            assert torch.all(p == 0), name


def test_seed_reproducible():
    a = Denoiser(SMALL, 3, 5, seed=4)
    b = Denoiser(SMALL, 3, 5, seed=4)
    c = Denoiser(SMALL, 3, 5, seed=5)
    assert checkpoint_hash(a) == checkpoint_hash(b) != checkpoint_hash(c)


def test_graph_features_example():
    g = DiscreteStructure.from_upper([1, 0, 1], [1, 0, 0])
    np.testing.assert_allclose(structure_features(g, 50, 100), [2 / 3, 1 / 3, 1 / 3, 0.5])


def test_graph_features_single_concept():
    f = graph_features(torch.tensor([[1]]), torch.zeros((1, 1, 1), dtype=torch.int64), torch.tensor([0]), 10)
    np.testing.assert_array_equal(f.numpy(), [[1.0, 0.0, 0.0, 0.0]])


def test_guidance_recency_weights():
    enc = encode_histories([events("s", [(0, 1), (1, 0)])], recency=0.5)
    np.testing.assert_allclose(enc.weights.numpy(), [[1 / 3, 2 / 3]])
    model = Denoiser(SMALL, 2, 2)
    g = model.guidance(enc)[0]
    qe, re = model.question_emb.weight, model.response_emb.weight
    ref = (qe[0] + re[1]) / 3 + 2 * (qe[1] + re[0]) / 3
    torch.testing.assert_close(g, ref)


def test_empty_history_gives_zero_guidance(caplog):
    model = Denoiser(SMALL, 2, 2)
    g = model.guidance(encode_histories([[]], 0.9))
    assert torch.all(g == 0)
    assert "empty interaction history" in caplog.text


def test_outputs_are_distributions():
    model = Denoiser(SMALL, 5, 7, T=10, seed=2)
    rng = np.random.default_rng(0)
    hist = [events("s", [(1, 1)])] * 4
    npb, epb = model.predict_batch(rng.integers(0, 2, (4, 5)), rng.integers(0, 2, (4, 10)), [1, 3, 5, 10], hist)
    assert npb.shape == (4, 5, 2) and epb.shape == (4, 10, 2)
    np.testing.assert_allclose(npb.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(epb.sum(-1), 1.0, atol=1e-12)
    assert np.all(npb > 0) and np.all(epb > 0)


def test_permutation_equivariance():
    model = Denoiser(SMALL, 5, 4, T=10, seed=3)
    rng = np.random.default_rng(1)
    g = DiscreteStructure.from_upper(rng.integers(0, 2, 5), rng.integers(0, 2, 10))
    hist = events("s", [(0, 1), (3, 0)])
    perm = np.array([3, 1, 4, 0, 2])
    a = denoise(model, g, 4, hist)
    b = denoise(model, g.permute(perm), 4, hist)
    np.testing.assert_allclose(b.node_probs, a.node_probs[perm], atol=1e-12)
    full_a = np.zeros((5, 5, 2))
    iu = np.triu_indices(5, 1)
    full_a[iu] = a.edge_probs_upper
    full_a[(iu[1], iu[0])] = a.edge_probs_upper
    np.testing.assert_allclose(b.edge_probs_upper, full_a[perm][:, perm][iu], atol=1e-12)


def uniform_model(L=3, M=2, lam=0.5):
    model = Denoiser(DenoiserConfig(hidden_dim=8, n_layers=1, guidance_dim=4, lambda_ve=lam), L, M)
    with torch.no_grad():
        for head in (model.node_head, model.edge_head):
            head.weight.zero_()
    return model


@pytest.mark.parametrize("lam", [0.5, 1.0])
def test_uniform_denoiser_loss(lam):
    model = uniform_model(lam=lam)
    g = DiscreteStructure.from_upper([1, 0, 1], [0, 1, 1])
    out = denoise(model, DiscreteStructure.empty(3), 3, events("s", [(0, 1)]))
    assert abs(loss(out, g, lam) - math.log(2) * (1 + lam)) < 1e-12


def test_cross_entropy_against_loop():
    rng = np.random.default_rng(5)
    npb = rng.dirichlet([1, 1], size=(2, 4))
    epb = rng.dirichlet([1, 1], size=(2, 6))
    n0 = rng.integers(0, 2, (2, 4))
    e0 = rng.integers(0, 2, (2, 6))
    total, node, edge = cross_entropy(*(torch.as_tensor(a) for a in (npb, epb, n0, e0)), 0.5)
    for b in range(2):
        ln = -sum(math.log(npb[b, i, n0[b, i]]) for i in range(4)) / 4
        le = -sum(math.log(epb[b, k, e0[b, k]]) for k in range(6)) / 6
        assert abs(node[b].item() - ln) < 1e-12
        assert abs(edge[b].item() - le) < 1e-12
        assert abs(total[b].item() - (ln + 0.5 * le)) < 1e-12


def test_cross_entropy_floor():
    npb = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
    total, _, _ = cross_entropy(npb, torch.zeros((1, 0, 2), dtype=torch.float64), torch.tensor([[1]]), torch.zeros((1, 0), dtype=torch.int64), 0.5)
    assert abs(total.item() + math.log(1e-12)) < 1e-9


def test_adamw_first_step():
    model = Denoiser(SMALL, 2, 2, seed=0)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    grads = {n: torch.full_like(p, 0.3) for n, p in model.named_parameters()}
    state = OptimizerState(model, AdamWHyper(lr=0.01, weight_decay=0.1))
    adamw_step(model, grads, state)
    for n, p in model.named_parameters():
        decay = 0.0 if model.no_decay(n) else 0.1
        expect = before[n] * (1 - 0.01 * decay) - 0.01 * 0.3 / (0.3 + 1e-8)
        torch.testing.assert_close(p.detach(), expect, rtol=0, atol=1e-12)
    assert state.step_count == 1


def test_adamw_ascent_sign():
    model = Denoiser(SMALL, 2, 2)
    before = model.node_head.weight.detach().clone()
    grads = {n: torch.ones_like(p) for n, p in model.named_parameters()}
    adamw_step(model, grads, OptimizerState(model, AdamWHyper(lr=0.1)), sign=-1.0)
    assert torch.all(model.node_head.weight > before)


def test_checkpoint_roundtrip(tmp_path):
    model = Denoiser(SMALL, 3, 5, T=30, seed=8)
    items = random_items(3, 5, 2, T=30)
    state = OptimizerState(model, AdamWHyper(lr=0.01))
    adamw_step(model, grad(model, items), state)
    save_checkpoint(model, tmp_path / "m.json", state)
    back, back_state = load_checkpoint(tmp_path / "m.json", with_optimizer=True)
    assert checkpoint_hash(back) == checkpoint_hash(model)
    assert back.T == 30 and back.cfg == model.cfg
    adamw_step(model, grad(model, items), state)
    adamw_step(back, grad(back, items), back_state)
    assert checkpoint_hash(back) == checkpoint_hash(model)


def test_checkpoint_errors(tmp_path):
    model = Denoiser(SMALL, 3, 5)
    path = tmp_path / "m.json"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError, match="L=3"):
        load_checkpoint(path, n_concepts=4)
    with pytest.raises(CheckpointError, match="M=5"):
        load_checkpoint(path, n_questions=6)
    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.json")
    bad = text.replace('"node_head.weight": {"shape": [2, 8]', '"node_head.weight": {"shape": [8, 2]')
    (tmp_path / "bad.json").write_text(bad)
    with pytest.raises(CheckpointError, match="node_head.weight"):
        load_checkpoint(tmp_path / "bad.json")


def test_history_changes_prediction():
    model = Denoiser(SMALL, 3, 4, seed=1)
    g = DiscreteStructure.empty(3)
    a = denoise(model, g, 5, [InteractionEvent("s", 0, 1, 0)])
    b = denoise(model, g, 5, [InteractionEvent("s", 3, 0, 0)])
    assert not np.allclose(a.node_probs, b.node_probs)
