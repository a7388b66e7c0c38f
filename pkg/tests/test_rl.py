import math

import numpy as np
import pytest
import torch

from cogstruct.dataset import InteractionDataset, InteractionEvent, QMatrix
from cogstruct.denoiser import Denoiser, DenoiserConfig, checkpoint_hash, encode_histories, log_prob_arrays
from cogstruct.diffusion import DiffusionConfig, Trajectory, forward_sample, make_schedule
from cogstruct.rl import (
    MatchScores,
    RewardConfig,
    RewardLog,
    RLConfig,
    contexts,
    eager_policy_gradient,
    finetune,
    log_prob_g0_given_gt,
    match_edges,
    match_nodes,
    match_scores,
    reward_generic,
    reward_solo,
    sample_contexts,
    solo_level,
    standardize,
)
from cogstruct.structures import DiscreteStructure

from conftest import events

SMALL = DenoiserConfig(hidden_dim=8, n_layers=2, guidance_dim=4)
GRID = [i / 10 for i in range(11)]


def case_predicates(mv, me):
    return [
        mv == 0,
        0 < mv < 0.5,
        mv >= 0.5 and me < 0.5,
        0.5 <= mv < 1 and 0.5 <= me < 1,
        (mv == 1 and me >= 0.5) or (mv >= 0.5 and me == 1),
    ]


def test_solo_sweep_exhaustive_and_exclusive():
    for mv in GRID:
        for me in GRID:
            hits = case_predicates(mv, me)
            assert sum(hits) == 1, (mv, me)
            assert solo_level(MatchScores(mv, me)) == hits.index(True) + 1


@pytest.mark.parametrize(
    "mv, me, expected",
    [(0.0, 1.0, 0), (0.0, 0.0, 0), (0.3, 1.0, 2), (0.6, 0.3, 12), (0.5, 0.5, 32), (0.9, 0.9, 32), (1.0, 0.5, 36), (0.5, 1.0, 36), (1.0, 1.0, 36), (1.0, 0.4, 12)],
)
def test_solo_boundary_rows(mv, me, expected):
    assert reward_solo(MatchScores(mv, me)) == expected


def test_solo_monotone_on_grid():
    for values in [(0, 2, 12, 32, 36), (-1, 0, 0.5, 3, 100)]:
        cfg = RewardConfig(values=values)
        table = np.array([[reward_solo(MatchScores(mv, me), cfg) for me in GRID] for mv in GRID])
        assert np.all(np.diff(table, axis=0) >= 0)
        assert np.all(np.diff(table, axis=1) >= 0)


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(values=(0, 2, 2, 3, 4)).validate()
    with pytest.raises(ValueError):
        RewardConfig(mode="other").validate()
    with pytest.raises(ValueError):
        MatchScores(1.2, 0.0)


def test_generic_reward():
    assert reward_generic(MatchScores(0.5, 0.25)) == 0.75


QM = QMatrix(np.array([[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]]))


def test_match_examples():
    g = DiscreteStructure.from_upper([1, 0, 1], [1, 0, 0])
    assert match_nodes(g, 1, 1, QM) == 0.5
    assert match_nodes(g, 1, 0, QM) == 0.5
    assert match_nodes(g, 2, 1, QM) == 2 / 3
    assert match_edges(g, 1, QM, 1) == (1.0, False)
    assert match_edges(g, 2, QM, 1) == (1 / 3, False)
    assert match_edges(g, 2, QM, 0) == (2 / 3, False)
    assert match_edges(g, 0, QM, 1) == (0.0, True)


@pytest.mark.parametrize("rule, expected", [("node", 1.0), ("one", 1.0), ("zero", 0.0)])
def test_single_concept_edge_rule(rule, expected):
    g = DiscreteStructure.from_upper([1, 0, 0], [0, 0, 0])
    s = match_scores(g, InteractionEvent("s", 0, 1, 0), QM, rule)
    assert s.edge_set_empty and s.m_v == 1.0 and s.m_e == expected


def test_single_concept_wrong_answer_with_node_rule():
    g = DiscreteStructure.from_upper([1, 0, 0], [0, 0, 0])
    s = match_scores(g, InteractionEvent("s", 0, 0, 0), QM)
    assert (s.m_v, s.m_e) == (0.0, 0.0)
    assert reward_solo(s) == 0


def uniform_model(L=3, M=2, T=10):
    model = Denoiser(SMALL, L, M, T=T)
    with torch.no_grad():
        model.node_head.weight.zero_()
        model.edge_head.weight.zero_()
    return model


def test_log_prob_uniform_denoiser():
    model = uniform_model()
    g0 = DiscreteStructure.from_upper([1, 0, 1], [0, 1, 1])
    lp = log_prob_g0_given_gt(model, g0, DiscreteStructure.empty(3), 5, events("s", [(0, 1)]))
    assert abs(lp + 6 * math.log(2)) < 1e-12


def test_log_prob_matches_loop():
    model = Denoiser(SMALL, 3, 2, T=10, seed=3)
    g0 = DiscreteStructure.from_upper([1, 0, 1], [0, 1, 1])
    gt = DiscreteStructure.from_upper([0, 0, 1], [1, 1, 0])
    hist = events("s", [(1, 0)])
    npb, epb = model.predict_batch(gt.node_states[None], gt.edges_upper()[None], [4], [hist])
    ref = sum(math.log(npb[0, i, g0.node_states[i]]) for i in range(3))
    ref += sum(math.log(epb[0, k, g0.edges_upper()[k]]) for k in range(3))
    assert abs(log_prob_g0_given_gt(model, g0, gt, 4, hist) - ref) < 1e-12


def test_standardize():
    adv, applied = standardize([1.0, -1.0])
    np.testing.assert_allclose(adv, [1 / math.sqrt(2), -1 / math.sqrt(2)])
    assert applied
    adv, applied = standardize([3.0, 3.0, 3.0])
    assert not applied and np.all(adv == 0)


def make_batch(model, rewards, seed=0, n_steps=(2, 3)):
    sched = make_schedule(DiffusionConfig(T=model.T))
    rng = np.random.default_rng(seed)
    batch = []
    for i, r in enumerate(rewards):
        L = model.n_concepts
        g0 = DiscreteStructure.from_upper(rng.integers(0, 2, L), rng.integers(0, 2, L * (L - 1) // 2))
        steps = sorted(rng.choice(np.arange(1, model.T + 1), size=n_steps[i % len(n_steps)], replace=False).tolist())
        stored = {t: forward_sample(g0, t, sched, rng) for t in steps}
        hist = events("s", [(int(rng.integers(0, model.n_questions)), int(rng.integers(0, 2))) for _ in range(2 + i)])
        batch.append((Trajectory(g0, stored, hist, i), r))
    return batch


def single_grad(model, g0, gt, t, hist):
    h = model.guidance(encode_histories([hist], model.cfg.recency))
    lp = log_prob_arrays(model, g0.node_states[None], g0.edges_upper()[None], gt.node_states[None], gt.edges_upper()[None], np.array([t]), h)
    params = list(model.parameters())
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(torch.autograd.grad(lp.sum(), params, allow_unused=True), params)]


def test_eager_gradient_two_term_oracle():
    model = Denoiser(SMALL, 3, 4, T=10, seed=2)
    batch = make_batch(model, [2.0, 12.0])
    grads, info = eager_policy_gradient(model, batch)
    a = np.array([-1, 1]) / math.sqrt(2)
    np.testing.assert_allclose(info.advantages, a, atol=1e-15)
    expected = [torch.zeros_like(p) for p in model.parameters()]
    for (traj, _), adv in zip(batch, a):
        w = adv * model.T / len(traj.stored_steps) / 2
        for t, gt in traj.stored_steps.items():
            for acc, g in zip(expected, single_grad(model, traj.final, gt, t, traj.guidance)):
                acc += w * g
    for (name, _), e in zip(model.named_parameters(), expected):
        assert torch.max(torch.abs(grads[name] - e)).item() <= 1e-10, name


def test_equal_rewards_skip_update():
    model = Denoiser(SMALL, 3, 4, T=10)
    grads, info = eager_policy_gradient(model, make_batch(model, [5.0, 5.0, 5.0]))
    assert not info.applied
    assert all(torch.all(g == 0) for g in grads.values())


def test_gradient_shift_invariant_and_duplicate_scaling():
    model = Denoiser(SMALL, 3, 4, T=10, seed=1)
    batch = make_batch(model, [1.0, 4.0])
    base, _ = eager_policy_gradient(model, batch)
    shifted, _ = eager_policy_gradient(model, [(tr, r + 100.0) for tr, r in batch])
    doubled, _ = eager_policy_gradient(model, batch + batch)
    for name in base:
        torch.testing.assert_close(shifted[name], base[name], rtol=1e-9, atol=1e-12)
        torch.testing.assert_close(doubled[name], base[name] * math.sqrt(1.5), rtol=1e-9, atol=1e-12)


def test_gradient_rejects_bad_batches():
    model = Denoiser(SMALL, 3, 4, T=10)
    with pytest.raises(ValueError):
        eager_policy_gradient(model, make_batch(model, [1.0]))
    tr = make_batch(model, [1.0, 2.0])
    tr[0][0].stored_steps.clear()
    with pytest.raises(ValueError):
        eager_policy_gradient(model, tr)


def rl_dataset():
    qm = QMatrix(np.array([[1, 0, 0], [0.5, 0.5, 0], [0, 0.5, 0.5]]))
    rng = np.random.default_rng(0)
    students = {f"u{i}": events(f"u{i}", [(int(rng.integers(0, 3)), int(rng.integers(0, 2))) for _ in range(5)]) for i in range(4)}
    return InteractionDataset(students, qm)


def test_contexts_cover_every_next_event():
    ds = rl_dataset()
    ctxs = contexts(ds)
    assert len(ctxs) == 4 * 4
    for c in ctxs:
        assert len(c.history) == c.prefix_len and c.target.position == c.prefix_len


def test_zero_learning_rate_leaves_model_unchanged():
    model = Denoiser(SMALL, 3, 3, T=10, seed=4)
    before = checkpoint_hash(model)
    _, log = finetune(model, rl_dataset(), DiffusionConfig(T=10), RLConfig(n_trajectories=4, n_timesteps=2, n_updates=2, lr=0.0))
    assert checkpoint_hash(model) == before
    assert len(log.rows) == 2


def test_finetune_deterministic():
    hashes = []
    for _ in range(2):
        model = Denoiser(SMALL, 3, 3, T=10, seed=4)
        cfg = RLConfig(n_trajectories=6, n_timesteps=3, n_updates=3, lr=1e-2, seed=9)
        _, log = finetune(model, rl_dataset(), DiffusionConfig(T=10), cfg)
        hashes.append((checkpoint_hash(model), tuple(log.rows)))
    assert hashes[0] == hashes[1]


def test_solo_and_generic_directions_differ():
    ds = rl_dataset()
    model = Denoiser(SMALL, 3, 3, T=10, seed=5)
    ctxs = contexts(ds)[:8]
    trajs = sample_contexts(model, ctxs, DiffusionConfig(T=10), list(range(8)), [[2, 5, 9]] * 8)
    out = {}
    for mode in ("solo", "generic"):
        cfg = RewardConfig(mode=mode)
        scores = [match_scores(tr.final, c.target, ds.qmatrix) for tr, c in zip(trajs, ctxs)]
        rewards = [reward_solo(s, cfg) if mode == "solo" else reward_generic(s) for s in scores]
        out[mode], _ = eager_policy_gradient(model, list(zip(trajs, rewards)))
    assert any(not torch.allclose(out["solo"][n], out["generic"][n]) for n in out["solo"])


def test_rl_config_validation():
    with pytest.raises(ValueError):
        RLConfig(n_trajectories=1).validate()
    with pytest.raises(ValueError):
        RLConfig(n_timesteps=11).validate(10)


def test_reward_log_csv(tmp_path):
    log = RewardLog(rows=[(0, 1.5, 0.5, 0.25, 2.0)])
    log.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "update,mean_reward,std_reward,frac_r5,grad_norm\n0,1.5,0.5,0.25,2\n"
