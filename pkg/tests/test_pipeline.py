import numpy as np
import pytest

from cogstruct.dataset import synth_generate, split_dataset
from cogstruct.diffusion import DiffusionConfig
from cogstruct.denoiser import DenoiserConfig
from cogstruct.downstream import StructureCache
from cogstruct.pipeline import (
    VARIANTS,
    CognitiveStructureGenerator,
    ConfigError,
    RunConfig,
    SimulatedStructureTransformer,
    fill_cache,
    history_seed,
    make_transformer,
    planted_oracle_report,
    run_variant,
)
from cogstruct.pretrain import PretrainConfig

from conftest import events


def test_variant_table():
    table = {i: (v.pretrain, v.reward_mode, v.simulated) for i, v in VARIANTS.items()}
    assert table == {
        1: (False, None, True),
        2: (True, None, False),
        3: (False, "generic", False),
        4: (False, "solo", False),
        5: (True, "generic", False),
        6: (True, "solo", False),
    }


@pytest.mark.parametrize("vid", range(1, 7))
def test_make_transformer_matches_variant(vid, tiny_run):
    cfg = RunConfig.from_dict(tiny_run)
    tr = make_transformer(VARIANTS[vid], cfg, seed=0)
    v = VARIANTS[vid]
    if v.simulated:
        assert isinstance(tr, SimulatedStructureTransformer)
        return
    assert (tr.pretrain_config is not None) == v.pretrain
    assert (tr.finetune_config is not None) == (v.reward_mode is not None)
    if v.reward_mode:
        assert tr.reward.mode == v.reward_mode


def test_config_roundtrip_and_unknown_key(tiny_run):
    cfg = RunConfig.from_dict(tiny_run)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    tiny_run["pretrain"]["bogus"] = 1
    with pytest.raises(ConfigError, match="pretrain.bogus"):
        RunConfig.from_dict(tiny_run)


@pytest.mark.parametrize(
    "patch, needle",
    [({"diffusion": {"c": 3}}, "diffusion.c"), ({"split": {"ratios": [0.5, 0.2, 0.2]}}, "split.ratios"), ({"rl": {"n_timesteps": 50}}, "rl")],
)
def test_config_cross_field_errors(patch, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.from_dict({"diffusion": {"T": 8}, **patch} if "diffusion" not in patch else patch)


def test_history_seed_stable():
    h = events("s", [(0, 1), (2, 0)])
    assert history_seed(3, h) == history_seed(3, list(h))
    assert history_seed(3, h) != history_seed(4, h)
    assert history_seed(3, h) != history_seed(3, h[:1])


def test_simulated_transformer_rows(tiny_dataset):
    tr = SimulatedStructureTransformer().fit(tiny_dataset)
    rows = tr.transform([tiny_dataset.students["u0"][:4]])
    assert rows.shape == (1, 6)
    assert set(np.unique(rows)) <= {0.0, 1.0}


def fitted_generator(ds, **kw):
    gen = CognitiveStructureGenerator(
        diffusion=DiffusionConfig(T=8),
        denoiser=DenoiserConfig(hidden_dim=8, n_layers=1, guidance_dim=4),
        pretrain_config=PretrainConfig(batch_size=8, max_steps=5),
        **kw,
    )
    return gen.fit(ds)


def test_generator_transform_is_batch_independent(tiny_dataset):
    gen = fitted_generator(tiny_dataset, n_samples=2)
    hists = [tiny_dataset.students[s][:k] for s, k in [("u0", 3), ("u1", 5), ("u2", 2)]]
    together = gen.transform(hists)
    alone = gen.transform(hists[1:2])
    np.testing.assert_allclose(together[1], alone[0], rtol=0, atol=1e-12)
    assert together.shape == (3, 6)
    assert np.all((together >= 0) & (together <= 1))


def test_generator_discrete_rows(tiny_dataset):
    gen = fitted_generator(tiny_dataset, use_discrete=True)
    rows = gen.transform([tiny_dataset.students["u0"][:3]])
    assert set(np.unique(rows)) <= {0.0, 1.0}


def test_generator_rejects_empty_history(tiny_dataset):
    gen = fitted_generator(tiny_dataset)
    with pytest.raises(ValueError):
        gen.transform([[]])


def test_from_model_checks_schedule(tiny_dataset):
    gen = fitted_generator(tiny_dataset)
    with pytest.raises(ValueError):
        CognitiveStructureGenerator.from_model(gen.model_, DiffusionConfig(T=9))
    wrapped = CognitiveStructureGenerator.from_model(gen.model_, DiffusionConfig(T=8))
    h = [tiny_dataset.students["u3"][:4]]
    np.testing.assert_array_equal(wrapped.transform(h), gen.transform(h))


def test_fill_cache_only_missing(tiny_dataset):
    tr = SimulatedStructureTransformer().fit(tiny_dataset)
    cache = fill_cache(tr, tiny_dataset, [("u0", 1), ("u0", 2)], StructureCache())
    assert len(cache) == 2
    fill_cache(tr, tiny_dataset, [("u0", 2), ("u1", 1)], cache)
    assert len(cache) == 3


@pytest.mark.parametrize("vid", [1, 6])
def test_run_variant_deterministic(vid, tiny_run):
    cfg = RunConfig.from_dict(tiny_run)
    ds, _ = synth_generate(cfg.synth, cfg.seed)
    a = run_variant(ds, vid, cfg)
    b = run_variant(ds, vid, cfg)
    assert a.kt.to_json() == b.kt.to_json() and a.cd.to_json() == b.cd.to_json()
    assert a.kt.config["variant"] == vid


def test_planted_oracle_beats_chance():
    cfg = RunConfig()
    ds, planted = synth_generate(cfg.synth, 0)
    splits = split_dataset(ds, cfg.split.ratios, 0)
    rep = planted_oracle_report(planted, ds.qmatrix, splits)
    assert rep.auc > 0.8
