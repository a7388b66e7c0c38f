"""Structure generators as scikit-learn transformers, run configuration and the ablation variants."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import InteractionDataset, PlantedStructures, QMatrix, SynthConfig, planted_probability, split_dataset
from .denoiser import Denoiser, DenoiserConfig, checkpoint_hash
from .diffusion import DiffusionConfig, make_schedule, sample_batch
from .downstream import (
    EvalReport,
    HeadConfig,
    StructureCache,
    prediction_targets,
    required_contexts,
    train_cd,
    train_kt,
)
from .pretrain import PretrainConfig, pretrain
from .rl import RewardConfig, RLConfig, finetune
from .simulate import build_pretrain_corpus, discretize, simulate_structure
from .structures import CognitiveStructure, symmetrize_upper

logger = logging.getLogger(__name__)


def history_seed(seed: int, history) -> int:
    """Stable per-context seed so a structure does not depend on batch composition."""
    h = hashlib.sha256(str(int(seed)).encode())
    for e in history:
        h.update(f"|{e.question_id},{e.response},{e.position}".encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def _marginal_structure(node_p: np.ndarray, edge_p: np.ndarray) -> CognitiveStructure:
    L = node_p.shape[0]
    return CognitiveStructure(node_p, symmetrize_upper(edge_p, L))


def _rows_to_structures(rows: np.ndarray, L: int) -> list[CognitiveStructure]:
    return [_marginal_structure(r[:L], r[L:]) for r in rows]


class SimulatedStructureTransformer(TransformerMixin, BaseEstimator):
    """Rule-based structures, discretized, as 0/1 marginal rows ``[nodes, upper edges]``."""

    def __init__(self, threshold=0.5, mode="deterministic", seed=0):
        self.threshold = threshold
        self.mode = mode
        self.seed = seed

    def fit(self, X: InteractionDataset, y=None):
        if X.qmatrix is None:
            raise ValueError("dataset needs a Q-matrix")
        self.qmatrix_ = X.qmatrix
        self.n_concepts_ = X.qmatrix.n_concepts
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "qmatrix_")
        rows = []
        for hist in X:
            rng = np.random.default_rng(history_seed(self.seed, hist))
            g = discretize(simulate_structure(hist, self.qmatrix_), self.threshold, self.mode, rng)
            rows.append(np.concatenate([g.node_states, g.edges_upper()]).astype(np.float64))
        return np.vstack(rows) if rows else np.zeros((0, 0))


class CognitiveStructureGenerator(TransformerMixin, BaseEstimator):
    """Diffusion generator of structures conditioned on interaction histories.

    ``fit`` pretrains on simulated structures of the given dataset (unless
    ``pretrain_config`` is None) and then fine-tunes with rewards (unless
    ``finetune_config`` is None). ``transform`` maps histories to rows of
    constructed-state marginals from the last denoising step, averaged over
    ``n_samples`` chains; ``use_discrete`` returns the sampled states instead.
    """

    def __init__(
        self,
        diffusion=None,
        denoiser=None,
        pretrain_config=None,
        finetune_config=None,
        reward=None,
        corpus_stride=5,
        threshold=0.5,
        n_samples=1,
        use_discrete=False,
        batch_size=256,
        seed=0,
    ):
        self.diffusion = diffusion
        self.denoiser = denoiser
        self.pretrain_config = pretrain_config
        self.finetune_config = finetune_config
        self.reward = reward
        self.corpus_stride = corpus_stride
        self.threshold = threshold
        self.n_samples = n_samples
        self.use_discrete = use_discrete
        self.batch_size = batch_size
        self.seed = seed

    def _configs(self):
        return (
            self.diffusion or DiffusionConfig(),
            self.denoiser or DenoiserConfig(),
        )

    def fit(self, X: InteractionDataset, y=None):
        if X.qmatrix is None:
            raise ValueError("dataset needs a Q-matrix")
        dcfg, ncfg = self._configs()
        dcfg.validate()
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        L, M = X.qmatrix.n_concepts, X.qmatrix.n_questions
        model = Denoiser(ncfg, L, M, dcfg.c, dcfg.T, seed=self.seed)
        self.pretrain_log_ = None
        self.reward_log_ = None
        if self.pretrain_config is not None:
            corpus = build_pretrain_corpus(X, stride=self.corpus_stride, threshold=self.threshold)
            pcfg = dataclasses.replace(self.pretrain_config, seed=self.seed)
            model, self.pretrain_log_ = pretrain(corpus, dcfg, ncfg, pcfg, M, model)
        if self.finetune_config is not None:
            rlcfg = dataclasses.replace(self.finetune_config, seed=self.seed)
            model, self.reward_log_ = finetune(model, X, dcfg, rlcfg, self.reward or RewardConfig())
        self.model_ = model
        self.n_concepts_ = L
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        dcfg, _ = self._configs()
        sched = make_schedule(dcfg)
        histories = [list(h) for h in X]
        if any(len(h) == 0 for h in histories):
            raise ValueError("every history must be non-empty")
        out = []
        for start in range(0, len(histories), self.batch_size):
            chunk = histories[start : start + self.batch_size]
            acc = None
            for s in range(self.n_samples):
                seeds = [history_seed(self.seed * 1_000_003 + s, h) for h in chunk]
                trajs = sample_batch(self.model_.sampler(), chunk, self.n_concepts_, sched, seeds, None, dcfg.c)
                if self.use_discrete:
                    rows = np.stack(
                        [np.concatenate([tr.final.node_states, tr.final.edges_upper()]) for tr in trajs]
                    ).astype(np.float64)
                else:
                    rows = np.stack(
                        [np.concatenate([1.0 - tr.final_node_probs[:, 0], 1.0 - tr.final_edge_probs[:, 0]]) for tr in trajs]
                    )
                acc = rows if acc is None else acc + rows
            out.append(acc / self.n_samples)
        return np.vstack(out) if out else np.zeros((0, 0))

    @classmethod
    def from_model(cls, model: Denoiser, diffusion: DiffusionConfig, **params) -> "CognitiveStructureGenerator":
        """Wrap an already trained denoiser without refitting."""
        if diffusion.T != model.T or diffusion.c != model.c:
            raise ValueError(f"model was trained with T={model.T}, c={model.c}")
        gen = cls(diffusion=diffusion, denoiser=model.cfg, **params)
        gen.model_ = model
        gen.n_concepts_ = model.n_concepts
        gen.pretrain_log_ = gen.reward_log_ = None
        return gen

    def checkpoint_tag(self) -> str:
        check_is_fitted(self, "model_")
        return checkpoint_hash(self.model_)


def fill_cache(transformer, train: InteractionDataset, contexts, cache: StructureCache) -> StructureCache:
    """Generate structures for ``(student_id, prefix_len)`` contexts missing from ``cache``."""
    todo = [c for c in contexts if c not in cache]
    if todo:
        histories = [train.students[sid][:k] for sid, k in todo]
        rows = transformer.transform(histories)
        L = train.qmatrix.n_concepts
        for (sid, k), cs in zip(todo, _rows_to_structures(rows, L)):
            cache.put(sid, k, cs)
    return cache


# -- variants ----------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    id: int
    pretrain: bool
    reward_mode: str | None  # None: no fine-tuning
    simulated: bool = False


VARIANTS = {
    1: Variant(1, False, None, simulated=True),
    2: Variant(2, True, None),
    3: Variant(3, False, "generic"),
    4: Variant(4, False, "solo"),
    5: Variant(5, True, "generic"),
    6: Variant(6, True, "solo"),
}


@dataclass
class SplitConfig:
    ratios: tuple = (0.8, 0.1, 0.1)
    corpus_stride: int = 5
    threshold: float = 0.5


@dataclass
class RunConfig:
    """Every tunable of a run in one document; ``from_dict`` rejects unknown keys."""

    seed: int = 0
    out_dir: str = "runs"
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    kt: HeadConfig = field(default_factory=HeadConfig)
    cd: HeadConfig = field(default_factory=HeadConfig)
    n_samples: int = 1
    use_discrete: bool = False

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = _from_dict(cls, data, "")
        cfg.validate()
        return cfg

    def validate(self):
        for name in ("synth", "diffusion", "denoiser", "pretrain", "reward"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        try:
            self.rl.validate(self.diffusion.T)
        except ValueError as exc:
            raise ConfigError(f"rl: {exc}") from exc
        if self.diffusion.c != 2:
            raise ConfigError("diffusion.c: simulated structures are binary, so c must be 2")
        if len(self.split.ratios) != 3 or abs(sum(self.split.ratios) - 1.0) > 1e-9:
            raise ConfigError("split.ratios: need three ratios summing to 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples: must be >= 1")


class ConfigError(ValueError):
    pass


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _from_dict(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key {path!r}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING else fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value, path + ".")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def make_transformer(variant: Variant, cfg: RunConfig, seed: int):
    if variant.simulated:
        return SimulatedStructureTransformer(cfg.split.threshold, seed=seed)
    reward = dataclasses.replace(cfg.reward, mode=variant.reward_mode) if variant.reward_mode else cfg.reward
    return CognitiveStructureGenerator(
        diffusion=cfg.diffusion,
        denoiser=cfg.denoiser,
        pretrain_config=cfg.pretrain if variant.pretrain else None,
        finetune_config=cfg.rl if variant.reward_mode else None,
        reward=reward,
        corpus_stride=cfg.split.corpus_stride,
        threshold=cfg.split.threshold,
        n_samples=cfg.n_samples,
        use_discrete=cfg.use_discrete,
        seed=seed,
    )


@dataclass
class VariantResult:
    variant: int
    kt: EvalReport
    cd: EvalReport
    transformer: object = None
    cache: StructureCache | None = None


def all_contexts(splits) -> list[tuple[str, int]]:
    train = splits[0]
    targets = [t for s in splits for t in prediction_targets(train, s)]
    return required_contexts(targets)


def run_variant(ds: InteractionDataset, variant_id: int, cfg: RunConfig, seed: int | None = None, splits=None, cache_dir=None):
    """Fit the structure source on the train split, then train and evaluate both heads."""
    seed = cfg.seed if seed is None else seed
    variant = VARIANTS[variant_id]
    splits = splits or split_dataset(ds, cfg.split.ratios, seed)
    train = splits[0]
    transformer = make_transformer(variant, cfg, seed).fit(train)
    tag = f"v{variant_id}" if variant.simulated else transformer.checkpoint_tag()
    cache = fill_cache(transformer, train, all_contexts(splits), StructureCache(cache_dir, tag, seed))
    kt_cfg = dataclasses.replace(cfg.kt, seed=seed)
    cd_cfg = dataclasses.replace(cfg.cd, seed=seed)
    _, kt_report = train_kt(splits, cache, kt_cfg, ds.qmatrix.n_questions)
    _, cd_report = train_cd(splits, cache, cd_cfg, ds.qmatrix.weights)
    kt_report.config["variant"] = cd_report.config["variant"] = variant_id
    return VariantResult(variant_id, kt_report, cd_report, transformer, cache)


def planted_oracle_report(planted: PlantedStructures, qm: QMatrix, splits) -> EvalReport:
    """Upper bound: score the test targets with the true generating probabilities."""
    train, _, test = splits
    targets = prediction_targets(train, test)
    preds = [planted_probability(planted, qm, t.student_id, t) for t in targets]
    labels = [t.response for t in targets]
    return EvalReport.from_predictions(np.array(preds), np.array(labels), {"source": "planted"})
