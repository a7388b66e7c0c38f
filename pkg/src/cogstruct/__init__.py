"""Generate student cognitive structures with a discrete graph diffusion model."""
from .dataset import InteractionDataset, InteractionEvent, QMatrix, SynthConfig, load_interactions, load_qmatrix, split_dataset, synth_generate
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .diffusion import DiffusionConfig, make_schedule, sample, sample_batch
from .downstream import EvalReport, HeadConfig, StructureCDClassifier, StructureKTClassifier, train_cd, train_kt
from .pipeline import VARIANTS, CognitiveStructureGenerator, RunConfig, SimulatedStructureTransformer, run_variant
from .pretrain import PretrainConfig, pretrain
from .rl import RewardConfig, RLConfig, finetune
from .simulate import build_pretrain_corpus, simulate_structure
from .structures import CognitiveStructure, DiscreteStructure

__version__ = "0.1.0"
