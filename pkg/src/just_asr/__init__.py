"""Single-stage self-supervised plus RNN-T training for toy multilingual speech recognition.

A numpy reverse-mode autodiff engine drives a conv + Conformer encoder that
is trained with contrastive, masked-prediction and codebook-diversity
self-supervision alongside an RNN-T loss.
"""

from .config import Config, ConfigError, build_config
from .data import Corpus, SynthConfig, Vocabulary, load_manifest, synth_corpus
from .evaluation import EvalReport, evaluate, sweep_beta, sweep_checkpoints, wer
from .model import JustModel
from .trainer import TrainState, lr_at, train

__all__ = [
    "Config", "ConfigError", "build_config",
    "Corpus", "SynthConfig", "Vocabulary", "load_manifest", "synth_corpus",
    "EvalReport", "evaluate", "sweep_beta", "sweep_checkpoints", "wer",
    "JustModel",
    "TrainState", "lr_at", "train",
]
__version__ = "0.1.0"
