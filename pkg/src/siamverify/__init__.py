"""Label-free face verification with a siamese CNN trained on mined pairs."""
from .embeddings import EmbeddingStore, EmbeddingVector, cosine, read_store, write_store
from .encoder import EncoderConfig, HeadConfig, ModelParams, params_init, params_load, params_save
from .estimators import CNNEmbedder, PairMiner, SiameseVerifier, SupervisedBaseline
from .evaluation import EvalReport, TrialSet, build_trials, compute_eer, kfold_accuracy
from .mining import MiningConfig, PairSet, TrainingPair, mine, mine_negatives, mine_positives
from .trainer import TrainConfig, TrainLog, lr_schedule, train_baseline, train_siamese

__version__ = "0.1.0"

__all__ = [
    "CNNEmbedder", "EmbeddingStore", "EmbeddingVector", "EncoderConfig", "EvalReport", "HeadConfig",
    "MiningConfig", "ModelParams", "PairMiner", "PairSet", "SiameseVerifier", "SupervisedBaseline",
    "TrainConfig", "TrainLog", "TrainingPair", "TrialSet", "build_trials", "compute_eer", "cosine",
    "kfold_accuracy", "lr_schedule", "mine", "mine_negatives", "mine_positives", "params_init",
    "params_load", "params_save", "read_store", "train_baseline", "train_siamese", "write_store",
]
