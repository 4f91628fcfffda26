from .net import ToyNet
from .perturb import PERTURB_KINDS, perturb
from .scenes import SceneDataset, generate_scenes
from .training import MODES, TrainResult, predict_dump, train, train_step

__all__ = ["ToyNet", "perturb", "PERTURB_KINDS", "SceneDataset", "generate_scenes",
           "MODES", "TrainResult", "predict_dump", "train", "train_step"]
