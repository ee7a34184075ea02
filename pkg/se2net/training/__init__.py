"""
Training: the optimizer, losses, augmentation, datasets and the training
loop. The names most callers need are re-exported here.
"""

from se2net.training.datasets import Dataset, load_splits, synth_dataset, write_synth
from se2net.training.trainer import TrainConfig, class_weights_for, evaluate, score, train
