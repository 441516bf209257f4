"""Distil an ensemble of teacher classifiers into one student network.

The numerical core is a small reverse-mode autodiff engine over numpy arrays;
everything else (networks, losses, discriminators, training) is built on it.
"""

from meal.autodiff import Node, Tape, grad_check
from meal.data import Dataset, SyntheticSpec, gen_synthetic
from meal.network import BlockNetwork, NetworkSpec, error_rate, forward, init_network, simple_spec
from meal.trainer import (MealConfig, TeacherZoo, build_zoo, meal_train, pretrain_teacher,
                          run_ablation, traditional_ensemble_error)

__version__ = "0.1.0"

__all__ = [
    "BlockNetwork", "Dataset", "MealConfig", "NetworkSpec", "Node", "SyntheticSpec", "Tape",
    "TeacherZoo", "build_zoo", "error_rate", "forward", "gen_synthetic", "grad_check",
    "init_network", "meal_train", "pretrain_teacher", "run_ablation", "simple_spec",
    "traditional_ensemble_error",
]
