"""Interference-network adversarial robustness lab at desk scale."""

from .attacks import AdversarialExample, AttackConfig, attack_gradient, fgsm, pgd
from .autodiff import Tensor, backward, grad_check
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import DESK_EPSILONS, DESK_FINETUNE, DESK_PRETRAIN, ExperimentConfig, from_preset
from .datasets import DatasetHandle, load_digits, read_cifar_binary, read_idx
from .ensemble import ClassDistribution, RobustnessCurve, defended_predict, evaluate, robustness_curve
from .interference import (
    Background,
    InterferenceConfig,
    NoiseRealization,
    apply_interference,
    decode_label,
    encode_label,
    generate_backgrounds,
)
from .models import SmallConvNet, SnapshotSet, TrainConfig, finetune_inn, pretrain, transfer_expand

__version__ = "0.1.0"
