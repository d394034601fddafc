"""tpurify: gradient-sign adversarial training to robust overfitting, plus
single-step test-time pixel purification, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .attacks import AttackSpec, fgsm, pgd, sign
from .data import AugmentSpec, Dataset, augment, batch_iter, load_cifar10_bin, load_mnist_idx, make_synthetic_blobs
from .nn import Model, cross_entropy, forward_logits, input_gradient, mlp, predict_labels, smallcnn
from .purify import PurifierSpec, PurifyTrace, purify_batch, tpap_predict
from .tensor import Tensor, backward, finite_diff_grad
from .training import OverfitVerdict, TrainSpec, adversarial_train, lr_at, robust_overfit_check, sgd_step

__all__ = [
    "AttackSpec", "AugmentSpec", "Dataset", "Model", "OverfitVerdict", "PurifierSpec",
    "PurifyTrace", "Tensor", "TrainSpec", "adversarial_train", "augment", "backward",
    "batch_iter", "cross_entropy", "fgsm", "finite_diff_grad", "forward_logits",
    "input_gradient", "load_cifar10_bin", "load_mnist_idx", "lr_at", "make_synthetic_blobs",
    "mlp", "pgd", "predict_labels", "purify_batch", "robust_overfit_check", "sgd_step",
    "sign", "smallcnn", "tpap_predict",
]
