from . import autodiff
from .autodiff import Gradients, Tape, Var
from .kernels import Pca2Result, l1_normalize, masked_softmax, pca2, sigmoid
from .tensorio import load_tensors, read_tensor, save_tensors, write_tensor


def backward(tape, seed_node, seed_grad=None):
    """Gradients of ``seed_node`` w.r.t. every leaf of ``tape``."""
    return tape.backward(seed_node, seed_grad)


__all__ = [
    "Gradients", "Pca2Result", "Tape", "Var", "autodiff", "backward", "l1_normalize",
    "load_tensors", "masked_softmax", "pca2", "read_tensor", "save_tensors", "sigmoid",
    "write_tensor",
]
