"""Input validation and small training helpers shared by the estimators."""

import math

import numpy as np
import torch
from sklearn.utils.validation import check_array


def check_payloads(X):
    """Validate a payload batch.

    Numeric payloads become a finite 2-D float64 array; sequences of paths
    (for image backends) and 4-D pixel tensors pass through untouched.
    """
    if isinstance(X, torch.Tensor) and X.ndim == 4:
        return X
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], str):
        return list(X)
    return check_array(X, dtype=np.float64, ensure_2d=True)


def check_semi_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be a 1-D array of length {n}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("y must hold integer class ids (-1 for unlabeled)")
        y = y.astype(np.int64)
    if (y < -1).any():
        raise ValueError("y may only contain class ids >= 0 or -1 for unlabeled")
    return y.astype(np.int64)


def cosine_lr_lambda(total_steps):
    """Multiplier for ``LambdaLR``: cosine decay from 1 to 0 over ``total_steps``."""
    total = max(int(total_steps), 1)

    def factor(step):
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))

    return factor


def torch_generator(seed):
    return torch.Generator().manual_seed(int(seed))
