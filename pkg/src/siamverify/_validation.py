"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, input_shape=None, name="X"):
    """Validate an image batch ``(n, H, W, C)`` with finite values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], input_name=name)
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n_samples, height, width, channels), got {X.shape}")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(f"{name} images have shape {X.shape[1:]}, expected {tuple(input_shape)}")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError(f"{name} pixel values must lie in [0, 1]")
    return X


def check_pair_images(X, input_shape=None, name="X"):
    """Validate pair batches shaped ``(n, 2, H, W, C)``; returns (first, second)."""
    X = np.asarray(X)
    if X.ndim != 5 or X.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n_pairs, 2, height, width, channels), got {X.shape}")
    flat = check_images(X.reshape((-1,) + X.shape[2:]), input_shape, name)
    flat = flat.reshape(X.shape)
    return flat[:, 0], flat[:, 1]


def check_binary_labels(y, n):
    y = np.asarray(y).ravel()
    if y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got {y.shape[0]}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)
