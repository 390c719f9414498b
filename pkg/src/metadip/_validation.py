import numpy as np
from sklearn.utils.validation import check_array

from .errors import DimensionError


def check_images(X, *, allow_out_of_range=False) -> np.ndarray:
    """Validate a batch of images, returning a float64 (N, H, W, C) array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise DimensionError(f"expected a batch of images (N, H, W, C), got shape {X.shape}")
    if X.shape[3] not in (1, 3):
        raise DimensionError(f"images must have 1 or 3 channels, got {X.shape[3]}")
    if not allow_out_of_range and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("clean images must lie in [0, 1]")
    return X
