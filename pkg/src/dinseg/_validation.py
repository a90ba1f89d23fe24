"""Input validation helpers shared by the functional API and the estimators."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


def check_label_map(y, n_classes: int | None = None, name: str = "label map") -> np.ndarray:
    """Return ``y`` as a C-contiguous int64 array with 2 or 3 dims.

    Raises ``ValueError`` for negative values or values above ``n_classes``.
    """
    arr = np.asarray(y)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"{name} must be 2D or 3D, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError(f"{name} must hold integer class ids")
    elif arr.dtype.kind not in "iub":
        raise ValueError(f"{name} must be an integer array, got dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    if arr.size and arr.min() < 0:
        pos = tuple(int(v) for v in np.argwhere(arr < 0)[0])
        raise ValueError(f"{name} has a negative value at {pos}")
    if n_classes is not None and arr.size and arr.max() > n_classes:
        pos = tuple(int(v) for v in np.argwhere(arr > n_classes)[0])
        raise ValueError(
            f"{name} has value {int(arr[pos])} at {pos}, above the class count {n_classes}"
        )
    return arr


def check_image(x, name: str = "image") -> np.ndarray:
    """Grayscale image as a float64 array with 2 or 3 spatial dims."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"{name} must be 2D or 3D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_image_stack(X) -> list[np.ndarray]:
    """Accept an (n, *spatial) array or a sequence of same-ndim images."""
    if isinstance(X, np.ndarray) and X.ndim in (3, 4) and X.dtype != object:
        items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError("need at least one image")
    out = [check_image(x, name=f"image {i}") for i, x in enumerate(items)]
    if len({x.ndim for x in out}) != 1:
        raise ShapeError("images mix 2D and 3D inputs")
    return out


def check_pairs(X, y, n_classes: int | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    images = check_image_stack(X)
    labels = [check_label_map(t, n_classes, name=f"label map {i}") for i, t in enumerate(y)]
    if len(images) != len(labels):
        raise ValueError(f"got {len(images)} images but {len(labels)} label maps")
    for i, (a, b) in enumerate(zip(images, labels)):
        if a.shape != b.shape:
            raise ShapeError(f"sample {i}: image shape {a.shape} != label shape {b.shape}")
    return images, labels


def check_binary_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool, copy=False)
    b = np.asarray(b).astype(bool, copy=False)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b
