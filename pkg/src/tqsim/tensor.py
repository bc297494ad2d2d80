"""Dense tensor helpers.

Tensors are plain row-major numpy arrays. Activations use the ``(B, T, d)``
convention and weights ``(d_out, d_in)``. Computation happens in float64;
serialization (see :mod:`tqsim.io`) stores float32.
"""

import math

import numpy as np


class TensorError(ValueError):
    pass


def as_tensor(data, shape=None):
    """Validate and return a C-contiguous float64 array.

    Rejects empty extents and non-finite values.
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise TensorError(f"all extents must be >= 1, got {shape}")
        if arr.size != math.prod(shape):
            raise TensorError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim > 0 and any(s < 1 for s in arr.shape):
        raise TensorError(f"all extents must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TensorError("tensor contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def min_max(t):
    t = np.asarray(t)
    if t.size == 0:
        raise TensorError("min_max of an empty tensor")
    return float(t.min()), float(t.max())


def per_embedding_min_max(t):
    """Per-embedding-dimension (min, max) of a rank-3 ``(B, T, d)`` tensor.

    Component ``j`` reduces over all ``B*T`` positions of dimension ``j``.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise TensorError(f"expected rank-3 (B, T, d) tensor, got rank {t.ndim}")
    flat = t.reshape(-1, t.shape[-1])
    return flat.min(axis=0), flat.max(axis=0)


def mean_std(t):
    """Population mean and standard deviation (divide by n), in float64."""
    t = np.asarray(t, dtype=np.float64)
    if t.size < 2:
        raise TensorError("mean_std needs at least 2 elements")
    mean = t.mean()
    return float(mean), float(np.sqrt(np.mean((t - mean) ** 2)))


def split(t, sections, axis):
    """Split along ``axis`` into pieces of the given sizes."""
    bounds = np.cumsum(sections)[:-1]
    return np.split(np.asarray(t), bounds, axis=axis)


def concat(pieces, axis):
    return np.ascontiguousarray(np.concatenate(pieces, axis=axis))
