"""Input checks for nested bag collections, in the spirit of sklearn's check_array."""

import numpy as np

from .exceptions import DimensionError, StructureError
from .model import BagLayout, as_layout


def check_bags(X, levels=None, input_dim=None):
    """Convert a collection of nested bags to validated :class:`BagLayout` objects.

    Each element of ``X`` may be a ``BagLayout``, an object with a
    ``layout()`` method, or nested lists ending in 2-D instance arrays. All
    samples must share one depth and one instance dimension, and every value
    must be finite.
    """
    if isinstance(X, np.ndarray) and X.dtype != object:
        raise StructureError("X must be a sequence of bags, not a numeric array")
    layouts = [as_layout(x) for x in X]
    if not layouts:
        raise StructureError("X contains no bags")
    levels = layouts[0].levels if levels is None else levels
    input_dim = layouts[0].instances.shape[1] if input_dim is None else input_dim
    for i, lay in enumerate(layouts):
        try:
            lay.validate(levels, input_dim)
        except (StructureError, DimensionError) as exc:
            raise type(exc)(f"bag {i}: {exc}") from None
        if not np.all(np.isfinite(lay.instances)):
            raise ValueError(f"bag {i} contains NaN or infinite values")
    return layouts


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    classes = np.unique(y)
    if not np.isin(classes, [0, 1]).all():
        raise ValueError(f"labels must be 0/1, got {classes.tolist()}")
    return y.astype(np.int64)
