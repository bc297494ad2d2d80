"""Static range estimation for post-training quantization.

Three estimators: current min-max (last batch only), running min-max
(exponential moving average of batch min/max) and MSE (grid search over
shrunken clipping ranges minimizing reconstruction error).
"""

import numpy as np

from .quant import PerTensor, QParams, VectorQParams, fake_quantize, params_from_range, \
    vector_params_from_range

CURRENT_MINMAX = "current_minmax"
RUNNING_MINMAX = "running_minmax"
MSE = "mse"
KINDS = (CURRENT_MINMAX, RUNNING_MINMAX, MSE)


class EstimatorError(ValueError):
    pass


def slot_min_max(t, granularity):
    """Reduce ``t`` to per-parameter-slot (min, max) arrays of length ``granularity.size()``."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise EstimatorError("cannot observe an empty tensor")
    if isinstance(granularity, PerTensor):
        return np.array([t.min()]), np.array([t.max()])
    if t.ndim < 1:
        raise EstimatorError("per-embedding granularity needs a last dimension")
    d = t.shape[-1]
    try:
        idx = granularity.param_index(d)
    except ValueError as exc:
        raise EstimatorError(str(exc)) from exc
    flat = t.reshape(-1, d)
    dmin, dmax = flat.min(axis=0), flat.max(axis=0)
    k = granularity.size()
    lo = np.full(k, np.inf)
    hi = np.full(k, -np.inf)
    np.minimum.at(lo, idx, dmin)
    np.maximum.at(hi, idx, dmax)
    return lo, hi


class RangeEstimator:
    """Accumulates observations for one quantizer and turns them into QParams.

    ``kind`` is one of ``"current_minmax"``, ``"running_minmax"`` or ``"mse"``.
    The MSE search evaluates ``grid_points`` clipping ranges
    ``[alpha*min, alpha*max]`` with ``alpha`` linearly spaced over
    ``[alpha_min, 1]`` and keeps the first minimizer of the summed squared
    error over all stored calibration data.
    """

    def __init__(self, kind=CURRENT_MINMAX, granularity=None, momentum=0.9,
                 grid_points=100, alpha_min=0.1, max_elements=2 ** 24):
        if kind not in KINDS:
            raise EstimatorError(f"unknown estimator {kind!r}; expected one of {KINDS}")
        if not 0.0 <= momentum < 1.0:
            raise EstimatorError(f"momentum must lie in [0, 1), got {momentum}")
        if grid_points < 1:
            raise EstimatorError("grid_points must be >= 1")
        self.kind = kind
        self.granularity = granularity if granularity is not None else PerTensor()
        self.momentum = float(momentum)
        self.grid_points = int(grid_points)
        self.alpha_min = float(alpha_min)
        self.max_elements = int(max_elements)
        self.lo = None
        self.hi = None
        self.observed_batches = 0
        self._stored = []
        self._stored_elements = 0
        self.alpha_ = None

    def observe(self, t):
        lo, hi = slot_min_max(t, self.granularity)
        if self.kind == RUNNING_MINMAX and self.lo is not None:
            m = self.momentum
            self.lo = m * self.lo + (1.0 - m) * lo
            self.hi = m * self.hi + (1.0 - m) * hi
        elif self.kind == MSE and self.lo is not None:
            self.lo = np.minimum(self.lo, lo)
            self.hi = np.maximum(self.hi, hi)
        else:
            self.lo, self.hi = lo, hi
        if self.kind == MSE:
            t = np.asarray(t, dtype=np.float64)
            if self._stored_elements + t.size > self.max_elements:
                raise EstimatorError(
                    f"MSE estimator cap of {self.max_elements} stored elements exceeded")
            d = 1 if isinstance(self.granularity, PerTensor) else t.shape[-1]
            self._stored.append(np.array(t).reshape(-1, d))
            self._stored_elements += t.size
        self.observed_batches += 1
        return self

    def finalize(self, bits, symmetric=False):
        if self.observed_batches == 0:
            raise EstimatorError("finalize called before any observation")
        lo, hi = self.lo, self.hi
        if self.kind == MSE:
            alphas = self._mse_search(bits, symmetric)
            self.alpha_ = alphas
            lo, hi = alphas * lo, alphas * hi
        if isinstance(self.granularity, PerTensor):
            return params_from_range(lo[0], hi[0], bits, symmetric)
        return vector_params_from_range(lo, hi, bits, symmetric, self.granularity)

    def candidates(self):
        return np.linspace(self.alpha_min, 1.0, self.grid_points)

    def _mse_search(self, bits, symmetric):
        data = np.concatenate(self._stored, axis=0)
        alphas = self.candidates()
        k = self.granularity.size()
        if isinstance(self.granularity, PerTensor):
            slots = [data.ravel()]
        else:
            idx = self.granularity.param_index(data.shape[-1])
            slots = [data[:, idx == g].ravel() for g in range(k)]
        best = np.empty(k)
        for g, x in enumerate(slots):
            errs = [_sq_error(x, params_from_range(a * self.lo[g], a * self.hi[g], bits, symmetric))
                    for a in alphas]
            best[g] = alphas[int(np.argmin(errs))]
        return best


def _sq_error(x, p):
    return float(np.sum((x - fake_quantize(x, p)) ** 2))


def estimate(batches, bits, symmetric=False, kind=CURRENT_MINMAX, granularity=None, **kwargs):
    """Observe every batch in order and finalize."""
    est = RangeEstimator(kind, granularity, **kwargs)
    for b in batches:
        est.observe(b)
    return est.finalize(bits, symmetric)


__all__ = ["RangeEstimator", "EstimatorError", "estimate", "slot_min_max",
           "CURRENT_MINMAX", "RUNNING_MINMAX", "MSE", "KINDS", "QParams", "VectorQParams"]
