"""Calibration and fake-quantized simulation of the encoder."""

import re

import numpy as np

from ..estimators import RangeEstimator
from ..peg import GroupSpec, build_range_permutation
from ..quant import PerEmbedding, PerEmbeddingGroup, PerTensor, fake_quantize, \
    fake_quantize_backward
from .model import activation_sites, is_weight_site, weight_sites
from .qconfig import ConfigError

_FFN_FAMILY = re.compile(r"^layer\.(\d+)\.(attn\.ln|ffn\.output|ffn\.residual_sum)$")


class NotCalibratedError(RuntimeError):
    pass


class QuantState:
    """Finalized quantizer parameters for every enabled site.

    Acts as the quantizer hook of :meth:`Encoder.forward`. Sites disabled in
    the config pass through untouched, so an all-disabled state reproduces the
    FP32 forward bit for bit.
    """

    def __init__(self, qconfig, params, specs=None, grad_scale=False):
        self.qconfig = qconfig
        self.params = dict(params)
        self.specs = dict(specs or {})
        self.grad_scale = grad_scale

    def _params_for(self, name):
        if not self.qconfig.enabled(name):
            return None
        try:
            return self.params[name]
        except KeyError:
            raise NotCalibratedError(f"site {name!r} is enabled but has no finalized range") from None

    def check_ready(self, encoder_config):
        for s in activation_sites(encoder_config) + weight_sites(encoder_config):
            self._params_for(s)

    def act(self, name, x, valid=None):
        p = self._params_for(name)
        return x if p is None else fake_quantize(x, p)

    weight = act

    def act_backward(self, name, dy, x):
        p = self._params_for(name)
        if p is None:
            return dy, None
        return fake_quantize_backward(dy, x, p, self.grad_scale)

    weight_backward = act_backward

    def to_dict(self):
        return {"config": self.qconfig.to_dict(),
                "params": {k: v.to_dict() for k, v in sorted(self.params.items())}}


class _Observer:
    """Forward hook feeding FP32 site tensors into range estimators."""

    def __init__(self, qconfig, specs):
        self.qconfig = qconfig
        self.specs = specs
        self.estimators = {}

    def _estimator(self, name, d):
        est = self.estimators.get(name)
        if est is None:
            st = self.qconfig.settings(name)
            est = RangeEstimator(st.estimator, granularity_for(st, name, d, self.specs),
                                 momentum=st.momentum, grid_points=st.grid_points)
            self.estimators[name] = est
        return est

    def act(self, name, x, valid=None):
        st = self.qconfig.settings(name)
        if st.enabled:
            est = self._estimator(name, x.shape[-1])
            if valid is not None and st.granularity == "tensor":
                est.observe(x[valid])
            else:
                est.observe(x)
        return x

    def weight(self, name, w):
        return w


class _Recorder:
    def __init__(self, names):
        self.names = set(names)
        self.seen = {n: [] for n in names}

    def act(self, name, x, valid=None):
        if name in self.names:
            self.seen[name].append(x.reshape(1, -1, x.shape[-1]))
        return x

    def weight(self, name, w):
        return w


def granularity_for(settings, name, d, specs):
    if settings.granularity == "tensor":
        return PerTensor()
    if settings.granularity == "embedding":
        return PerEmbedding(d)
    spec = specs.get(name)
    if spec is None:
        raise ConfigError(f"site {name!r} uses per-embedding-group granularity but has no group spec")
    if spec.d != d:
        raise ConfigError(f"group spec for {name!r} has d={spec.d}, tensor has {d}")
    return PerEmbeddingGroup(spec)


def plan_peg(model, qconfig, batches):
    """Group specs for every activation site configured with ``granularity="peg"``.

    The FFN input, output and residual sum of one layer share a single
    permutation derived from the FFN output's calibration ranges; any other
    grouped site is permuted by its own ranges.
    """
    wanted = {}
    for s in activation_sites(model.config):
        st = qconfig.settings(s)
        if st.enabled and st.granularity == "peg":
            m = _FFN_FAMILY.match(s)
            source = f"layer.{m.group(1)}.ffn.output" if m else s
            wanted[s] = (source, st.k, st.permute)
    if not wanted:
        return {}
    rec = _Recorder({src for src, _, _ in wanted.values()})
    for tokens in batches:
        model.forward(tokens, quant=rec)
    cache = {}
    specs = {}
    for s, (src, k, permute) in wanted.items():
        if (src, k, permute) not in cache:
            data = np.concatenate(rec.seen[src], axis=1)
            d = data.shape[-1]
            if d % k:
                raise ConfigError(f"K={k} does not divide d={d} at site {s!r}")
            cache[(src, k, permute)] = build_range_permutation(data, k) if permute \
                else GroupSpec.identity(d, k)
        specs[s] = cache[(src, k, permute)]
    return specs


def calibrate(model, qconfig, batches, specs=None, grad_scale=False):
    """Static ranges from FP32 forwards over ``batches`` (token arrays)."""
    batches = list(batches)
    if not batches:
        raise ConfigError("calibration needs at least one batch")
    if specs is None:
        specs = plan_peg(model, qconfig, batches)
    obs = _Observer(qconfig, specs)
    for tokens in batches:
        model.forward(tokens, quant=obs)
    params = {}
    for name, est in obs.estimators.items():
        st = qconfig.settings(name)
        params[name] = est.finalize(st.bits, st.symmetric)
    for name in weight_sites(model.config):
        st = qconfig.settings(name)
        if st.enabled:
            w = model.params[name]
            est = RangeEstimator(st.estimator, granularity_for(st, name, w.shape[-1], specs),
                                 momentum=st.momentum, grid_points=st.grid_points)
            params[name] = est.observe(w).finalize(st.bits, st.symmetric)
    return QuantState(qconfig, params, specs, grad_scale)


def forward_quantized(model, tokens, state, record=False):
    state.check_ready(model.config)
    return model.forward(tokens, quant=state, record=record)


def predict_logits(model, tokens, state=None, batch_size=256):
    tokens = np.asarray(tokens)
    if state is not None:
        state.check_ready(model.config)
    out = [model.forward(tokens[i:i + batch_size], quant=state).logits
           for i in range(0, len(tokens), batch_size)]
    return np.concatenate(out, axis=0)


def accuracy(model, tokens, labels, state=None):
    return float(np.mean(predict_logits(model, tokens, state).argmax(axis=-1) == np.asarray(labels)))


def site_errors(model, tokens, state):
    """Mean squared fake-quantization error per enabled activation site."""
    res = forward_quantized(model, tokens, state, record=True)
    return {name: float(np.mean((res.quantized_sites[name] - x) ** 2))
            for name, x in res.sites.items() if state.qconfig.enabled(name)}


__all__ = ["QuantState", "NotCalibratedError", "calibrate", "plan_peg", "forward_quantized",
           "predict_logits", "accuracy", "site_errors", "granularity_for", "is_weight_site"]
