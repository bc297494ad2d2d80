"""FP32 training and quantization-aware training (STE + learned scales)."""

import logging

import numpy as np

from .. import nn

log = logging.getLogger(__name__)

MIN_SCALE = 1e-8


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}
        self._children = {}

    def child(self, key):
        """Independent optimizer state (same hyperparameters) for another parameter family."""
        if key not in self._children:
            self._children[key] = Adam(self.lr, (self.b1, self.b2), self.eps)
        return self._children[key]

    def step(self, params, grads, lr=None):
        """In-place update of the arrays in ``params`` (name -> ndarray)."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def warmup_linear_decay(step, total, warmup_frac=0.1):
    """LR multiplier: linear ramp over the first ``warmup_frac`` of steps, then linear decay to 0."""
    warm = max(1, int(round(total * warmup_frac)))
    if step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


def _check_loss(loss, step, where):
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} at step {step} ({where})")


def train_step(model, tokens, labels, optimizer, lr=None, step=0):
    res = model.forward(tokens, cache=True)
    loss, dlogits = nn.cross_entropy(res.logits, labels)
    _check_loss(loss, step, "fp32")
    grads, _ = model.backward(res.cache, dlogits)
    optimizer.step(model.params, grads, lr)
    return loss


def qat_train_step(model, tokens, labels, state, optimizer, lr=None, step=0,
                   learn_scales=True, scale_lr=None):
    """One STE step: weights and (optionally) quantizer scales are updated.

    Zero-points stay fixed. Scale gradients use the learned-step-size rule and
    are applied to ``log(scale)`` so one Adam step is a relative change;
    ``scale_lr`` defaults to ``lr``.
    """
    res = model.forward(tokens, quant=state, cache=True)
    loss, dlogits = nn.cross_entropy(res.logits, labels)
    if not np.isfinite(loss):
        bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
        raise FloatingPointError(f"non-finite QAT loss {loss} at step {step}; "
                                 f"non-finite params: {bad[:5]}")
    grads, sgrads = model.backward(res.cache, dlogits, quant=state)
    optimizer.step(model.params, grads, lr)
    if learn_scales and sgrads:
        log_s, g_log, old = {}, {}, {}
        for name, g in sgrads.items():
            s = np.atleast_1d(np.asarray(state.params[name].scale, dtype=np.float64))
            old[name] = s
            log_s[name] = np.log(s)
            g_log[name] = np.atleast_1d(np.asarray(g, dtype=np.float64)) * s
        start = {k: v.copy() for k, v in log_s.items()}
        optimizer.child("log_scale").step(log_s, g_log, scale_lr if scale_lr is not None else lr)
        for name, arr in log_s.items():
            p = state.params[name]
            # multiplicative update keeps the scale bit-identical when the step is zero
            new = np.maximum(old[name] * np.exp(arr - start[name]), MIN_SCALE)
            if not np.all(np.isfinite(new)):
                raise FloatingPointError(f"non-finite scale for site {name!r} at step {step}")
            state.params[name] = p.with_scale(float(new[0]) if np.ndim(p.scale) == 0 else new)
    return loss


def iterate_minibatches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


def fit(model, tokens, labels, steps, batch_size=32, lr=1e-3, seed=0, state=None,
        learn_scales=True, scale_lr=None, log_every=0):
    """Train for ``steps`` minibatch steps (FP32 if ``state`` is None, else QAT)."""
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    batches = iterate_minibatches(len(tokens), min(batch_size, len(tokens)), rng)
    losses = []
    for step in range(steps):
        idx = next(batches)
        cur = lr * warmup_linear_decay(step, steps)
        if state is None:
            loss = train_step(model, tokens[idx], labels[idx], opt, cur, step)
        else:
            cur_s = None if scale_lr is None else scale_lr * warmup_linear_decay(step, steps)
            loss = qat_train_step(model, tokens[idx], labels[idx], state, opt, cur, step,
                                  learn_scales=learn_scales, scale_lr=cur_s)
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    return losses
