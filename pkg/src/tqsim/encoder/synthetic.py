"""Synthetic co-occurrence task and planted structured outliers."""

import numpy as np

from .model import CLS_ID, PAD_ID, SEP_ID, Encoder, EncoderConfig, EncoderError

TOKEN_A, TOKEN_B = 3, 4
FIRST_REGULAR = 5


def make_cooccurrence_task(n, seq_len, vocab, seed=0, min_len=None):
    """``[CLS] body [SEP] [PAD]*``; label 1 iff tokens A and B both occur in the body.

    Classes are balanced. Negatives contain neither, only A, or only B with
    equal probability so a single-token detector cannot solve the task.
    ``min_len`` < ``seq_len`` enables random padding.
    """
    if seq_len < 4:
        raise EncoderError("seq_len must be >= 4")
    if vocab <= FIRST_REGULAR:
        raise EncoderError(f"vocab must exceed {FIRST_REGULAR}")
    rng = np.random.default_rng(seed)
    min_len = seq_len if min_len is None else max(4, min_len)
    tokens = np.full((n, seq_len), PAD_ID, dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    rng.shuffle(labels)
    for i in range(n):
        length = int(rng.integers(min_len, seq_len + 1))
        body = rng.integers(FIRST_REGULAR, vocab, size=length - 2)
        if labels[i]:
            put = (TOKEN_A, TOKEN_B)
        else:
            put = ((), (TOKEN_A,), (TOKEN_B,))[int(rng.integers(3))]
        if put:
            pos = rng.choice(length - 2, size=len(put), replace=False)
            body[pos] = put
        tokens[i, 0] = CLS_ID
        tokens[i, 1:length - 1] = body
        tokens[i, length - 1] = SEP_ID
    return tokens, labels


def inject_outlier_model(model, outlier_dims, magnitude, calib_tokens=None, layer=-1,
                         sharpness=8.0, seed=0):
    """Copy of ``model`` whose FFN output in ``layer`` carries outliers at [SEP].

    ``model`` may also be an :class:`EncoderConfig`, in which case a randomly
    initialized encoder (``seed``) is used. Without ``calib_tokens`` a batch of
    synthetic-task sequences drives the construction.

    One hidden unit of that FFN is rewired into a [SEP] detector: its input
    weights project the FFN input on a least-squares direction separating
    [SEP] positions from all others, and its output weights write ``magnitude`` times the
    largest bulk FFN-output magnitude into ``outlier_dims`` with alternating
    signs. The unit with the smallest contribution is the one sacrificed.
    """
    if isinstance(model, EncoderConfig):
        model = Encoder.init(model, seed=seed)
    cfg = model.config
    layer = layer % cfg.num_layers
    if calib_tokens is None:
        calib_tokens, _ = make_cooccurrence_task(256, cfg.max_len, cfg.vocab, seed=seed + 1)
    dims = np.asarray(outlier_dims, dtype=np.int64)
    if dims.size == 0 or dims.min() < 0 or dims.max() >= cfg.d or len(set(dims.tolist())) != dims.size:
        raise EncoderError(f"outlier dims must be distinct indices in [0, {cfg.d})")
    if magnitude <= 0:
        raise EncoderError("magnitude must be positive")
    calib_tokens = np.asarray(calib_tokens)
    res = model.forward(calib_tokens, record=True)
    pre = f"layer.{layer}."
    X = res.sites[pre + "attn.ln"]
    F = res.sites[pre + "ffn.output"]
    G = res.sites[pre + "ffn.hidden"]
    sep = calib_tokens == SEP_ID
    if not sep.any() or sep.all():
        raise EncoderError("calibration tokens must contain [SEP] and other positions")
    # least-squares discriminant of [SEP] vs the rest, balanced by class weight
    flat, is_sep = X.reshape(-1, cfg.d), sep.reshape(-1)
    w = np.where(is_sep, 0.5 / is_sep.sum(), 0.5 / (~is_sep).sum())
    design = np.hstack([flat, np.ones((len(flat), 1))]) * np.sqrt(w)[:, None]
    coef = np.linalg.lstsq(design, np.where(is_sep, 1.0, -1.0) * np.sqrt(w), rcond=None)[0]
    direction = coef[:-1]
    proj_sep, proj_other = X[sep] @ direction, X[~sep] @ direction
    lo_sep, hi_other = proj_sep.min(), proj_other.max()
    if lo_sep <= hi_other:
        raise EncoderError("[SEP] positions are not linearly separable at this layer")
    thresh = 0.5 * (lo_sep + hi_other)
    alpha = sharpness / (0.5 * (lo_sep - hi_other))

    w2 = model.params[pre + "ffn.out.weight"]
    importance = np.abs(G).reshape(-1, G.shape[-1]).mean(axis=0) * np.linalg.norm(w2, axis=0)
    unit = int(np.argmin(importance))
    act_sep = alpha * (proj_sep - thresh)
    target = magnitude * np.abs(F[~sep]).max()
    signs = np.where(np.arange(dims.size) % 2 == 0, 1.0, -1.0)

    out = model.copy()
    p = out.params
    p[pre + "ffn.in.weight"][unit] = alpha * direction
    p[pre + "ffn.in.bias"][unit] = -alpha * thresh
    p[pre + "ffn.out.weight"][:, unit] = 0.0
    p[pre + "ffn.out.weight"][dims, unit] = signs * target / act_sep.mean()
    return out


def attention_mass_on_token(model, tokens, token_index, state=None):
    """Mean attention probability (over queries and sequences) on key position ``token_index``.

    Returns an ``(L, H)`` array.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if not 0 <= token_index < tokens.shape[1]:
        raise EncoderError(f"token_index {token_index} outside [0, {tokens.shape[1]})")
    res = model.forward(tokens, quant=state, record=True)
    out = np.zeros((model.config.num_layers, model.config.heads))
    for layer in range(model.config.num_layers):
        probs = res.sites[f"layer.{layer}.attn.probs"]
        out[layer] = probs[..., token_index].mean(axis=(0, 2))
    return out


def train_task_model(config, n_train=2048, steps=600, batch_size=32, lr=2e-3, seed=0):
    """FP32 model trained on the co-occurrence task; returns (model, losses)."""
    from .train import fit

    tokens, labels = make_cooccurrence_task(n_train, config.max_len, config.vocab, seed=seed)
    model = Encoder.init(config, seed=seed)
    losses = fit(model, tokens, labels, steps, batch_size=batch_size, lr=lr, seed=seed)
    return model, losses
