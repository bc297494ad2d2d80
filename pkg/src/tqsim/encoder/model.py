"""BERT-like post-LayerNorm encoder with named quantizer sites.

Every activation edge of the attention layer is a named site (13 per layer)
plus five global sites, so ``L=12`` gives the 161 activation quantizers of a
BERT-base-shaped graph. Weight matrices (including the embedding tables) are
weight sites named after their parameter. Biases and LayerNorm parameters are
not quantized.
"""

from dataclasses import dataclass, field

import numpy as np

from .. import nn

PAD_ID, CLS_ID, SEP_ID = 0, 1, 2

LAYER_SITES = (
    "attn.query", "attn.key", "attn.value", "attn.scores", "attn.probs", "attn.context",
    "attn.output", "attn.residual_sum", "attn.ln", "ffn.hidden", "ffn.output",
    "ffn.residual_sum", "ffn.ln",
)
GLOBAL_SITES_IN = ("embeddings.sum", "embeddings.ln")
GLOBAL_SITES_OUT = ("pooler.dense", "pooler.act", "output")
LAYER_WEIGHTS = ("attn.query", "attn.key", "attn.value", "attn.out", "ffn.in", "ffn.out")


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    d: int = 64
    heads: int = 4
    d_ff: int = 256
    max_len: int = 32
    vocab: int = 1000
    num_classes: int = 2

    def __post_init__(self):
        for name in ("num_layers", "d", "heads", "d_ff", "max_len", "vocab", "num_classes"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be positive")
        if self.d % self.heads:
            raise EncoderError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def head_dim(self):
        return self.d // self.heads

    def to_dict(self):
        return dict(self.__dict__)


def activation_sites(config):
    names = list(GLOBAL_SITES_IN)
    for layer in range(config.num_layers):
        names += [f"layer.{layer}.{s}" for s in LAYER_SITES]
    return names + list(GLOBAL_SITES_OUT)


def weight_sites(config):
    names = ["embeddings.token", "embeddings.position"]
    for layer in range(config.num_layers):
        names += [f"layer.{layer}.{w}.weight" for w in LAYER_WEIGHTS]
    return names + ["pooler.weight", "classifier.weight"]


def is_weight_site(name):
    return name.endswith(".weight") or name in ("embeddings.token", "embeddings.position")


def init_params(config, rng):
    d, dff = config.d, config.d_ff
    p = {
        "embeddings.token": rng.standard_normal((config.vocab, d)),
        "embeddings.position": rng.standard_normal((config.max_len, d)),
        "embeddings.ln.gamma": np.ones(d),
        "embeddings.ln.beta": np.zeros(d),
    }

    def lin(name, d_out, d_in):
        p[f"{name}.weight"] = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        p[f"{name}.bias"] = np.zeros(d_out)

    for layer in range(config.num_layers):
        pre = f"layer.{layer}."
        for w in ("attn.query", "attn.key", "attn.value", "attn.out"):
            lin(pre + w, d, d)
        lin(pre + "ffn.in", dff, d)
        lin(pre + "ffn.out", d, dff)
        for ln in ("attn.ln", "ffn.ln"):
            p[pre + ln + ".gamma"] = np.ones(d)
            p[pre + ln + ".beta"] = np.zeros(d)
    lin("pooler", d, d)
    lin("classifier", config.num_classes, d)
    return p


@dataclass
class ForwardResult:
    logits: np.ndarray
    hidden: np.ndarray
    sites: dict = None
    quantized_sites: dict = None
    cache: dict = field(default=None, repr=False)


class Encoder:
    """Parameters plus forward/backward passes.

    ``quant`` (optional) is a quantizer object with ``act(name, x, valid)``,
    ``weight(name, w)``, ``act_backward(name, dy, x)`` and
    ``weight_backward(name, dw, w)``; see :class:`tqsim.encoder.sim.QuantState`.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        missing = set(init_params_shapes(config)) - set(self.params)
        if missing:
            raise EncoderError(f"missing parameters: {sorted(missing)[:5]}")
        for k, shape in init_params_shapes(config).items():
            if self.params[k].shape != shape:
                raise EncoderError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    @classmethod
    def init(cls, config, seed=0):
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def copy(self):
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- forward -----------------------------------------------------------

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise EncoderError(f"tokens must be (B, T), got shape {tokens.shape}")
        if tokens.shape[1] > self.config.max_len:
            raise EncoderError(f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise EncoderError("token id out of vocabulary range")
        if np.any(tokens != np.round(tokens)):
            raise EncoderError("token ids must be integers")
        return tokens.astype(np.int64)

    def forward(self, tokens, quant=None, record=False, cache=False, pad_id=PAD_ID):
        cfg = self.config
        tokens = self._check_tokens(tokens)
        B, T = tokens.shape
        H, dh = cfg.heads, cfg.head_dim
        P = self.params
        sites = {} if record else None
        qsites = {} if (record and quant is not None) else None
        c = {"site_in": {}, "tokens": tokens} if cache else None

        def A(name, x, valid=None):
            if record:
                sites[name] = x
            if c is not None:
                c["site_in"][name] = x
            if quant is None:
                return x
            y = quant.act(name, x, valid)
            if qsites is not None:
                qsites[name] = y
            return y

        def W(name):
            w = P[name]
            return w if quant is None else quant.weight(name, w)

        key_valid = tokens != pad_id  # (B, T)
        key_valid[:, 0] = True
        score_valid = np.broadcast_to(key_valid[:, None, None, :], (B, H, T, T))

        E, Pos = W("embeddings.token"), W("embeddings.position")
        x = A("embeddings.sum", E[tokens] + Pos[:T])
        h = A("embeddings.ln", nn.layer_norm(x, P["embeddings.ln.gamma"], P["embeddings.ln.beta"]))
        if c is not None:
            c["emb_sum_q"] = x
            c["W"] = {}
            c["layers"] = []

        def lin(name, inp):
            w = W(name + ".weight")
            if c is not None:
                c["W"][name + ".weight"] = w
            return nn.linear(inp, w, P[name + ".bias"])

        for layer in range(cfg.num_layers):
            pre = f"layer.{layer}."
            h_in = h
            q = A(pre + "attn.query", lin(pre + "attn.query", h_in))
            k = A(pre + "attn.key", lin(pre + "attn.key", h_in))
            v = A(pre + "attn.value", lin(pre + "attn.value", h_in))
            qh, kh, vh = (t.reshape(B, T, H, dh).transpose(0, 2, 1, 3) for t in (q, k, v))
            scores = A(pre + "attn.scores", qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh), score_valid)
            probs = A(pre + "attn.probs", nn.softmax(np.where(score_valid, scores, -np.inf)))
            ctx = A(pre + "attn.context", (probs @ vh).transpose(0, 2, 1, 3).reshape(B, T, cfg.d))
            a = A(pre + "attn.output", lin(pre + "attn.out", ctx))
            s1 = A(pre + "attn.residual_sum", h_in + a)
            h1 = A(pre + "attn.ln", nn.layer_norm(s1, P[pre + "attn.ln.gamma"], P[pre + "attn.ln.beta"]))
            u = lin(pre + "ffn.in", h1)
            g = A(pre + "ffn.hidden", nn.gelu(u))
            f = A(pre + "ffn.output", lin(pre + "ffn.out", g))
            s2 = A(pre + "ffn.residual_sum", h1 + f)
            h = A(pre + "ffn.ln", nn.layer_norm(s2, P[pre + "ffn.ln.gamma"], P[pre + "ffn.ln.beta"]))
            if c is not None:
                c["layers"].append(dict(h_in=h_in, qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx,
                                        s1=s1, h1=h1, u=u, g=g, s2=s2, valid=score_valid))
        hidden = h
        cls_vec = h[:, 0]
        pd = A("pooler.dense", lin("pooler", cls_vec))
        pa = A("pooler.act", np.tanh(pd))
        logits = A("output", lin("classifier", pa))
        if c is not None:
            c.update(cls=cls_vec, pd=pd, pa=pa)
        return ForwardResult(logits, hidden, sites, qsites, c)

    # -- backward ----------------------------------------------------------

    def backward(self, cache, dlogits, quant=None):
        """Gradients of a scalar loss given ``dlogits``.

        Returns ``(param_grads, scale_grads)``; ``scale_grads`` maps quantizer
        site names to scale gradients (empty without ``quant``).
        """
        cfg = self.config
        P = self.params
        B, T = cache["tokens"].shape
        H, hd = cfg.heads, cfg.head_dim
        sin = cache["site_in"]
        Wq = cache["W"]
        grads = {k: np.zeros_like(v) for k, v in P.items()}
        wgrads = {}
        sgrads = {}

        def Ab(name, dy):
            if quant is None:
                return dy
            dx, ds = quant.act_backward(name, dy, sin[name])
            if ds is not None:
                sgrads[name] = ds
            return dx

        def lin_b(name, dy, inp):
            w = Wq[name + ".weight"]
            dx, dw, db = nn.linear_backward(dy, inp, w)
            wgrads[name + ".weight"] = wgrads.get(name + ".weight", 0) + dw
            grads[name + ".bias"] += db
            return dx

        dy = Ab("output", dlogits)
        dpa = Ab("pooler.act", lin_b("classifier", dy, cache["pa"]))
        dpd = Ab("pooler.dense", dpa * (1.0 - sin["pooler.act"] ** 2))
        dcls = lin_b("pooler", dpd, cache["cls"])
        dh = np.zeros((B, T, cfg.d))
        dh[:, 0] = dcls

        for layer in reversed(range(cfg.num_layers)):
            pre = f"layer.{layer}."
            lc = cache["layers"][layer]
            d_ln2 = Ab(pre + "ffn.ln", dh)
            ds2, dg2, db2 = nn.layer_norm_backward(d_ln2, lc["s2"], P[pre + "ffn.ln.gamma"])
            grads[pre + "ffn.ln.gamma"] += dg2
            grads[pre + "ffn.ln.beta"] += db2
            ds2 = Ab(pre + "ffn.residual_sum", ds2)
            dh1 = ds2.copy()
            df = Ab(pre + "ffn.output", ds2)
            dg = Ab(pre + "ffn.hidden", lin_b(pre + "ffn.out", df, lc["g"]))
            du = nn.gelu_backward(dg, lc["u"])
            dh1 += lin_b(pre + "ffn.in", du, lc["h1"])
            d_ln1 = Ab(pre + "attn.ln", dh1)
            ds1, dg1, db1 = nn.layer_norm_backward(d_ln1, lc["s1"], P[pre + "attn.ln.gamma"])
            grads[pre + "attn.ln.gamma"] += dg1
            grads[pre + "attn.ln.beta"] += db1
            ds1 = Ab(pre + "attn.residual_sum", ds1)
            dh_in = ds1.copy()
            da = Ab(pre + "attn.output", ds1)
            dctx = Ab(pre + "attn.context", lin_b(pre + "attn.out", da, lc["ctx"]))
            dctxh = dctx.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            probs_q = lc["probs"]
            dprobs_q = dctxh @ lc["vh"].transpose(0, 1, 3, 2)
            dvh = probs_q.transpose(0, 1, 3, 2) @ dctxh
            dprobs = Ab(pre + "attn.probs", dprobs_q)
            dscores = nn.softmax_backward(dprobs, sin[pre + "attn.probs"])
            dscores = np.where(lc["valid"], dscores, 0.0)
            dscores = Ab(pre + "attn.scores", dscores)
            scale = 1.0 / np.sqrt(hd)
            dqh = dscores @ lc["kh"] * scale
            dkh = dscores.transpose(0, 1, 3, 2) @ lc["qh"] * scale

            def merge(t):
                return t.transpose(0, 2, 1, 3).reshape(B, T, cfg.d)

            for nm, dt in (("attn.query", dqh), ("attn.key", dkh), ("attn.value", dvh)):
                dh_in = dh_in + lin_b(pre + nm, Ab(pre + nm, merge(dt)), lc["h_in"])
            dh = dh_in

        d_eln = Ab("embeddings.ln", dh)
        dx, dge, dbe = nn.layer_norm_backward(d_eln, cache["emb_sum_q"], P["embeddings.ln.gamma"])
        grads["embeddings.ln.gamma"] += dge
        grads["embeddings.ln.beta"] += dbe
        demb = Ab("embeddings.sum", dx)
        d_tok = np.zeros_like(P["embeddings.token"])
        np.add.at(d_tok, cache["tokens"], demb)
        d_pos = np.zeros_like(P["embeddings.position"])
        d_pos[:T] = demb.sum(axis=0)
        wgrads["embeddings.token"] = d_tok
        wgrads["embeddings.position"] = d_pos

        for name, dw in wgrads.items():
            if quant is None:
                grads[name] += dw
            else:
                dw_in, ds = quant.weight_backward(name, dw, P[name])
                grads[name] += dw_in
                if ds is not None:
                    sgrads[name] = ds
        return grads, sgrads


def init_params_shapes(config):
    d, dff = config.d, config.d_ff
    shapes = {"embeddings.token": (config.vocab, d), "embeddings.position": (config.max_len, d),
              "embeddings.ln.gamma": (d,), "embeddings.ln.beta": (d,),
              "pooler.weight": (d, d), "pooler.bias": (d,),
              "classifier.weight": (config.num_classes, d), "classifier.bias": (config.num_classes,)}
    for layer in range(config.num_layers):
        pre = f"layer.{layer}."
        for w in ("attn.query", "attn.key", "attn.value", "attn.out"):
            shapes[pre + w + ".weight"] = (d, d)
            shapes[pre + w + ".bias"] = (d,)
        shapes[pre + "ffn.in.weight"] = (dff, d)
        shapes[pre + "ffn.in.bias"] = (dff,)
        shapes[pre + "ffn.out.weight"] = (d, dff)
        shapes[pre + "ffn.out.bias"] = (d,)
        for ln in ("attn.ln", "ffn.ln"):
            shapes[pre + ln + ".gamma"] = (d,)
            shapes[pre + ln + ".beta"] = (d,)
    return shapes
