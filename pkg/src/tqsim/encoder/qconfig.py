"""Per-site quantization settings and mixed-precision policies.

A :class:`QuantConfig` holds default settings for weight and activation sites
plus explicit per-site overrides. It is immutable: every edit returns a new
config. Serialized as JSON with a ``version`` key.
"""

import fnmatch
import json
from dataclasses import dataclass, field, replace

from ..estimators import CURRENT_MINMAX, KINDS, MSE
from ..quant import ALLOWED_BITS
from .model import activation_sites, is_weight_site, weight_sites

CONFIG_VERSION = 1
GRANULARITIES = ("tensor", "embedding", "peg")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SiteSettings:
    bits: int = 8
    estimator: str = CURRENT_MINMAX
    symmetric: bool = False
    granularity: str = "tensor"
    k: int = 1
    permute: bool = True
    momentum: float = 0.9
    grid_points: int = 100
    enabled: bool = True

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise ConfigError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.estimator not in KINDS:
            raise ConfigError(f"estimator must be one of {KINDS}, got {self.estimator!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.grid_points < 1:
            raise ConfigError("grid_points must be >= 1")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("site settings must be a JSON object")
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown site setting keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


DISABLED = SiteSettings(enabled=False)


@dataclass(frozen=True)
class QuantConfig:
    weights: SiteSettings = None
    activations: SiteSettings = None
    sites: dict = field(default_factory=dict)
    backup: dict = field(default_factory=dict)

    @classmethod
    def uniform(cls, w_bits=8, a_bits=8, w_estimator=CURRENT_MINMAX, a_estimator=CURRENT_MINMAX):
        """W{w_bits}A{a_bits}; ``None`` disables the respective family."""
        w = DISABLED if w_bits is None else SiteSettings(w_bits, w_estimator, symmetric=True)
        a = DISABLED if a_bits is None else SiteSettings(a_bits, a_estimator, symmetric=False)
        return cls(w, a)

    @classmethod
    def fp32(cls):
        return cls(DISABLED, DISABLED)

    def settings(self, site):
        if site in self.sites:
            return self.sites[site]
        default = self.weights if is_weight_site(site) else self.activations
        if default is None:
            raise ConfigError(f"no settings for site {site!r} and no default")
        return default

    def enabled(self, site):
        return self.settings(site).enabled

    def with_sites(self, updates):
        """New config with ``updates`` (site -> SiteSettings) applied."""
        merged = dict(self.sites)
        merged.update(updates)
        return replace(self, sites=merged)

    def with_patterns(self, patterns, all_sites, **changes):
        """Apply ``changes`` to the current settings of every site matching a glob."""
        hits = match_sites(patterns, all_sites)
        return self.with_sites({s: replace(self.settings(s), **changes) for s in hits})

    def to_dict(self):
        return {
            "version": CONFIG_VERSION,
            "weights": None if self.weights is None else self.weights.to_dict(),
            "activations": None if self.activations is None else self.activations.to_dict(),
            "sites": {k: v.to_dict() for k, v in sorted(self.sites.items())},
            "backup": {k: None if v is None else v.to_dict() for k, v in sorted(self.backup.items())},
        }

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        if obj.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {obj.get('version')!r}")

        def opt(v):
            return None if v is None else SiteSettings.from_dict(v)

        return cls(opt(obj.get("weights")), opt(obj.get("activations")),
                   {k: SiteSettings.from_dict(v) for k, v in obj.get("sites", {}).items()},
                   {k: opt(v) for k, v in obj.get("backup", {}).items()})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)


def all_sites(config):
    return activation_sites(config) + weight_sites(config)


def match_sites(patterns, sites):
    if isinstance(patterns, str):
        patterns = [patterns]
    return [s for s in sites if any(fnmatch.fnmatchcase(s, p) for p in patterns)]


# -- mixed precision ---------------------------------------------------------

MP_POLICIES = {
    "ffn_residual_sum": (["layer.*.ffn.residual_sum"], {}),
    "ffn_input_output": (["layer.*.attn.ln", "layer.*.ffn.output"], {}),
    "final_output": (["output"], {"estimator": MSE}),
}


def assign_mixed_precision(qconfig, policy, encoder_config, bits=16):
    """Promote the sites selected by ``policy`` to ``bits``.

    ``policy`` is a policy name from :data:`MP_POLICIES`, a glob pattern or a
    list of either. The settings replaced are kept so
    :func:`revert_mixed_precision` restores the original config exactly.
    """
    names = [policy] if isinstance(policy, str) else list(policy)
    sites = all_sites(encoder_config)
    cfg = qconfig
    for name in names:
        patterns, extra = MP_POLICIES.get(name, ([name], {}))
        hits = match_sites(patterns, sites)
        if not hits:
            raise ConfigError(f"mixed-precision policy {name!r} matches no site")
        backup = dict(cfg.backup)
        for s in hits:
            backup.setdefault(s, cfg.sites.get(s))
        cfg = replace(cfg.with_patterns(patterns, sites, bits=bits, **extra), backup=backup)
    return cfg


def revert_mixed_precision(qconfig):
    sites = dict(qconfig.sites)
    for s, prev in qconfig.backup.items():
        if prev is None:
            sites.pop(s, None)
        else:
            sites[s] = prev
    return replace(qconfig, sites=sites, backup={})


def promoted_fraction(qconfig, encoder_config, bits=16):
    """Fraction of enabled activation quantizers running at ``bits``."""
    acts = activation_sites(encoder_config)
    chosen = [s for s in acts if qconfig.enabled(s) and qconfig.settings(s).bits == bits]
    return len(chosen) / len(acts)


# -- leave-one-out ablation ----------------------------------------------------

ABLATION_GROUPS = {
    "softmax input": ["layer.*.attn.scores"],
    "sum of embeddings": ["embeddings.sum"],
    "self-attention output": ["layer.*.attn.output"],
    "softmax output": ["layer.*.attn.probs"],
    "residual connections after FFN": ["layer.*.ffn.residual_sum"],
}


def leave_one_out_ablation(qconfig, groups, evaluate, encoder_config):
    """Score with every group of sites left in FP32, one group at a time.

    ``groups`` is a list of names from :data:`ABLATION_GROUPS` or a mapping
    label -> glob patterns. ``evaluate(qconfig) -> float`` (higher is
    better). Returns rows ``(label, score)``: the unmodified baseline first,
    then groups ranked by descending score (ties by label).
    """
    if not isinstance(groups, dict):
        unknown = [g for g in groups if g not in ABLATION_GROUPS]
        if unknown:
            raise ConfigError(f"unknown ablation group(s) {unknown}; known: {sorted(ABLATION_GROUPS)}")
        groups = {g: ABLATION_GROUPS[g] for g in groups}
    sites = all_sites(encoder_config)
    rows = []
    for label, patterns in groups.items():
        if not match_sites(patterns, sites):
            raise ConfigError(f"ablation group {label!r} matches no site")
        rows.append((label, float(evaluate(qconfig.with_patterns(patterns, sites, enabled=False)))))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return [("none (all quantized)", float(evaluate(qconfig)))] + rows
