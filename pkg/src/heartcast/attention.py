"""Attention preprocessors mapping ``[B, S, F, T]`` tensors to the same shape.

Every mechanism is shared across stations: the station and batch axes are
folded into one row axis ``N`` before any learned map is applied.  Internally
the residual-bearing variants all run the same block on a tensor laid out as
``[G, N, D]``, where ``D`` is the axis attention normalises over (time, or
features for the channel variant) and ``G`` indexes parameter groups (one per
feature, or a single shared group).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor_core import Tensor


class Variant(str, enum.Enum):
    OATT = "OAtt"
    ATT = "Att"
    TATT = "TAtt"
    CATT = "CAtt"
    TCATT = "TCAtt"
    MATT = "MAtt"
    NLATT = "NLAtt"
    DENSE = "Dense"
    NONE = "NoAttention"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "").replace("_", "").replace(":", "").strip().lower()
        for v in cls:
            if key in (v.value.lower(), v.label.replace("-", "").lower()):
                return v
        if key in ("none", "baseline", "noatt"):
            return cls.NONE
        raise ContractError(f"unknown attention variant {name!r}")


_LABELS = {
    Variant.OATT: "O-Att", Variant.ATT: "Att", Variant.TATT: "T-Att",
    Variant.CATT: "C-Att", Variant.TCATT: "TC-Att", Variant.MATT: "M-Att",
    Variant.NLATT: "NL-Att", Variant.DENSE: "Dense", Variant.NONE: "NoAttention",
}

RESIDUAL_VARIANTS = (Variant.OATT, Variant.ATT, Variant.TATT, Variant.CATT,
                     Variant.TCATT, Variant.MATT, Variant.NLATT)
PER_FEATURE_VARIANTS = (Variant.OATT, Variant.ATT, Variant.MATT)
SHARED_AXIS_VARIANTS = (Variant.TATT, Variant.CATT, Variant.TCATT)

PRE_ENCODER = "pre_encoder"
BETWEEN_ENCODER_DECODER = "between_encoder_decoder"
PLACEMENTS = (PRE_ENCODER, BETWEEN_ENCODER_DECODER)


@dataclass(frozen=True)
class AttentionConfig:
    variant: Variant = Variant.NONE
    heads: int = 1
    depth: int = 1
    dropout_weights: float = 0.1
    dropout_output: float = 0.1
    nl_embed_dim: int = 8
    placement: str = PRE_ENCODER

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.heads < 1 or self.depth < 1:
            raise ConfigurationError("heads and depth must be >= 1")
        if self.nl_embed_dim < 1:
            raise ConfigurationError("nl_embed_dim must be >= 1")
        for rate in (self.dropout_weights, self.dropout_output):
            if not 0.0 <= rate < 1.0:
                raise ConfigurationError(f"dropout rate {rate} outside [0, 1)")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"placement must be one of {PLACEMENTS}")

    @property
    def label(self) -> str:
        """Row label in the style ``Att: H=4, L=2``."""
        if self.variant is Variant.NONE:
            return "NoAttention"
        return f"{self.variant.label}: H={self.heads}, L={self.depth}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttentionConfig":
        return cls(**dict(d))

    def with_(self, **changes) -> "AttentionConfig":
        return replace(self, **changes)


# -- building blocks --------------------------------------------------------

def qkv_stack_forward(x, weights, biases) -> Tensor:
    """Dense layers over the last axis with ReLU between layers, none after the last.

    ``weights[l]`` is ``[..., out, in]`` and ``biases[l]`` broadcasts against
    the output; leading axes broadcast against ``x``.
    """
    x = tc.as_tensor(x)
    if x.ndim == 1:
        h = tc.dense_stack(tc.reshape(x, (1, x.shape[0])), weights, biases)
        return tc.reshape(h, (h.shape[-1],))
    return tc.dense_stack(x, weights, biases)


def _swap_last(w: Tensor) -> Tensor:
    axes = list(range(w.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tc.transpose(w, tuple(axes))


def attention_logits(q, k, c=1.0) -> Tensor:
    """``c * tanh(q * k)`` with a component-wise product; bounded by ``|c|``."""
    q, k = tc.as_tensor(q), tc.as_tensor(k)
    if q.shape != k.shape:
        raise DimensionError(f"query {q.shape} and key {k.shape} differ")
    logits = tc.tanh_elem(tc.mul(q, k))
    if not (isinstance(c, (int, float)) and c == 1.0):
        logits = tc.mul(logits, c)
    return logits


def attention_weights(q, k, c=1.0, axis: int = -1) -> Tensor:
    """``softmax(c * tanh(q * k))`` along ``axis``."""
    return tc.softmax(attention_logits(q, k, c), axis=axis)


def _stack(z, p, name, depth):
    return qkv_stack_forward(z, [p[f"{name}.w{i}"] for i in range(depth)],
                             [p[f"{name}.b{i}"] for i in range(depth)])


def _gated_block(z, p, prefix, cfg, rng, mode, *, learn_c, mock, trace):
    """Head assembly on ``z`` laid out ``[G, N, D]``; returns the same layout."""
    g, n, d = z.shape
    z4 = tc.reshape(z, (1, g, n, d))
    v = _stack(z4, p, prefix + "v", cfg.depth)
    if mock:
        heads = tc.dropout(v, cfg.dropout_weights, mode, rng)
    else:
        q = _stack(z4, p, prefix + "q", cfg.depth)
        k = _stack(z4, p, prefix + "k", cfg.depth)
        logits = attention_logits(q, k, p[prefix + "c"] if learn_c else 1.0)
        a = tc.softmax(logits, axis=-1)
        if trace is not None:
            trace.setdefault("logits", []).append((prefix, logits.data))
            trace.setdefault("weights", []).append((prefix, a.data))
        heads = tc.mul(tc.dropout(a, cfg.dropout_weights, mode, rng), v)
    combined = tc.mean(heads, axis=0)
    combined = tc.dropout(combined, cfg.dropout_output, mode, rng)
    normed = tc.layer_norm(combined, p[prefix + "ln_gamma"], p[prefix + "ln_beta"])
    return tc.add(z, tc.mul(normed, p[prefix + "alpha"]))


def _params(params: Mapping) -> dict[str, Tensor]:
    return {k: tc.as_tensor(v) for k, v in params.items()}


def _batched(x) -> tuple[Tensor, bool]:
    x = tc.as_tensor(x)
    if x.ndim == 3:
        return tc.reshape(x, (1, *x.shape)), True
    if x.ndim != 4:
        raise DimensionError(f"attention input must be [S,F,T] or [B,S,F,T], got {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return tc.reshape(y, y.shape[1:]) if squeeze else y


def _feature_major(x: Tensor) -> Tensor:
    b, s, f, t = x.shape
    return tc.reshape(tc.transpose(x, (2, 0, 1, 3)), (f, b * s, t))


def _from_feature_major(z: Tensor, b: int, s: int) -> Tensor:
    f, _, t = z.shape
    return tc.transpose(tc.reshape(z, (f, b, s, t)), (1, 2, 0, 3))


# -- variants ---------------------------------------------------------------

def per_feature_attention_forward(x, config: AttentionConfig, params, rng=None, mode="eval", trace=None) -> Tensor:
    """O-Att, Att and M-Att: one mechanism per feature over the time axis."""
    if config.variant not in PER_FEATURE_VARIANTS:
        raise ContractError(f"{config.variant.label} is not a per-feature variant")
    x, squeeze = _batched(x)
    b, s, _, _ = x.shape
    p = _params(params)
    z = _gated_block(_feature_major(x), p, "", config, rng, mode,
                     learn_c=config.variant is Variant.OATT,
                     mock=config.variant is Variant.MATT, trace=trace)
    return _unbatched(_from_feature_major(z, b, s), squeeze)


def _time_shared(x: Tensor, p, prefix, config, rng, mode, trace) -> Tensor:
    b, s, f, t = x.shape
    z = tc.reshape(x, (1, b * s * f, t))
    z = _gated_block(z, p, prefix, config, rng, mode, learn_c=False, mock=False, trace=trace)
    return tc.reshape(z, (b, s, f, t))


def _channel(x: Tensor, p, prefix, config, rng, mode, trace) -> Tensor:
    b, s, f, t = x.shape
    z = tc.reshape(tc.transpose(x, (0, 1, 3, 2)), (1, b * s * t, f))
    z = _gated_block(z, p, prefix, config, rng, mode, learn_c=False, mock=False, trace=trace)
    return tc.transpose(tc.reshape(z, (b, s, t, f)), (0, 1, 3, 2))


def shared_axis_attention_forward(x, config: AttentionConfig, params, rng=None, mode="eval", trace=None) -> Tensor:
    """T-Att (time axis, feature-shared), C-Att (feature axis) and TC-Att (T-Att then C-Att)."""
    v = config.variant
    if v not in SHARED_AXIS_VARIANTS:
        raise ContractError(f"{v.label} is not a shared-axis variant")
    x, squeeze = _batched(x)
    p = _params(params)
    if v is Variant.TATT:
        y = _time_shared(x, p, "", config, rng, mode, trace)
    elif v is Variant.CATT:
        y = _channel(x, p, "", config, rng, mode, trace)
    else:
        y = _channel(_time_shared(x, p, "t.", config, rng, mode, trace), p, "c.", config, rng, mode, trace)
    return _unbatched(y, squeeze)


def nl_att_forward(x, config: AttentionConfig, params, rng=None, mode="eval", trace=None) -> Tensor:
    """Per-feature attention in a ``d``-dimensional embedding of each time step.

    Scores are ``Q K^T / sqrt(d)`` over time-step pairs, so each (station,
    feature) slice gets a full ``T x T`` weight matrix.
    """
    if config.variant is not Variant.NLATT:
        raise ContractError("nl_att_forward needs the NLAtt variant")
    d = config.nl_embed_dim
    if d < 1:
        raise ConfigurationError("nl_embed_dim must be >= 1")
    x, squeeze = _batched(x)
    b, s, f, t = x.shape
    p = _params(params)
    z = _feature_major(x)                                               # [F, N, T]
    n = b * s
    emb = tc.add(tc.mul(tc.reshape(z, (f, n * t, 1)), p["embed.w"]), p["embed.b"])  # [F, N*T, d]
    emb = tc.reshape(emb, (1, f, n * t, d))
    q, k, v = (tc.reshape(_stack(emb, p, r, config.depth), (config.heads, f, n, t, d)) for r in "qkv")
    scores = tc.mul(tc.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d))   # [H, F, N, T, T]
    a = tc.softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("weights", []).append(("", a.data))
    a = tc.dropout(a, config.dropout_weights, mode, rng)
    attended = tc.matmul(a, v)                                          # [H, F, N, T, d]
    heads = tc.add(tc.tsum(tc.mul(attended, p["proj.w"]), axis=-1), p["proj.b"])  # [H, F, N, T]
    combined = tc.dropout(tc.mean(heads, axis=0), config.dropout_output, mode, rng)
    normed = tc.layer_norm(combined, p["ln_gamma"], p["ln_beta"])
    out = tc.add(z, tc.mul(normed, p["alpha"]))
    return _unbatched(_from_feature_major(out, b, s), squeeze)


def dense_variant_forward(x, config: AttentionConfig, params, rng=None, mode="eval", trace=None) -> Tensor:
    """Per-feature dense stacks, summed over heads; no norm and no residual."""
    if config.variant is not Variant.DENSE:
        raise ContractError("dense_variant_forward needs the Dense variant")
    x, squeeze = _batched(x)
    b, s, f, t = x.shape
    p = _params(params)
    z = tc.reshape(_feature_major(x), (1, f, b * s, t))
    heads = tc.dropout(_stack(z, p, "dense", config.depth), config.dropout_output, mode, rng)
    return _unbatched(_from_feature_major(tc.tsum(heads, axis=0), b, s), squeeze)


_DISPATCH = {
    Variant.OATT: per_feature_attention_forward,
    Variant.ATT: per_feature_attention_forward,
    Variant.MATT: per_feature_attention_forward,
    Variant.TATT: shared_axis_attention_forward,
    Variant.CATT: shared_axis_attention_forward,
    Variant.TCATT: shared_axis_attention_forward,
    Variant.NLATT: nl_att_forward,
    Variant.DENSE: dense_variant_forward,
}


def attention_forward(x, config: AttentionConfig, params, rng=None, mode="eval", trace=None) -> Tensor:
    """Dispatch on ``config.variant``; ``NoAttention`` is the identity."""
    variant = Variant.parse(config.variant)
    if variant is Variant.NONE:
        return tc.as_tensor(x)
    try:
        fn = _DISPATCH[variant]
    except KeyError:  # pragma: no cover - Variant.parse already rejects unknown tags
        raise ContractError(f"unknown variant {variant!r}") from None
    return fn(x, config, params, rng, mode, trace)


# -- parameters -------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_gated(out, prefix, cfg, groups, dim, rng, *, roles="qkv", learn_c=False):
    h = cfg.heads
    for role in roles:
        for i in range(cfg.depth):
            out[f"{prefix}{role}.w{i}"] = _uniform(rng, dim, (h, groups, dim, dim))
            out[f"{prefix}{role}.b{i}"] = np.zeros((h, groups, 1, dim))
    if learn_c:
        out[prefix + "c"] = np.ones((h, groups, 1, 1))
    out[prefix + "ln_gamma"] = np.ones(dim)
    out[prefix + "ln_beta"] = np.zeros(dim)
    out[prefix + "alpha"] = np.zeros(())


def init_attention_params(config: AttentionConfig, n_features: int, n_steps: int,
                          rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters for ``config`` acting on ``[*, n_features, n_steps]`` inputs.

    Square maps are drawn uniform in ``+-sqrt(1/fan_in)``, biases start at 0,
    the residual gate ``alpha`` at 0 and the O-Att scales ``c`` at 1.
    """
    v = config.variant
    f, t = n_features, n_steps
    out: dict[str, np.ndarray] = {}
    if v is Variant.NONE:
        return out
    if v in PER_FEATURE_VARIANTS:
        _init_gated(out, "", config, f, t, rng, roles="v" if v is Variant.MATT else "qkv",
                    learn_c=v is Variant.OATT)
    elif v is Variant.TATT:
        _init_gated(out, "", config, 1, t, rng)
    elif v is Variant.CATT:
        _init_gated(out, "", config, 1, f, rng)
    elif v is Variant.TCATT:
        _init_gated(out, "t.", config, 1, t, rng)
        _init_gated(out, "c.", config, 1, f, rng)
    elif v is Variant.NLATT:
        d, h = config.nl_embed_dim, config.heads
        out["embed.w"] = _uniform(rng, 1, (f, 1, d))
        out["embed.b"] = np.zeros((f, 1, d))
        for role in "qkv":
            for i in range(config.depth):
                out[f"{role}.w{i}"] = _uniform(rng, d, (h, f, d, d))
                out[f"{role}.b{i}"] = np.zeros((h, f, 1, d))
        out["proj.w"] = _uniform(rng, d, (h, f, 1, 1, d))
        out["proj.b"] = np.zeros((h, f, 1, 1))
        out["ln_gamma"] = np.ones(t)
        out["ln_beta"] = np.zeros(t)
        out["alpha"] = np.zeros(())
    elif v is Variant.DENSE:
        for i in range(config.depth):
            out[f"dense.w{i}"] = _uniform(rng, t, (config.heads, f, t, t))
            out[f"dense.b{i}"] = np.zeros((config.heads, f, 1, t))
    return out


def residual_gates(params: Mapping) -> list[str]:
    """Names of the residual gate parameters in an attention parameter map."""
    return [k for k in params if k == "alpha" or k.endswith(".alpha")]
