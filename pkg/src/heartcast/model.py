"""Convolutional encoder-decoder forecaster with an optional attention preprocessor.

Pipeline for an input ``x[B, S, F, T]``::

    attention (pre-encoder placement)            [B, S, F, T]
    encoder: feature mix -> spatio-temporal conv [B, S, H_lat, T]
    attention (between placement, H_lat as F)    [B, S, H_lat, T]
    decoder: 1x1 conv over H_lat                 [B, S, T]
    regressor: dense t_in -> t_out per station   [B, S, t_out]
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import kernels
from . import tensor_core as tc
from .attention import (
    BETWEEN_ENCODER_DECODER,
    PRE_ENCODER,
    AttentionConfig,
    attention_forward,
    init_attention_params,
)
from .errors import ConfigurationError, DimensionError
from .tensor_core import RNG_ALGORITHM, Tensor

CHECKPOINT_FORMAT = "heartcast-checkpoint/1"
ATT_PREFIX = "att."


@dataclass(frozen=True)
class ModelConfig:
    stations: int
    features: int
    t_in: int = 72
    t_out: int = 72
    latent: int = 16
    conv_lag: int = 3
    encoder_dropout: float = 0.1
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if isinstance(self.attention, Mapping):
            object.__setattr__(self, "attention", AttentionConfig.from_dict(self.attention))
        for name in ("stations", "features", "t_in", "t_out", "latent", "conv_lag"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.conv_lag > self.t_in:
            raise ConfigurationError("conv_lag cannot exceed t_in")
        if not 0.0 <= self.encoder_dropout < 1.0:
            raise ConfigurationError("encoder_dropout outside [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = self.attention.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _uniform(rng, fan_in, shape):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    s, f, h, k = cfg.stations, cfg.features, cfg.latent, cfg.conv_lag
    return {
        "enc.mix": _uniform(rng, f, (h, f)),
        "enc.kernel": _uniform(rng, s * k, (h, s, s, k)),
        "enc.bias": np.zeros((s, h, 1)),
        "dec.w": _uniform(rng, h, (1, h)),
        "dec.b": np.zeros(()),
        "reg.w": _uniform(rng, cfg.t_in, (cfg.t_out, cfg.t_in)),
        "reg.b": np.zeros(cfg.t_out),
    }


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """All parameters for ``cfg``.

    The backbone and the attention block draw from separate streams of
    ``seed``, so every variant shares the baseline's backbone initialisation.
    """
    params = init_backbone_params(cfg, tc.make_rng(seed, 0))
    att_features = cfg.latent if cfg.attention.placement == BETWEEN_ENCODER_DECODER else cfg.features
    att = init_attention_params(cfg.attention, att_features, cfg.t_in, tc.make_rng(seed, 1))
    params.update({ATT_PREFIX + k: v for k, v in att.items()})
    return params


def _get(params, name):
    return tc.as_tensor(params[name])


def stconv(u: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded spatio-temporal convolution, see :mod:`heartcast.kernels`."""
    pad_left, _ = kernels.same_padding(kernel.shape[-1])
    out = kernels.stconv_forward(u.data, kernel.data, pad_left)

    def _bw(g):
        gu, gw = kernels.stconv_backward(g, u.data, kernel.data, pad_left)
        return (gu if u.requires_grad else None, gw if kernel.requires_grad else None)

    return tc.custom_op(out, (u, kernel), _bw, "stconv")


def encoder_forward(x, params, cfg: ModelConfig, rng=None, mode="eval") -> Tensor:
    """``[B, S, F, T] -> [B, S, H_lat, T]``.

    Features are first mixed with per-latent-channel weights, then each
    (latent channel, output station) pair has its own kernel spanning every
    input station and ``conv_lag`` time steps, followed by ReLU and dropout.
    """
    x = tc.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (cfg.stations, cfg.features, cfg.t_in):
        raise DimensionError(f"encoder expects [B,{cfg.stations},{cfg.features},{cfg.t_in}], got {x.shape}")
    u = tc.matmul(_get(params, "enc.mix"), x)
    pre = tc.add(stconv(u, _get(params, "enc.kernel")), _get(params, "enc.bias"))
    return tc.dropout(tc.relu_elem(pre), cfg.encoder_dropout, mode, rng)


def decoder_forward(latent, params, cfg: ModelConfig) -> Tensor:
    """1x1 convolution over the latent axis: ``[B, S, H_lat, T] -> [B, S, T]``."""
    latent = tc.as_tensor(latent)
    if latent.ndim != 4 or latent.shape[2] != cfg.latent:
        raise DimensionError(f"decoder expects [B,S,{cfg.latent},T], got {latent.shape}")
    b, s, _, t = latent.shape
    y = tc.add(tc.matmul(_get(params, "dec.w"), latent), _get(params, "dec.b"))
    return tc.relu_elem(tc.reshape(y, (b, s, t)))


def regressor_forward(y, params, cfg: ModelConfig) -> Tensor:
    """Dense ``t_in -> t_out`` map shared by all stations, no activation."""
    y = tc.as_tensor(y)
    if y.ndim != 3 or y.shape[-1] != cfg.t_in:
        raise DimensionError(f"regressor expects [B,S,{cfg.t_in}], got {y.shape}")
    return tc.dense_apply(y, _get(params, "reg.w"), _get(params, "reg.b"))


def attention_params(params: Mapping) -> dict:
    n = len(ATT_PREFIX)
    return {k[n:]: v for k, v in params.items() if k.startswith(ATT_PREFIX)}


def heart_forward(x, params, cfg: ModelConfig, rng=None, mode="eval", trace=None) -> Tensor:
    """Full forward pass; accepts ``[S, F, T]`` or batched ``[B, S, F, T]`` input."""
    x = tc.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = tc.reshape(x, (1, *x.shape))
    att_cfg = cfg.attention
    att_p = attention_params(params)
    if att_cfg.placement == PRE_ENCODER:
        x = attention_forward(x, att_cfg, att_p, rng, mode, trace)
    latent = encoder_forward(x, params, cfg, rng, mode)
    if att_cfg.placement == BETWEEN_ENCODER_DECODER:
        latent = attention_forward(latent, att_cfg, att_p, rng, mode, trace)
    out = regressor_forward(decoder_forward(latent, params, cfg), params, cfg)
    return tc.reshape(out, out.shape[1:]) if squeeze else out


class HeartModel:
    """Parameter container plus forward/gradient helpers.

    ``params`` maps names to plain float64 arrays; they are wrapped as graph
    leaves only for the duration of a gradient evaluation.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        expected = {k: v.shape for k, v in init_params(config, 0).items()}
        got = {k: v.shape for k, v in self.params.items()}
        if expected != got:
            raise ConfigurationError(f"parameter shapes do not match the configuration: {sorted(set(expected) ^ set(got))}")

    def __call__(self, x, rng=None, mode="eval", trace=None) -> np.ndarray:
        return heart_forward(x, self.params, self.config, rng, mode, trace).data

    def loss_and_grads(self, x, y, rng=None, mode="train") -> tuple[float, dict[str, np.ndarray]]:
        """MSE on one batch and its gradient with respect to every parameter."""
        leaves = {k: Tensor(v, True) for k, v in self.params.items()}
        pred = heart_forward(x, leaves, self.config, rng, mode)
        diff = tc.add(pred, tc.as_tensor(-np.asarray(y, dtype=np.float64)))
        loss = tc.mean(tc.square(diff))
        tc.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
        return float(loss.data), grads

    def copy(self) -> "HeartModel":
        return HeartModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def save(self, path, extra: Mapping | None = None) -> None:
        save_checkpoint(path, self, extra)

    @classmethod
    def load(cls, path) -> "HeartModel":
        return load_checkpoint(path)[0]


def save_checkpoint(path, model: HeartModel, extra: Mapping | None = None) -> None:
    """Write a single ``.npz`` file: a JSON header plus one ``<f8`` array per parameter."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "rng": RNG_ALGORITHM,
        "config": model.config.to_dict(),
        "parameters": {k: list(v.shape) for k, v in model.params.items()},
        "extra": dict(extra or {}),
    }
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in model.params.items()}
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=header, **arrays)


def load_checkpoint(path) -> tuple[HeartModel, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"unsupported checkpoint format {meta.get('format')!r}")
        params = {k: np.array(z[k], dtype=np.float64) for k in meta["parameters"]}
    for k, shape in meta["parameters"].items():
        if list(params[k].shape) != shape:
            raise ConfigurationError(f"checkpoint tensor {k} has shape {params[k].shape}, header says {shape}")
    return HeartModel(ModelConfig.from_dict(meta["config"]), params), meta
