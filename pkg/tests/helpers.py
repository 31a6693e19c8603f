from typing import NamedTuple

import numpy as np

from heartcast import tensor_core as tc
from heartcast.attention import AttentionConfig, Variant, attention_forward, init_attention_params
from heartcast.model import HeartModel, ModelConfig, heart_forward
from oracles import ReluProbe, central_difference, central_difference_at, max_relative_error, relative_error

ALL_VARIANTS = [v for v in Variant if v is not Variant.NONE]


class GradCheck(NamedTuple):
    """Worst relative error over elements whose FD stencil stays off ReLU kinks."""

    error: float
    excluded: int
    total: int


def no_dropout(variant, heads=2, depth=2, **kw):
    return AttentionConfig(variant, heads=heads, depth=depth, dropout_weights=0.0, dropout_output=0.0, **kw)


def random_params(params: dict, rng, scale=0.6) -> dict:
    """Every parameter redrawn from N(0, scale^2), gates and biases included."""
    return {k: np.array(rng.normal(0.0, scale, size=v.shape)) for k, v in params.items()}


def attention_setup(variant, rng, s=2, f=3, t=6, heads=2, depth=2, nl_embed_dim=3):
    cfg = no_dropout(variant, heads, depth, nl_embed_dim=nl_embed_dim)
    params = random_params(init_attention_params(cfg, f, t, rng), rng)
    return cfg, params


def _extended(params: dict) -> dict:
    return {k: np.asarray(v, dtype=np.longdouble).copy() for k, v in params.items()}


def _leaves(arrays: dict) -> dict:
    # explicit Tensors: as_tensor would coerce plain arrays to float64
    return {k: tc.Tensor(v) for k, v in arrays.items()}


REFINE_ABOVE = 1e-5


def _check(analytic: dict, f64, params: dict, f_ext, ext: dict) -> GradCheck:
    """Float64 central differences everywhere; coordinates that disagree by
    more than ``REFINE_ABOVE`` are recomputed in extended precision, and
    dropped if their stencil crosses a ReLU kink."""
    numeric = central_difference(f64, params)
    valid = {k: np.ones(v.shape, dtype=bool) for k, v in numeric.items()}
    coords = [(k, int(i)) for k in numeric
              for i in np.flatnonzero(relative_error(analytic[k], numeric[k]) > REFINE_ABOVE)]
    if coords:
        with ReluProbe() as probe:
            refined = central_difference_at(f_ext, ext, coords, probe=probe)
        for (k, i), (value, crossed) in refined.items():
            numeric[k].reshape(-1)[i] = value
            valid[k].reshape(-1)[i] = not crossed
    total = sum(m.size for m in valid.values())
    excluded = total - sum(int(m.sum()) for m in valid.values())
    return GradCheck(max_relative_error(analytic, numeric, mask=valid), excluded, total)


def attention_grad_error(variant, rng, s=2, f=3, t=6, heads=2, depth=2) -> GradCheck:
    """Analytic gradient of a random projection of the output, checked by :func:`_check`."""
    cfg, params = attention_setup(variant, rng, s, f, t, heads, depth)
    x = rng.normal(size=(s, f, t))
    proj = rng.normal(size=(s, f, t))

    def loss(ps, x_, proj_):
        return tc.tsum(tc.mul(attention_forward(x_, cfg, ps), proj_))

    leaves = {k: tc.Tensor(v, True) for k, v in params.items()}
    tc.backward(loss(leaves, x, proj))
    ext = _extended(params)
    x_l, proj_l = tc.Tensor(x.astype(np.longdouble)), tc.Tensor(proj.astype(np.longdouble))
    return _check({k: v.grad for k, v in leaves.items()}, lambda: float(loss(params, x, proj).data), params,
                  lambda: loss(_leaves(ext), x_l, proj_l).data, ext)


def model_setup(variant, rng, s=2, f=3, t=6, t_out=4, latent=3, heads=2, depth=2, placement="pre_encoder"):
    att = no_dropout(variant, heads, depth, nl_embed_dim=3, placement=placement)
    cfg = ModelConfig(s, f, t, t_out, latent=latent, conv_lag=3, encoder_dropout=0.0, attention=att)
    model = HeartModel(cfg, seed=int(rng.integers(1 << 30)))
    model.params = random_params(model.params, rng)
    return model


def model_grad_error(variant, rng, batch=2, **kw) -> GradCheck:
    model = model_setup(variant, rng, **kw)
    cfg = model.config
    x = rng.normal(size=(batch, cfg.stations, cfg.features, cfg.t_in))
    y = rng.normal(size=(batch, cfg.stations, cfg.t_out))
    _, grads = model.loss_and_grads(x, y, mode="eval")
    ext = _extended(model.params)
    x_l, y_l = tc.Tensor(x.astype(np.longdouble)), y.astype(np.longdouble)

    def f64():
        d = heart_forward(x, model.params, cfg).data - y
        return float(np.mean(d * d))

    def f_ext():
        d = heart_forward(x_l, _leaves(ext), cfg).data - y_l
        return np.mean(d * d)

    return _check(grads, f64, model.params, f_ext, ext)
