"""Uncertainty-guided single-head attention over a feature map.

The bias network reads the uncertainty map at feature resolution and emits one
additive logit per key location, shared by every query row.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import NumericError, Tensor, conv2d, leaky_relu, softmax, swapaxes

BIAS_MODES = ("key", "none")


def init_attention(params: dict[str, Tensor], prefix: str, d_model: int, d_k: int,
                   rng: np.random.Generator, bias_hidden: int = 8) -> None:
    def dense(name, fan_in, fan_out, gain=1.0):
        w = rng.standard_normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in))
        params[f"{prefix}.{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{prefix}.{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    dense("q", d_model, d_k)
    dense("k", d_model, d_k)
    dense("v", d_model, d_model)
    dense("o", d_model, d_model, gain=0.5)
    for name, cin, cout in (("f1", 1, bias_hidden), ("f2", bias_hidden, 1)):
        w = rng.standard_normal((cout, cin, 3, 3)) * (math.sqrt(2.0) / math.sqrt(cin * 9))
        params[f"{prefix}.{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{prefix}.{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def attention_param_count(d_model: int, d_k: int, bias_hidden: int = 8) -> int:
    proj = 2 * (d_model * d_k + d_k) + 2 * (d_model * d_model + d_model)
    bias_net = (9 * bias_hidden + bias_hidden) + (9 * bias_hidden + 1)
    return proj + bias_net


def uncertainty_bias(params: dict[str, Tensor], prefix: str, u_feat) -> Tensor:
    """Per-key logits (N, 1, h*w) predicted from pooled uncertainty (N, 1, h, w)."""
    u = u_feat if isinstance(u_feat, Tensor) else Tensor(u_feat)
    if u.ndim != 4 or u.shape[1] != 1:
        raise NumericError(f"uncertainty map must be (N, 1, h, w), got {u.shape}")
    h = leaky_relu(conv2d(u, params[f"{prefix}.f1.w"], params[f"{prefix}.f1.b"], padding=1))
    out = conv2d(h, params[f"{prefix}.f2.w"], params[f"{prefix}.f2.b"], padding=1)
    n, _, hh, ww = out.shape
    return out.reshape(n, 1, hh * ww)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + bias) v for (N, L, d) inputs; returns (out, weights)."""
    logits = (q @ swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        logits = logits + bias
    weights = softmax(logits)
    return weights @ v, weights


def attend(params: dict[str, Tensor], prefix: str, features: Tensor, u_feat,
           bias_mode: str = "key", bias=None, return_weights: bool = False):
    """Residual attention block on (N, d, h, w) features.

    ``bias`` overrides the learned uncertainty bias (shape broadcastable to
    (N, L, L)); ``bias_mode="none"`` drops it to plain self-attention.
    """
    if bias_mode not in BIAS_MODES:
        raise ValueError(f"bias_mode must be one of {BIAS_MODES}")
    n, d, h, w = features.shape
    if bias is None and bias_mode == "key":
        u_shape = u_feat.shape
        if tuple(u_shape[2:]) != (h, w):
            raise NumericError(f"uncertainty resolution {tuple(u_shape[2:])} != features {(h, w)}")
        bias = uncertainty_bias(params, prefix, u_feat)
    x = swapaxes(features.reshape(n, d, h * w), 1, 2)  # (N, L, d)
    q = x @ params[f"{prefix}.q.w"] + params[f"{prefix}.q.b"]
    k = x @ params[f"{prefix}.k.w"] + params[f"{prefix}.k.b"]
    v = x @ params[f"{prefix}.v.w"] + params[f"{prefix}.v.b"]
    att, weights = scaled_attention(q, k, v, bias)
    out = att @ params[f"{prefix}.o.w"] + params[f"{prefix}.o.b"]
    out = swapaxes(out, 1, 2).reshape(n, d, h, w)
    result = features + out
    return (result, weights) if return_weights else result
