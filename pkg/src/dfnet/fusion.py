"""Shared-specific fusion, the expert gate, and the adversarial domain classifier."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .model import DFNet, linear


def shprivate(model: DFNet, side: str, shared, specific) -> ad.Tensor:
    """``W2 LeakyReLU(W1 [shared; specific])`` applied along the last axis."""
    if shared.shape != specific.shape:
        raise ad.ShapeError(f"shprivate: shared {shared.shape} vs specific {specific.shape}")
    x = ad.concat([shared, specific], axis=-1)
    return linear(model, f"{side}.fuse.2", ad.leaky_relu(linear(model, f"{side}.fuse.1", x)))


def _experts_last(experts) -> ad.Tensor:
    # (D, ..., H) -> (..., D, H)
    nd = experts.ndim
    return ad.transpose(experts, tuple(range(1, nd - 1)) + (0, nd - 1))


def moe_gate(model: DFNet, side: str, experts) -> ad.Tensor:
    """Softmax over domains from the concatenation of all ``|D|`` expert features.

    ``experts`` is stacked on axis 0: ``(D, ..., H)``; returns ``(..., D)``.
    """
    D = model.n_domains
    if experts.shape[0] != D:
        raise ValueError(f"moe_gate: expected {D} experts, got {experts.shape[0]}")
    e = _experts_last(experts)
    feats = ad.reshape(e, e.shape[:-2] + (D * e.shape[-1],))
    return ad.softmax(linear(model, f"{side}.gate", feats), axis=-1)


def mix(alpha, experts) -> ad.Tensor:
    """``sum_i alpha_i * experts[i]``; alpha ``(..., D)``, experts ``(D, ..., H)``."""
    e = _experts_last(experts)
    a = ad.reshape(alpha, alpha.shape[:-1] + (1, alpha.shape[-1]))
    out = ad.matmul(a, e)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-1],))


def dynamic_fuse(model: DFNet, side: str, shared, experts):
    """Fuse shared and private features for one side.

    Returns ``(fused, alpha)``; ``alpha`` is None when the gate is ablated
    (experts are then averaged uniformly) or there are no private experts.
    """
    cfg = model.config
    if experts is None:
        return shared, None
    if cfg.dynamic_fusion:
        alpha = moe_gate(model, side, experts)
        mixture = mix(alpha, experts)
    else:
        alpha = None
        mixture = ad.mul(ad.sum_(experts, axis=0), 1.0 / experts.shape[0])
    if shared is None:
        return mixture, alpha
    return shprivate(model, side, shared, mixture), alpha


def adversarial_classify(model: DFNet, side: str, features, mask, lam: float | None = None) -> ad.Tensor:
    """Domain probabilities ``beta`` (B, |D|) from a shared feature sequence.

    Gradient reversal, width-3 convolution with LeakyReLU, masked max-pool over
    time, then ``sigmoid(LeakyReLU(W c + b))``.
    """
    lam = model.config.grl_lambda if lam is None else lam
    m = np.asarray(mask, dtype=bool)
    x = ad.gradient_reversal(features, lam)
    x = ad.mul(x, m[..., None].astype(x.dtype))
    h = ad.leaky_relu(ad.conv1d(x, model[f"adv.{side}.conv.W"], model[f"adv.{side}.conv.b"]))
    pooled = ad.max_pool_seq(h, m)
    return ad.sigmoid(ad.leaky_relu(linear(model, f"adv.{side}.head", pooled)))
