"""Loss terms and the composite training objective.

Every term takes batched inputs (leading batch axis) and returns one value per
example; :func:`compute_losses` averages them over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .batching import Batch
from .config import LossWeights
from .decoder import ForwardPass


def _as_probs(x) -> ad.Tensor:
    if isinstance(x, ad.Tensor):
        return x
    return ad.as_tensor(np.asarray(x, dtype=ad.get_default_dtype()))


def loss_vocab(vocab_probs, targets, mask=None) -> ad.Tensor:
    """``sum_t -log P^vocab_t(y_t)`` per example; probs (B, n, V)."""
    return ad.sum_(ad.nll(_as_probs(vocab_probs), targets, mask), axis=-1)


def loss_local(pointer_probs, local_labels, mask=None) -> ad.Tensor:
    """``sum_t -log P_t(l_t)`` per example over every response step."""
    return ad.sum_(ad.nll(_as_probs(pointer_probs), local_labels, mask), axis=-1)


def loss_global(G, global_labels, real_mask=None) -> ad.Tensor:
    """Binary cross-entropy of the global pointer against its labels, summed
    over real cells; G and labels (B, M)."""
    G = _as_probs(G)
    return ad.sum_(ad.binary_cross_entropy(G, global_labels, real_mask), axis=-1)


def loss_moe(alpha, domain, mask=None) -> ad.Tensor:
    """Per-token cross-entropy of gate weights (B, L, D) against the one-hot
    domain label (B,), summed over tokens."""
    alpha = _as_probs(alpha)
    B, L = alpha.shape[:2]
    tgt = np.broadcast_to(np.asarray(domain, dtype=np.int64)[:, None], (B, L))
    return ad.sum_(ad.nll(alpha, tgt, mask), axis=-1)


def loss_adv(beta, domain) -> ad.Tensor:
    """Multi-label binary cross-entropy of ``beta`` (B, D) against one-hot domains."""
    beta = _as_probs(beta)
    onehot = np.eye(beta.shape[-1])[np.asarray(domain, dtype=np.int64)]
    return ad.sum_(ad.binary_cross_entropy(beta, onehot), axis=-1)


@dataclass
class LossReport:
    L_v: float = 0.0
    L_g: float = 0.0
    L_l: float = 0.0
    L_basic: float = 0.0
    L_moe_enc: float = 0.0
    L_moe_dec: float = 0.0
    L_adv_enc: float = 0.0
    L_adv_dec: float = 0.0
    total: float = 0.0

    @property
    def L_moe(self) -> float:
        return self.L_moe_enc + self.L_moe_dec

    @property
    def L_adv(self) -> float:
        return self.L_adv_enc + self.L_adv_dec

    def as_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def average(reports, weights=None) -> "LossReport":
        reports = list(reports)
        if not reports:
            return LossReport()
        w = np.ones(len(reports)) if weights is None else np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        out = {}
        for k in LossReport.__dataclass_fields__:
            out[k] = float(sum(wi * getattr(r, k) for wi, r in zip(w, reports)))
        return LossReport(**out)


PARTS = ("L_v", "L_g", "L_l", "L_moe_enc", "L_moe_dec", "L_adv_enc", "L_adv_dec")


def total_loss(parts: dict, weights: LossWeights) -> tuple[ad.Tensor, LossReport]:
    """Weighted objective from scalar parts; missing parts count as 0.

    ``L_basic = g_g L_g + g_v L_v + g_l L_l`` and
    ``L = g_b L_basic + g_m (L_moe_enc + L_moe_dec) + g_a (L_adv_enc + L_adv_dec)``.
    The report is computed with the same float arithmetic as these formulas.
    """
    unknown = set(parts) - set(PARTS)
    if unknown:
        raise KeyError(f"unknown loss parts {sorted(unknown)}")
    zero = ad.as_tensor(np.zeros((), dtype=ad.get_default_dtype()))
    t = {k: parts.get(k, zero) for k in PARTS}
    t = {k: v if isinstance(v, ad.Tensor) else ad.as_tensor(np.asarray(v, dtype=ad.get_default_dtype())) for k, v in t.items()}
    w = weights
    basic = ad.add(ad.add(ad.mul(t["L_g"], w.gamma_g), ad.mul(t["L_v"], w.gamma_v)), ad.mul(t["L_l"], w.gamma_l))
    moe = ad.add(t["L_moe_enc"], t["L_moe_dec"])
    adv = ad.add(t["L_adv_enc"], t["L_adv_dec"])
    total = ad.add(ad.add(ad.mul(basic, w.gamma_b), ad.mul(moe, w.gamma_m)), ad.mul(adv, w.gamma_a))

    f = {k: float(v.data) for k, v in t.items()}
    f_basic = w.gamma_g * f["L_g"] + w.gamma_v * f["L_v"] + w.gamma_l * f["L_l"]
    f_total = (
        w.gamma_b * f_basic
        + w.gamma_m * (f["L_moe_enc"] + f["L_moe_dec"])
        + w.gamma_a * (f["L_adv_enc"] + f["L_adv_dec"])
    )
    report = LossReport(L_basic=f_basic, total=f_total, **f)
    return total, report


def compute_losses(fp: ForwardPass, batch: Batch, weights: LossWeights) -> tuple[ad.Tensor, LossReport]:
    """All terms for one teacher-forced pass, each averaged over the batch."""
    parts = {
        "L_v": ad.mean(loss_vocab(fp.vocab_probs, batch.tgt_ids, batch.tgt_mask)),
        "L_g": ad.mean(loss_global(fp.G, batch.global_labels, batch.real_mask)),
        "L_l": ad.mean(loss_local(fp.pointer_probs, batch.local, batch.tgt_mask)),
    }
    if fp.enc_alpha is not None:
        parts["L_moe_enc"] = ad.mean(loss_moe(fp.enc_alpha, batch.domain, batch.ctx_mask))
    if fp.dec_alpha is not None:
        parts["L_moe_dec"] = ad.mean(loss_moe(fp.dec_alpha, batch.domain, batch.tgt_mask))
    if fp.enc_beta is not None:
        parts["L_adv_enc"] = ad.mean(loss_adv(fp.enc_beta, batch.domain))
    if fp.dec_beta is not None:
        parts["L_adv_dec"] = ad.mean(loss_adv(fp.dec_beta, batch.domain))
    return total_loss(parts, weights)
