"""Training objective: classification plus contrastive, perturbation-KL,
semantic-KL, style-invariance and field-alignment terms."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, astensor


@dataclass
class LossWeights:
    intra: float = 0.1
    cross: float = 0.1
    adv: float = 0.5
    sem: float = 0.1
    style: float = 0.1
    reg: float = 0.05
    unc: float = 0.1
    tau: float = 0.1  # InfoNCE temperature

    def validate(self):
        for name, val in asdict(self).items():
            if name == "tau":
                if val <= 0:
                    raise ValueError(f"tau must be positive, got {val}")
            elif val < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {val}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


PART_NAMES = ("ce", "intra", "cross", "adv", "sem", "style", "reg", "unc")


def loss_ce(p_fake, y):
    """Mean binary cross-entropy over the batch."""
    p_fake = astensor(p_fake)
    if p_fake.size == 0:
        raise ValueError("loss_ce: empty batch")
    return T.cross_entropy(p_fake, y)


def _l2_normalize(x):
    norm = T.l2_norm(x, axis=-1)
    return T.div(x, T.reshape(T.clip(norm, 1e-12, np.inf), (*norm.shape, 1)))


def _logsumexp(logits):
    m = T.stopgrad(T.max_reduce(logits, axis=-1, keepdims=True))
    return T.add(T.log(T.sum_(T.exp(T.sub(logits, m)), axis=-1)), T.reshape(m, m.shape[:-1]))


def loss_infonce(U, V, tau):
    """Aligned-pair InfoNCE with cosine similarity.

    U, V: (N, p) with (u_i, v_i) the positive pairs; every v_j in the batch
    serves as a candidate for u_i.
    """
    U, V = astensor(U), astensor(V)
    if U.shape != V.shape:
        raise T.ShapeError(f"loss_infonce: shapes {U.shape} vs {V.shape}")
    n = U.shape[0]
    if n < 2:
        raise ValueError(f"loss_infonce: need >= 2 pairs for negatives, got {n}")
    un = _l2_normalize(U)
    vn = _l2_normalize(V)
    logits = T.mul(T.matmul(un, T.transpose(vn, (1, 0))), 1.0 / tau)  # (N, N)
    pos = T.sum_(T.mul(logits, Tensor(np.eye(n, dtype=np.float32))), axis=-1)
    return T.mean_(T.sub(_logsumexp(logits), pos))


def loss_adv(head_fn, feat, noise_scale, seed, delta=None):
    """Mean KL between predictions on clean and noise-perturbed representations.

    head_fn maps a representation tensor to class probabilities; the noise is
    Gaussian with std = noise_scale * RMS(feat), deterministic given seed.
    Gradient flows through both branches. An explicit `delta` array overrides
    the sampled perturbation (the perturbation is always treated as constant).
    """
    feat = astensor(feat)
    p_clean = head_fn(feat)
    if noise_scale == 0.0 and delta is None:
        return T.mean_(T.sum_(T.mul(p_clean, 0.0), axis=-1))
    if delta is None:
        rms = float(np.sqrt(np.mean(feat.data.astype(np.float64) ** 2)))
        rng = np.random.Generator(np.random.PCG64(seed))
        delta = rng.normal(0.0, noise_scale * rms, feat.shape)
    p_noisy = head_fn(T.add(feat, Tensor(np.asarray(delta), dtype=feat.dtype)))
    return T.kl_div(p_clean, p_noisy)


def loss_sem(p_orig, p_fuse):
    """Mean KL(p_orig || p_fuse) between original-text and fused-text predictions."""
    return T.kl_div(astensor(p_orig), astensor(p_fuse))


def loss_style(views, tau):
    """Multi-positive InfoNCE over per-video text-view embeddings.

    views: (B, V+1, p). Views of the same video are positives; all views of
    other videos are negatives. Averaged over anchors and positives.
    """
    views = astensor(views)
    if views.ndim != 3:
        raise T.ShapeError(f"loss_style: expected (B, views, dim), got {views.shape}")
    B, nv, _ = views.shape
    if B < 2:
        raise ValueError(f"loss_style: need >= 2 videos in the batch, got {B}")
    if nv < 2:
        raise ValueError(f"loss_style: need >= 2 views per video, got {nv}")
    flat = _l2_normalize(T.reshape(views, (B * nv, views.shape[-1])))
    logits = T.mul(T.matmul(flat, T.transpose(flat, (1, 0))), 1.0 / tau)  # (B*nv, B*nv)

    n = B * nv
    video = np.repeat(np.arange(B), nv)
    same_video = (video[:, None] == video[None, :])
    eye = np.eye(n, dtype=bool)
    pos_mask = (same_video & ~eye).astype(np.float32)
    # exclude self-similarity from the candidate set
    neg_inf = Tensor(np.where(eye, -1e9, 0.0).astype(np.float32))
    masked = T.add(logits, neg_inf)
    lse = _logsumexp(masked)  # (n,)
    pos_count = pos_mask.sum(axis=1)
    pos_term = T.div(
        T.sum_(T.mul(masked, Tensor(pos_mask)), axis=-1), Tensor(pos_count.astype(np.float32))
    )
    return T.mean_(T.sub(lse, pos_term))


def total_loss(parts, weights: LossWeights):
    """Weighted sum per the composite objective; parts maps name -> scalar Tensor."""
    lam = {
        "ce": 1.0, "intra": weights.intra, "cross": weights.cross,
        "adv": weights.adv, "sem": weights.sem, "style": weights.style,
        "reg": weights.reg, "unc": weights.unc,
    }
    total = None
    for name in PART_NAMES:
        if name not in parts:
            continue
        term = T.mul(parts[name], lam[name])
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("total_loss: no parts given")
    return total
